"""Nonparametric iid bootstrap t distributions for GMM estimators.

Three schemes share one batched re-estimation pipeline:

``MR``  resample the empirical distribution, keep the original moment
        function, studentize with the Hall-Inoue covariance.
``HH``  resample the empirical distribution, recenter the moment function by
        ``g_n(theta_hat)``, studentize with the conventional covariance.
``BN``  resample with empirical-likelihood probabilities that make the
        moment condition hold at ``theta_hat``, studentize conventionally.

Draws are processed in fixed-size chunks; every draw's indices depend only
on ``(seed, stream_id, b)``, so results do not depend on scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import BootstrapDegenerateError, ContractError, QuantileUnavailableError
from .estimate import GmmFit, WeightRecipe, default_starts, fit_batch, realize_weight
from .model import Dataset, MomentModel, evaluate
from .variance import conventional_batch, robust_batch, sigma_mr

FAILURE_BUDGET = 0.20
CHUNK = 128
SCHEMES = ("MR", "HH", "BN")


@dataclass(frozen=True)
class ResamplePlan:
    """``B`` draws keyed by ``(seed, stream_id, b)``; ``stream_id`` is usually the replication index."""

    B: int
    seed: int = 0
    stream_id: int = 0

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be at least 1")


@dataclass(frozen=True, eq=False)
class TStatDistribution:
    abs_t: np.ndarray
    failures: int
    scheme: str
    coordinate: int = 0
    degenerate: bool = False

    @property
    def B(self) -> int:
        return self.failures + self.abs_t.size


@dataclass(frozen=True, eq=False)
class ElWeights:
    p: np.ndarray
    lam: np.ndarray
    converged: bool
    iterations: int = 0


def resample_indices(n: int, plan: ResamplePlan, b: int) -> np.ndarray:
    """``n`` iid uniform indices in ``[0, n)`` for draw ``b``."""
    if not 0 <= b < plan.B:
        raise ValueError(f"draw index {b} outside [0, {plan.B})")
    return rng.uniform_indices(plan.seed, plan.stream_id, rng.STREAM_RESAMPLE, b, n)


# -- empirical likelihood ------------------------------------------------

def el_weights_from_moments(g: np.ndarray, max_iter: int = 100, tol: float = 1e-10) -> ElWeights:
    """EL probabilities ``p_i = 1 / (n (1 + lam'g_i))`` with ``sum p_i g_i = 0``.

    ``lam`` maximizes the concave dual ``sum log(1 + lam'g_i)`` on the region
    ``1 + lam'g_i > 1/n`` by damped Newton.  If zero is not interior to the
    convex hull of the ``g_i`` the dual is unbounded and the solver reports
    ``converged=False``.
    """
    g = np.asarray(g, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    n, lg = g.shape
    lam = np.zeros(lg)
    floor = 1.0 / n
    d = np.ones(n)
    obj = 0.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad = g.T @ (1.0 / d)
        if np.max(np.abs(grad)) / n <= tol:
            converged = True
            break
        w = 1.0 / d
        hess = (g * (w * w)[:, None]).T @ g
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        # once the predicted gain is below rounding, only feasibility is checked
        flat = float(grad @ step) <= 1e-10 * max(1.0, abs(obj))
        t = 1.0
        moved = False
        for _ in range(60):
            cand = lam + t * step
            dc = 1.0 + g @ cand
            if np.all(dc > floor):
                oc = float(np.sum(np.log(dc)))
                if oc >= obj or flat:
                    lam, d, obj = cand, dc, oc
                    moved = True
                    break
            t *= 0.5
        if not moved:
            break
    p = 1.0 / (n * d)
    if converged:
        if not (np.all(p > 0) and abs(p.sum() - 1.0) <= 1e-8 and np.max(np.abs(p @ g)) <= 1e-8):
            converged = False
        else:
            p = p / p.sum()
    return ElWeights(p, lam, converged, it)


def el_probabilities(model: MomentModel, data: Dataset, theta) -> ElWeights:
    g, _, _ = evaluate(model, data.values, np.asarray(theta, dtype=float), order=0)
    return el_weights_from_moments(g)


# -- batched re-estimation -------------------------------------------------

def _fit_with_fallback(model, Xb, W, warm, tol, max_iter):
    B = Xb.shape[0]
    starts = np.broadcast_to(np.asarray(warm, float), (B, 1, model.n_params))
    theta, crit, conv, _, _ = fit_batch(model, Xb, W, starts, tol, max_iter)
    if not np.all(conv):
        bad = np.flatnonzero(~conv)
        t2, c2, v2, _, _ = fit_batch(model, Xb[bad], W[bad], default_starts(model), tol, max_iter)
        theta[bad], crit[bad], conv[bad] = t2, c2, v2
    return theta, crit, conv


def _safe_weight(rw, lg):
    if rw.ok is None:
        return np.ascontiguousarray(rw.W), np.ones(rw.W.shape[0], dtype=bool)
    W = np.where(rw.ok[:, None, None], rw.W, np.eye(lg))
    return W, rw.ok.copy()


def refit_batch(model: MomentModel, Xb: np.ndarray, fit: GmmFit, tol=1e-10, max_iter=200):
    """Repeat ``fit``'s estimation pipeline on each resample in ``Xb`` (``(B, n, d)``).

    Returns ``(theta, realized final weight, criterion, ok)``.
    """
    lg = model.n_moments
    if fit.step == 1:
        rw = realize_weight(model, Xb, fit.recipe)
        W, ok = _safe_weight(rw, lg)
        theta, crit, conv = _fit_with_fallback(model, Xb, W, fit.theta, tol, max_iter)
        return theta, rw, crit, ok & conv
    first = fit.first_step
    if first is None:
        raise ContractError("step-2 fit has no first-step anchor")
    rw1 = realize_weight(model, Xb, first.recipe)
    W1, ok1 = _safe_weight(rw1, lg)
    th1, _, conv1 = _fit_with_fallback(model, Xb, W1, first.theta, tol, max_iter)
    rw2 = realize_weight(model, Xb, WeightRecipe("centered"), anchor_theta=th1)
    W2, ok2 = _safe_weight(rw2, lg)
    theta, crit, conv = _fit_with_fallback(model, Xb, W2, fit.theta, tol, max_iter)
    return theta, rw2, crit, ok1 & conv1 & ok2 & conv


def _draw_indices(n, plan: ResamplePlan, draws, probs=None, stream=rng.STREAM_RESAMPLE):
    if probs is None:
        return rng.uniform_indices(plan.seed, plan.stream_id, stream, draws, n)
    return rng.weighted_indices(plan.seed, plan.stream_id, stream, draws, probs)


def bootstrap_draws(
    model: MomentModel,
    data: Dataset,
    fit: GmmFit,
    plan: ResamplePlan,
    k: int,
    scheme: str,
    probs: np.ndarray | None = None,
    want_j: bool = False,
    stream: int | None = None,
):
    """Signed bootstrap t statistics (NaN marks a failed draw) and optional J statistics.

    The bootstrap t for draw ``b`` is ``(theta*_k - theta_hat_k) / sqrt(Sigma*_kk / n)``.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    X = data.values
    n = data.n
    boot_model = model
    if scheme == "HH":
        g0, _, _ = evaluate(model, X, fit.theta, order=0)
        boot_model = model.recentered(g0.mean(axis=0))
    if stream is None:
        stream = rng.STREAM_EL_RESAMPLE if scheme == "BN" else rng.STREAM_RESAMPLE
    order = 1 if model.affine else 2
    tstats = np.full(plan.B, np.nan)
    jstats = np.full(plan.B, np.nan) if want_j else None
    for start in range(0, plan.B, CHUNK):
        draws = np.arange(start, min(start + CHUNK, plan.B))
        idx = _draw_indices(n, plan, draws, probs, stream)
        Xb = X[idx]
        with np.errstate(all="ignore"):
            theta, rw, crit, ok = refit_batch(boot_model, Xb, fit)
            g, G, G2 = _eval_at(boot_model, Xb, theta, order)
            if scheme == "MR":
                sigma, vok = robust_batch(boot_model, g, G, G2, rw)
            else:
                sigma, vok = conventional_batch(boot_model, g, G, rw, fit.step)
            var = sigma[:, k, k]
            t = (theta[:, k] - fit.theta[k]) / np.sqrt(var / n)
        good = ok & vok & (var > 0) & np.isfinite(t)
        tstats[draws] = np.where(good, t, np.nan)
        if want_j:
            jstats[draws] = np.where(ok & np.isfinite(crit), n * crit, np.nan)
    return tstats, jstats


def _eval_at(model, Xb, theta, order):
    g = model.g(Xb, theta)
    G = np.broadcast_to(model.G(Xb, theta), g.shape + (model.n_params,))
    G2 = model.G2(Xb, theta) if order == 2 else None
    return g, G, G2


def tstat_distribution(tstats: np.ndarray, scheme: str, k: int) -> TStatDistribution:
    """Sorted |t| of the successful draws; raises when failures exceed the budget."""
    good = np.isfinite(tstats)
    failures = int(np.sum(~good))
    B = tstats.size
    if failures > FAILURE_BUDGET * B:
        raise BootstrapDegenerateError(
            f"{scheme} bootstrap: {failures} of {B} draws failed", failures=failures, draws=B
        )
    return TStatDistribution(np.sort(np.abs(tstats[good])), failures, scheme, k)


def _check_k(model, k):
    if not 0 <= k < model.n_params:
        raise ValueError(f"coordinate {k} outside [0, {model.n_params})")


def mr_bootstrap_t(model: MomentModel, data: Dataset, fit: GmmFit, plan: ResamplePlan, k: int = 0) -> TStatDistribution:
    """Misspecification-robust (non-recentered) bootstrap |t| distribution."""
    _check_k(model, k)
    if not sigma_mr(model, data, fit).sigma[k, k] > 0:
        raise ContractError("robust variance of the estimate is not positive")
    t, _ = bootstrap_draws(model, data, fit, plan, k, "MR")
    return tstat_distribution(t, "MR", k)


def hh_bootstrap_t(model: MomentModel, data: Dataset, fit: GmmFit, plan: ResamplePlan, k: int = 0) -> TStatDistribution:
    """Hall-Horowitz recentered bootstrap |t| distribution (conventional studentization)."""
    _check_k(model, k)
    t, _ = bootstrap_draws(model, data, fit, plan, k, "HH")
    return tstat_distribution(t, "HH", k)


def bn_bootstrap_t(
    model: MomentModel, data: Dataset, fit: GmmFit, weights: ElWeights, plan: ResamplePlan, k: int = 0
) -> TStatDistribution:
    """Brown-Newey EL-weighted bootstrap |t| distribution.

    Non-converged EL weights give a degenerate distribution (no draws).
    """
    _check_k(model, k)
    if not weights.converged:
        return TStatDistribution(np.empty(0), plan.B, "BN", k, degenerate=True)
    t, _ = bootstrap_draws(model, data, fit, plan, k, "BN", probs=weights.p)
    return tstat_distribution(t, "BN", k)


def quantile_index(values_sorted: np.ndarray, level: float) -> int:
    """Index of the smallest order statistic minimizing ``|P*(V <= z) - level|``."""
    B = values_sorted.size
    # P*(V <= v_(j)) counts ties: position of the last equal value
    counts = np.searchsorted(values_sorted, values_sorted, side="right")
    dev = np.abs(counts - level * B)
    best = dev.min()
    cand = np.flatnonzero(dev <= best + 1e-9 * max(1.0, B))
    return int(cand[0])


def bootstrap_quantile(dist: TStatDistribution, alpha: float) -> float:
    """Bootstrap critical value: the order statistic ``z`` minimizing ``|P*(|T*| <= z) - (1 - alpha)|``."""
    if dist.degenerate or dist.abs_t.size == 0:
        raise QuantileUnavailableError(f"{dist.scheme} bootstrap distribution is degenerate")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    return float(dist.abs_t[quantile_index(dist.abs_t, 1.0 - alpha)])
