"""GMM criterion, weight matrices, Newton minimization, one- and two-step estimators."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._linalg import obs_mean, outer_mean, sym_inv, symmetrize
from .errors import ContractError, NonConvergenceError, SingularWeightError
from .model import Dataset, MomentModel, _validate, evaluate, hessian_term

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 200
_START_OFFSETS = (0.0, 1.0, -1.0, 10.0, -10.0)


@dataclass(frozen=True)
class FitOptions:
    """Optimizer settings.  ``starts`` is an ``(S, p)`` array or None for the default grid."""

    starts: np.ndarray | None = None
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER


@dataclass(frozen=True, eq=False)
class WeightRecipe:
    """How a weight matrix is built from the data.

    kinds: ``identity``, ``fixed`` (``matrix``), ``centered`` (inverse centered
    covariance of the moments at ``anchor``), ``outer`` (inverse of
    ``n^-1 sum f_i f_i'`` for a per-observation feature vector ``f_i``).
    """

    kind: str
    matrix: np.ndarray | None = None
    anchor: "GmmFit | None" = None
    features: Callable[[np.ndarray], np.ndarray] | None = None

    @classmethod
    def identity(cls) -> "WeightRecipe":
        return cls("identity")

    @classmethod
    def fixed(cls, matrix) -> "WeightRecipe":
        return cls("fixed", matrix=np.asarray(matrix, dtype=float))

    @classmethod
    def centered(cls, anchor: "GmmFit") -> "WeightRecipe":
        return cls("centered", anchor=anchor)

    @classmethod
    def outer(cls, features: Callable[[np.ndarray], np.ndarray]) -> "WeightRecipe":
        return cls("outer", features=features)

    @property
    def random(self) -> bool:
        """Whether the realized weight depends on the sample."""
        return self.kind in ("centered", "outer")


@dataclass(frozen=True, eq=False)
class RealizedWeight:
    """A weight matrix with the pieces its sampling influence needs.

    For random recipes ``W = S^-1`` with ``S = n^-1 sum c_i c_i'``; the
    per-observation influence is ``W_i = -W (c_i c_i' - S) W`` (mean zero).
    ``factors`` holds the ``c_i`` (``(..., n, Lg)``), or None for nonrandom weights.
    """

    W: np.ndarray
    S: np.ndarray | None = None
    factors: np.ndarray | None = None
    ok: np.ndarray | None = None
    condition: np.ndarray | None = None

    def influence_times(self, v: np.ndarray) -> np.ndarray:
        """``W_i v`` for every observation; ``v`` is ``(..., Lg)``."""
        u = np.einsum("...ij,...j->...i", self.W, v)
        cu = np.einsum("...ni,...i->...n", self.factors, u)
        inner = self.factors * cu[..., None] - np.einsum("...ij,...j->...i", self.S, u)[..., None, :]
        return -np.einsum("...ij,...nj->...ni", self.W, inner)

    def influence_terms(self) -> np.ndarray:
        """All ``W_i`` as an ``(..., n, Lg, Lg)`` array."""
        c = self.factors
        D = c[..., :, None] * c[..., None, :] - self.S[..., None, :, :]
        return -np.einsum("...ij,...njk,...kl->...nil", self.W, D, self.W)


@dataclass(frozen=True, eq=False)
class GmmFit:
    """Result of a GMM minimization."""

    theta: np.ndarray
    step: int
    weight: np.ndarray
    recipe: WeightRecipe
    criterion_value: float
    converged: bool
    first_step: "GmmFit | None" = None
    gradient_norm: float = float("nan")
    start_spread: float = 0.0
    n: int = 0
    iterations: int = 0


def _check_symmetric(W: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"weight must be a square matrix, got shape {W.shape}")
    scale = max(np.max(np.abs(W)), np.finfo(float).tiny)
    if np.max(np.abs(W - W.T)) > 1e-12 * scale:
        raise ValueError("weight matrix is not symmetric")
    return W


def criterion(model: MomentModel, data: Dataset, theta, W) -> float:
    """``J_n(theta, W) = g_n(theta)' W g_n(theta)``."""
    theta = _validate(model, data, theta)
    W = _check_symmetric(W)
    g, _, _ = evaluate(model, data.values, theta, order=0)
    gn = g.mean(axis=0)
    return float(gn @ W @ gn)


def realize_weight(model: MomentModel, X: np.ndarray, recipe: WeightRecipe, anchor_theta=None) -> RealizedWeight:
    """Batched weight realization; ``X`` is ``(B, n, d)`` or ``(n, d)``.

    ``anchor_theta`` overrides the recipe's anchor fit (used when each
    bootstrap draw has its own first-step estimate).
    """
    lg = model.n_moments
    batch = X.shape[:-2] if anchor_theta is None else np.broadcast_shapes(X.shape[:-2], np.shape(anchor_theta)[:-1])
    if recipe.kind == "identity":
        return RealizedWeight(np.broadcast_to(np.eye(lg), batch + (lg, lg)))
    if recipe.kind == "fixed":
        W = _check_symmetric(recipe.matrix)
        if W.shape != (lg, lg):
            raise ContractError(f"fixed weight must be {lg}x{lg}")
        return RealizedWeight(np.broadcast_to(W, batch + (lg, lg)))
    if recipe.kind == "centered":
        if anchor_theta is None:
            if recipe.anchor is None:
                raise ContractError("centered weight needs a first-step anchor")
            anchor_theta = recipe.anchor.theta
        g, _, _ = evaluate(model, X, np.asarray(anchor_theta, dtype=float), order=0)
        c = g - obs_mean(g)[..., None, :]
    elif recipe.kind == "outer":
        feat = recipe.features if recipe.features is not None else model.weight_features
        if feat is None:
            raise ContractError("outer weight needs a feature extractor")
        c = np.asarray(feat(X), dtype=float)
        if c.shape[-1] != lg:
            raise ContractError(f"weight features must have {lg} columns, got {c.shape[-1]}")
        c = np.broadcast_to(c, batch + c.shape[-2:])
    else:
        raise ContractError(f"unknown weight recipe {recipe.kind!r}")
    S = symmetrize(outer_mean(c))
    W, ok, cond = sym_inv(S)
    return RealizedWeight(W, S, c, ok, cond)


def centered_weight(model: MomentModel, data: Dataset, theta) -> np.ndarray:
    """Inverse of the centered second-moment matrix of ``g(X_i, theta)``."""
    theta = _validate(model, data, theta)
    rw = realize_weight(model, data.values, WeightRecipe("centered"), anchor_theta=theta)
    if not rw.ok:
        raise SingularWeightError("centered moment covariance is singular", float(rw.condition))
    return rw.W


def default_starts(model: MomentModel) -> np.ndarray:
    """Deterministic multi-start grid inside the parameter box."""
    lo, hi = model.lower, model.upper
    center = np.clip(0.0, lo, hi)
    width = hi - lo
    starts = []
    for off in _START_OFFSETS:
        s = center + off
        # narrow boxes: fall back to evenly spaced interior fractions
        s = np.where((s < lo) | (s > hi), lo + width * (0.5 + off / 25.0), s)
        starts.append(np.clip(s, lo, hi))
    return np.array(starts)


@dataclass
class _BatchResult:
    theta: np.ndarray
    crit: np.ndarray
    grad_norm: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray


def _gather(X: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return X if X.ndim == 2 else X[idx]


class _MeanEvaluator:
    """Sample means ``(g_n, G_n, G2_n)`` at batches of parameter values.

    For affine models the means are exactly ``a_n + M_n theta`` with
    ``a_n = g_n(0)`` and ``M_n = G_n``, so one pass over the observations
    serves every Newton iteration.
    """

    def __init__(self, model: MomentModel, X: np.ndarray, B: int):
        self.model = model
        self.X = X
        self.order = 1 if model.affine else 2
        if model.affine:
            zero = np.zeros((1 if X.ndim == 2 else B, model.n_params))
            with np.errstate(all="ignore"):
                g0 = model.g(X, zero)
                G0 = np.broadcast_to(model.G(X, zero), g0.shape + (model.n_params,))
            self.a = np.broadcast_to(obs_mean(g0), (B, model.n_moments))
            self.M = np.broadcast_to(obs_mean(G0, -3), (B, model.n_moments, model.n_params))

    def __call__(self, rows: np.ndarray, theta: np.ndarray):
        if self.model.affine:
            M = self.M[rows]
            return self.a[rows] + np.einsum("bic,bc->bi", M, theta), M, None
        X = _gather(self.X, rows)
        with np.errstate(all="ignore"):
            g, G, G2 = _eval_safe(self.model, X, theta, self.order)
        return obs_mean(g), obs_mean(G, -3), None if G2 is None else obs_mean(G2, -3)


def newton_batch(
    model: MomentModel,
    X: np.ndarray,
    W: np.ndarray,
    theta0: np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> _BatchResult:
    """Damped Newton on ``J_n`` for a batch of problems.

    ``X`` is ``(n, d)`` (shared) or ``(B, n, d)``; ``W`` is ``(B, Lg, Lg)``;
    ``theta0`` is ``(B, p)``.  The search direction uses the analytic
    Hessian ``2{G'WG + (g'W (x) I)G2}``, ridge-shifted when not positive
    definite, with Armijo backtracking.  A problem is converged when
    ``max|grad J_n| <= tol`` or when the Newton step falls below machine
    precision relative to ``theta`` at a positive definite Hessian.
    """
    B, p = theta0.shape
    lo, hi = model.lower, model.upper
    eps = np.finfo(float).eps
    means = _MeanEvaluator(model, X, B)
    theta = np.clip(np.array(theta0, dtype=float), lo, hi)
    crit = np.full(B, np.inf)
    gnorm = np.full(B, np.inf)
    converged = np.zeros(B, dtype=bool)
    iters = np.zeros(B, dtype=int)

    active = np.arange(B)
    gn, Gn, G2n = means(active, theta)
    for it in range(max_iter + 1):
        if active.size == 0:
            break
        Wa = W[active]
        ta = theta[active]
        Wg = np.einsum("bij,bj->bi", Wa, gn)
        Ja = np.einsum("bi,bi->b", gn, Wg)
        GtWg = np.einsum("bic,bi->bc", Gn, Wg)
        gmax = 2.0 * np.max(np.abs(GtWg), axis=-1)
        crit[active] = Ja
        gnorm[active] = gmax
        iters[active] = it
        bad = ~np.isfinite(Ja) | ~np.isfinite(gmax)
        done = (gmax <= tol) & ~bad
        converged[active[done]] = True
        keep = ~(done | bad)
        if it == max_iter or not np.any(keep):
            break

        Gk, Wk = Gn[keep], Wa[keep]
        Ht = np.einsum("bic,bij,bjm->bcm", Gk, Wk, Gk)
        if G2n is not None:
            Ht = Ht + hessian_term(G2n[keep], Wg[keep])
        Ht = symmetrize(Ht)
        vals = np.linalg.eigvalsh(Ht)
        scale = np.maximum(np.abs(vals[:, -1]), 1e-300)
        indefinite = vals[:, 0] <= 1e-12 * scale
        ridge = np.where(indefinite, np.abs(vals[:, 0]) + 1e-8 * scale, 0.0)
        step = -np.linalg.solve(Ht + ridge[:, None, None] * np.eye(p), GtWg[keep][..., None])[..., 0]
        slope = 2.0 * np.einsum("bc,bc->b", GtWg[keep], step)

        act = active[keep]
        tk = ta[keep]
        Jk = Ja[keep]
        tiny = ~indefinite & (
            np.max(np.abs(step), axis=-1) <= 4 * eps * (1.0 + np.max(np.abs(tk), axis=-1))
        )
        converged[act[tiny]] = True

        # Armijo backtracking on the remaining problems
        search = np.flatnonzero(~tiny)
        t = np.ones(search.size)
        new_theta = np.empty((search.size, p))
        new_state = [None, None, None]
        accepted = np.zeros(search.size, dtype=bool)
        pending = np.arange(search.size)
        for _ in range(60):
            if pending.size == 0:
                break
            rows = search[pending]
            trial = np.clip(tk[rows] + t[pending, None] * step[rows], lo, hi)
            tg, tG, tG2 = means(act[rows], trial)
            with np.errstate(all="ignore"):
                tJ = np.einsum("bi,bij,bj->b", tg, W[act[rows]], tg)
            ok = np.isfinite(tJ) & ((tJ <= Jk[rows] + 1e-4 * t[pending] * slope[rows]) | (tJ <= Jk[rows]))
            hit = pending[ok]
            accepted[hit] = True
            new_theta[hit] = trial[ok]
            for slot, arr in enumerate((tg, tG, tG2)):
                if arr is None:
                    continue
                if new_state[slot] is None:
                    new_state[slot] = np.empty((search.size,) + arr.shape[1:])
                new_state[slot][hit] = arr[ok]
            t[pending[~ok]] *= 0.5
            pending = pending[~ok]

        moved = search[accepted]
        theta[act[moved]] = new_theta[accepted]
        active = act[moved]
        gn, Gn, G2n = (None if s is None else s[accepted] for s in new_state)
    return _BatchResult(theta, crit, gnorm, converged, iters)


def _eval_safe(model, X, theta, order):
    g = model.g(X, theta)
    g = np.broadcast_to(g, theta.shape[:-1] + g.shape[-2:])
    G = np.broadcast_to(model.G(X, theta), g.shape + (model.n_params,))
    G2 = None
    if order == 2:
        G2 = np.broadcast_to(model.G2(X, theta), g.shape[:-1] + (model.n_moments * model.n_params, model.n_params))
    return g, G, G2


def _select(result: _BatchResult, n_problems: int, n_starts: int):
    """Pick the best start per problem: lowest criterion, then smallest norm, then index."""
    theta = result.theta.reshape(n_problems, n_starts, -1)
    crit = result.crit.reshape(n_problems, n_starts)
    conv = result.converged.reshape(n_problems, n_starts)
    gn = result.grad_norm.reshape(n_problems, n_starts)
    if n_starts == 1:
        return theta[:, 0], crit[:, 0], conv[:, 0], gn[:, 0], np.zeros(n_problems)
    best = np.zeros(n_problems, dtype=int)
    spread = np.zeros(n_problems)
    for b in range(n_problems):
        cand = np.flatnonzero(conv[b])
        if cand.size == 0:
            finite = np.flatnonzero(np.isfinite(crit[b]))
            best[b] = finite[np.argmin(crit[b, finite])] if finite.size else 0
            continue
        cmin = crit[b, cand].min()
        tie = cand[crit[b, cand] <= cmin + 1e-12 * max(1.0, abs(cmin))]
        norms = np.sqrt(np.sum(theta[b, tie] ** 2, axis=-1))
        best[b] = tie[np.lexsort((tie, norms))[0]]
        spread[b] = np.max(np.abs(theta[b, cand] - theta[b, best[b]]))
    rows = np.arange(n_problems)
    return theta[rows, best], crit[rows, best], conv[rows, best], gn[rows, best], spread


def fit_batch(model: MomentModel, X: np.ndarray, W: np.ndarray, starts: np.ndarray, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Minimize ``J_n`` for ``B`` problems from ``S`` starts each.

    ``X`` is ``(n, d)`` or ``(B, n, d)``, ``W`` is ``(B, Lg, Lg)``, ``starts``
    is ``(S, p)`` (shared) or ``(B, S, p)``.  Returns ``(theta, crit,
    converged, grad_norm, spread)`` per problem.
    """
    B = W.shape[0]
    starts = np.asarray(starts, dtype=float)
    if starts.ndim == 2:
        starts = np.broadcast_to(starts, (B,) + starts.shape)
    S = starts.shape[1]
    theta0 = starts.reshape(B * S, -1)
    Wrep = np.repeat(W, S, axis=0)
    Xrep = X if X.ndim == 2 else np.repeat(X, S, axis=0) if S > 1 else X
    res = newton_batch(model, Xrep, Wrep, theta0, tol, max_iter)
    return _select(res, B, S)


def minimize_criterion(
    model: MomentModel,
    data: Dataset,
    W,
    opts: FitOptions | None = None,
    *,
    step: int = 1,
    recipe: WeightRecipe | None = None,
    first_step: GmmFit | None = None,
) -> GmmFit:
    """Multi-start Newton minimization of ``J_n(theta, W)``; best start returned."""
    opts = opts or FitOptions()
    W = _check_symmetric(W)
    starts = default_starts(model) if opts.starts is None else np.atleast_2d(np.asarray(opts.starts, float))
    if not any(model.in_domain(s) for s in starts):
        raise ContractError("no start point inside the parameter domain")
    theta, crit, conv, gnorm, spread = fit_batch(model, data.values, W[None], starts, opts.tol, opts.max_iter)
    fit = GmmFit(
        theta=theta[0],
        step=step,
        weight=W,
        recipe=recipe or WeightRecipe.fixed(W),
        criterion_value=float(crit[0]),
        converged=bool(conv[0]),
        first_step=first_step,
        gradient_norm=float(gnorm[0]),
        start_spread=float(spread[0]),
        n=data.n,
    )
    if not fit.converged:
        raise NonConvergenceError(f"{model.name}: no start converged", best=fit)
    # criterion_value must equal criterion() at theta exactly
    object.__setattr__(fit, "criterion_value", criterion(model, data, fit.theta, W))
    return fit


def one_step(model: MomentModel, data: Dataset, recipe: WeightRecipe | None = None, opts: FitOptions | None = None) -> GmmFit:
    """One-step GMM with a nonrandom or per-observation-outer weight."""
    recipe = recipe or WeightRecipe.identity()
    if recipe.kind == "centered":
        raise ContractError("one_step does not accept a centered recipe; use two_step")
    rw = realize_weight(model, data.values, recipe)
    if rw.ok is not None and not bool(rw.ok):
        raise SingularWeightError("one-step weight matrix is singular", float(rw.condition))
    return minimize_criterion(model, data, rw.W, opts, step=1, recipe=recipe)


def two_step(
    model: MomentModel,
    data: Dataset,
    opts: FitOptions | None = None,
    first_recipe: WeightRecipe | None = None,
) -> GmmFit:
    """Two-step GMM: weight = inverse centered moment covariance at the first-step estimate."""
    first = one_step(model, data, first_recipe, opts)
    recipe = WeightRecipe.centered(first)
    rw = realize_weight(model, data.values, recipe)
    if not bool(rw.ok):
        raise SingularWeightError("first-step anchor: centered moment covariance is singular", float(rw.condition))
    return minimize_criterion(model, data, rw.W, opts, step=2, recipe=recipe, first_step=first)
