"""Monte Carlo designs for the combining-data and invalid-instrument examples.

Example 1 draws ``(Y, Z0)`` bivariate normal with means ``(delta, 0)``,
unit variances and correlation ``rho``, and observes ``(Y, Z)`` with
``Z = exp(sigma Z0) - exp(sigma^2 / 2)``; the model adds the possibly wrong
restriction ``E Y = 0`` to the estimation of ``E Z``.  Example 2 is a
linear IV design whose second instrument has ``E z2 eps = delta``.

Every replication is a pure function of ``(seed, replication)``: data use
the counter RNG's data stream, bootstrap draws use ``(seed, replication, b)``.
Studies therefore give identical tables for any number of worker processes.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from . import rng
from .bootstrap import (
    ResamplePlan,
    TStatDistribution,
    bn_bootstrap_t,
    bootstrap_draws,
    el_probabilities,
    mr_bootstrap_t,
    tstat_distribution,
)
from .errors import ContractError, GmmError, PseudoTrueVerificationError
from .estimate import GmmFit, WeightRecipe, one_step, two_step
from .inference import (
    CI_KINDS,
    ConfidenceInterval,
    ci_asymptotic,
    ci_bootstrap,
    j_bootstrap_critical,
    j_test,
    size_corrected_critical,
)
from .model import Dataset, MomentModel
from .models import combining_data, linear_iv
from .variance import VarianceEstimate, sigma_conventional, sigma_mr

E = math.e
ERROR_CORRELATION = 0.99
J_LEVEL = 0.05
J_KINDS = ("J", "J*")
ORACLE_N = 1_000_000
ORACLE_SEED = 20_100_601
ORACLE_Z = 5.0


# -- designs --------------------------------------------------------------

@dataclass(frozen=True)
class Example1Spec:
    """Combining-data design; ``lognormal=False`` gives the untransformed normal ``Z``."""

    n: int = 200
    rho: float = 0.5
    sigma: float = 1.5
    delta: float = 0.0
    lognormal: bool = True

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if not abs(self.rho) < 1:
            raise ValueError("rho must lie in (-1, 1)")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def example(self) -> str:
        return "example1"


@dataclass(frozen=True)
class Example2Spec:
    """Invalid-instrument design with ``beta_0 = 0``.

    ``gamma2=None`` selects the strong-but-invalid value that keeps the
    2SLS pseudo-true value at zero.
    """

    n: int = 200
    delta: float = 0.0
    gamma1: float = 0.25
    gamma2: float | None = None

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if self.gamma1 == 0:
            raise ValueError("gamma1 must be nonzero")

    @property
    def example(self) -> str:
        return "example2"

    @property
    def gamma2_value(self) -> float:
        return gamma2_strong_invalid(self.delta) if self.gamma2 is None else float(self.gamma2)


def with_n(spec, n: int):
    return type(spec)(**{**asdict(spec), "n": int(n)})


def _unit_normals(seed: int, replication: int, n: int, k: int, stream: int = rng.STREAM_DATA) -> np.ndarray:
    return rng.standard_normals(seed, replication, stream, 0, n * k).reshape(n, k)


def simulate_example1(spec: Example1Spec, seed: int, replication: int = 0, stream: int = rng.STREAM_DATA) -> Dataset:
    """Columns ``(y, z)``."""
    e = _unit_normals(seed, replication, spec.n, 2, stream)
    y = spec.delta + e[:, 0]
    z0 = spec.rho * e[:, 0] + math.sqrt(1.0 - spec.rho**2) * e[:, 1]
    z = np.exp(spec.sigma * z0) - math.exp(spec.sigma**2 / 2.0) if spec.lognormal else z0
    return Dataset(np.column_stack([y, z]), ("y", "z"))


def simulate_example2(spec: Example2Spec, seed: int, replication: int = 0, stream: int = rng.STREAM_DATA) -> Dataset:
    """Columns ``(y, x, z1, z2)``."""
    e = _unit_normals(seed, replication, spec.n, 4, stream)
    z1 = e[:, 0]
    a = e[:, 2]
    b = ERROR_CORRELATION * a + math.sqrt(1.0 - ERROR_CORRELATION**2) * e[:, 3]
    eps = np.exp(a) - math.exp(0.5)
    u = np.exp(b) - math.exp(0.5)
    z2 = e[:, 1] + spec.delta / ((E - 1.0) * E) * eps
    x = spec.gamma1 * z1 + spec.gamma2_value * z2 + u
    y = eps  # beta_0 = 0
    return Dataset(np.column_stack([y, x, z1, z2]), ("y", "x", "z1", "z2"))


def simulate(spec, seed: int, replication: int = 0, stream: int = rng.STREAM_DATA) -> Dataset:
    if isinstance(spec, Example1Spec):
        return simulate_example1(spec, seed, replication, stream)
    return simulate_example2(spec, seed, replication, stream)


# -- pseudo-true values ------------------------------------------------------

def pseudo_true_example1(spec: Example1Spec) -> float:
    """Two-step pseudo-true value ``E Z - Cov(Y, Z) E Y``.

    With ``Z = exp(sigma Z0) - c``, Stein's identity gives
    ``Cov(Y, Z) = rho sigma exp(sigma^2 / 2)``.
    """
    cov = spec.rho * spec.sigma * math.exp(spec.sigma**2 / 2.0) if spec.lognormal else spec.rho
    return -cov * spec.delta


def rho_eps_u() -> float:
    """``E eps u`` for the mean-zero lognormal errors."""
    return math.exp(1.0 + ERROR_CORRELATION) - E


def gamma2_strong_invalid(delta: float) -> float:
    """Second-stage coefficient on ``z2`` that makes the 2SLS pseudo-true value zero."""
    return -delta * rho_eps_u() / ((E - 1.0) * E + delta**2)


def pseudo_true_example2(spec: Example2Spec) -> float:
    """2SLS probability limit ``(E xz' W E zx)^-1 E xz' W E zy`` with ``W = (E zz')^-1``."""
    v = 1.0 + spec.delta**2 / ((E - 1.0) * E)  # E z2^2
    a2 = spec.gamma2_value * v + spec.delta / ((E - 1.0) * E) * rho_eps_u()  # E z2 x
    return a2 * spec.delta / (v * spec.gamma1**2 + a2**2)


def pseudo_true(spec) -> float:
    if isinstance(spec, Example1Spec):
        return pseudo_true_example1(spec)
    return pseudo_true_example2(spec)


# -- estimation pipelines ----------------------------------------------------

def study_model(spec) -> MomentModel:
    return combining_data() if isinstance(spec, Example1Spec) else linear_iv()


def study_fit(spec, model: MomentModel, data: Dataset) -> GmmFit:
    """Two-step GMM for Example 1, one-step 2SLS for Example 2."""
    if isinstance(spec, Example1Spec):
        return two_step(model, data)
    return one_step(model, data, WeightRecipe.outer(model.weight_features))


def j_fit(spec, model: MomentModel, data: Dataset, fit: GmmFit) -> GmmFit:
    """Two-step fit for the J test; Example 2 starts from 2SLS."""
    if fit.step == 2:
        return fit
    return two_step(model, data, first_recipe=WeightRecipe.outer(model.weight_features))


# -- large-sample oracle -------------------------------------------------------

@dataclass(frozen=True)
class OracleRecord:
    key: str
    closed_form: float
    estimate: float
    stderr: float
    passed: bool
    n: int
    checks: dict = field(default_factory=dict)


def default_cache_path() -> Path:
    root = os.environ.get("MRGMM_CACHE")
    if root:
        return Path(root) / "pseudo_true.json"
    return Path.home() / ".cache" / "mrgmm" / "pseudo_true.json"


def _oracle_key(spec, n: int, seed: int) -> str:
    fields = {k: v for k, v in asdict(spec).items() if k != "n"}
    return json.dumps({"example": spec.example, **fields, "n": n, "seed": seed}, sort_keys=True)


def _load_cache(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError):
        return {}


def verify_pseudo_true(spec, n: int = ORACLE_N, seed: int = ORACLE_SEED, cache: str | Path | None = None) -> OracleRecord:
    """Compare the closed-form pseudo-true value with a large-sample estimate.

    Passes when the two agree within ``ORACLE_Z`` robust standard errors.
    For Example 2 the error cross moment ``E eps u`` is checked the same way.
    Results are cached by design parameters, oracle size and seed.
    """
    path = Path(cache) if cache is not None else default_cache_path()
    key = _oracle_key(spec, n, seed)
    stored = _load_cache(path).get(key)
    if stored is not None:
        return OracleRecord(**stored)

    big = with_n(spec, n)
    data = simulate(big, seed, 0, rng.STREAM_ORACLE)
    model = study_model(big)
    fit = study_fit(big, model, data)
    est = float(fit.theta[0])
    se = sigma_mr(model, data, fit).se(0)
    closed = pseudo_true(spec)
    passed = abs(est - closed) <= ORACLE_Z * se
    checks = {}
    if isinstance(spec, Example2Spec):
        e = _unit_normals(seed, 0, n, 4, rng.STREAM_ORACLE)
        a = e[:, 2]
        b = ERROR_CORRELATION * a + math.sqrt(1.0 - ERROR_CORRELATION**2) * e[:, 3]
        prod = (np.exp(a) - math.exp(0.5)) * (np.exp(b) - math.exp(0.5))
        m, s = float(prod.mean()), float(prod.std() / math.sqrt(n))
        checks["rho_eps_u"] = {"closed_form": rho_eps_u(), "estimate": m, "stderr": s}
        passed = passed and abs(m - rho_eps_u()) <= ORACLE_Z * s
    record = OracleRecord(key, closed, est, se, bool(passed), n, checks)

    db = _load_cache(path)
    db[key] = asdict(record)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(db, indent=1, sort_keys=True))
    except OSError:
        pass  # unwritable cache: verification still ran
    return record


def ensure_pseudo_true(spec, cache: str | Path | None = None) -> float:
    """Closed-form pseudo-true value, refusing specs whose oracle check failed."""
    rec = verify_pseudo_true(spec, cache=cache)
    if not rec.passed:
        raise PseudoTrueVerificationError(
            f"closed form {rec.closed_form:.6g} disagrees with the n={rec.n} estimate "
            f"{rec.estimate:.6g} (se {rec.stderr:.3g})"
        )
    return rec.closed_form


# -- one replication ------------------------------------------------------------

@dataclass(frozen=True)
class Replication:
    index: int
    estimate: float
    intervals: dict  # (kind, level) -> ConfidenceInterval
    se: dict  # kind -> standard error used by that kind
    failures: dict  # kind -> message
    j_reject: dict  # J kind -> bool
    j_failures: dict


def _variance_kind(kind: str) -> str:
    return "MR" if kind in ("MR", "MR*") else "C"


def run_replication(
    spec,
    index: int,
    B: int,
    levels: tuple[float, ...],
    seed: int,
    ci_kinds: tuple[str, ...] = CI_KINDS,
    j_tests: tuple[str, ...] = J_KINDS,
) -> Replication:
    """Simulate, fit and build every requested interval and J test for one replication."""
    data = simulate(spec, seed, index)
    model = study_model(spec)
    intervals, se, failures, j_reject, j_failures = {}, {}, {}, {}, {}
    try:
        fit = study_fit(spec, model, data)
    except GmmError as exc:
        msg = f"fit: {exc}"
        return Replication(index, math.nan, {}, {}, {k: msg for k in ci_kinds}, {}, {k: msg for k in j_tests})

    plan = ResamplePlan(B, seed, index)
    variances: dict[str, VarianceEstimate] = {}
    dists: dict[str, TStatDistribution] = {}
    hh_jstar = []

    def variance(vk: str) -> VarianceEstimate:
        if vk not in variances:
            variances[vk] = sigma_mr(model, data, fit) if vk == "MR" else sigma_conventional(model, data, fit)
        return variances[vk]

    def distribution(scheme: str) -> TStatDistribution:
        if scheme not in dists:
            if scheme == "MR":
                dists[scheme] = mr_bootstrap_t(model, data, fit, plan)
            elif scheme == "BN":
                dists[scheme] = bn_bootstrap_t(model, data, fit, el_probabilities(model, data, fit.theta), plan)
            else:
                want_j = "J*" in j_tests and fit.step == 2
                t, jstar = bootstrap_draws(model, data, fit, plan, 0, "HH", want_j=want_j)
                if want_j:
                    hh_jstar.append(jstar)
                dists[scheme] = tstat_distribution(t, "HH", 0)
        return dists[scheme]

    for kind in ci_kinds:
        try:
            sig = variance(_variance_kind(kind))
            for level in levels:
                if kind.endswith("*"):
                    ci = ci_bootstrap(fit, sig, distribution(kind[:-1]), 0, 1.0 - level)
                else:
                    ci = ci_asymptotic(fit, sig, 0, 1.0 - level)
                intervals[(kind, level)] = ci
            se[kind] = sig.se(0)
        except GmmError as exc:
            failures[kind] = str(exc)
            for level in levels:
                intervals.pop((kind, level), None)

    if j_tests:
        try:
            fj = j_fit(spec, model, data, fit)
        except GmmError as exc:
            fj = None
            for jk in j_tests:
                j_failures[jk] = f"fit: {exc}"
        if fj is not None:
            stat = data.n * fj.criterion_value
            for jk in j_tests:
                try:
                    if jk == "J":
                        j_reject[jk] = j_test(model, data, fj, J_LEVEL).reject
                    else:
                        if hh_jstar:
                            jstar = hh_jstar[0]
                        else:
                            _, jstar = bootstrap_draws(model, data, fj, plan, 0, "HH", want_j=True)
                        j_reject[jk] = bool(stat > j_bootstrap_critical(jstar, J_LEVEL))
                except GmmError as exc:
                    j_failures[jk] = str(exc)
    return Replication(index, float(fit.theta[0]), intervals, se, failures, j_reject, j_failures)


def default_threads() -> int:
    return os.cpu_count() or 1


def map_replications(fn, indices, threads: int | None = None) -> list:
    """Ordered map over replication indices, in worker processes when ``threads > 1``."""
    indices = list(indices)
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(indices) <= 1:
        return [fn(i) for i in indices]
    chunk = max(1, len(indices) // (8 * threads))
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, indices, chunksize=chunk))


# -- coverage --------------------------------------------------------------------

@dataclass(frozen=True)
class CoverageCell:
    kind: str
    level: float
    coverage: float
    mc_stderr: float
    mean_halfwidth: float
    degenerate_rate: float
    count: int
    failures: int


@dataclass(frozen=True)
class RejectionCell:
    kind: str
    level: float
    rate: float
    mc_stderr: float
    count: int
    failures: int


@dataclass(frozen=True)
class CoverageTable:
    spec: object
    pseudo_true: float
    r: int
    B: int
    seed: int
    cells: tuple
    j_cells: tuple
    mean_estimate: float

    def cell(self, kind: str, level: float) -> CoverageCell:
        for c in self.cells:
            if c.kind == kind and abs(c.level - level) < 1e-12:
                return c
        raise KeyError((kind, level))

    def j_cell(self, kind: str) -> RejectionCell:
        for c in self.j_cells:
            if c.kind == kind:
                return c
        raise KeyError(kind)


def _mc_stderr(p: float, m: int) -> float:
    return math.sqrt(p * (1.0 - p) / m) if m > 0 else math.nan


def _check_levels(levels) -> tuple[float, ...]:
    levels = tuple(float(v) for v in levels)
    if not levels or not all(0 < v < 1 for v in levels):
        raise ValueError("levels must lie in (0, 1)")
    return levels


def _check_kinds(kinds, allowed, what) -> tuple[str, ...]:
    kinds = tuple(kinds)
    bad = [k for k in kinds if k not in allowed]
    if bad:
        raise ValueError(f"unknown {what}: {', '.join(bad)}")
    return kinds


def summarize_coverage(reps: list[Replication], theta0: float, levels, ci_kinds, j_tests) -> tuple[tuple, tuple]:
    r = len(reps)
    cells = []
    for kind in ci_kinds:
        for level in levels:
            got = [rep.intervals[(kind, level)] for rep in reps if (kind, level) in rep.intervals]
            m = len(got)
            cov = sum(ci.covers(theta0) for ci in got) / m if m else math.nan
            half = float(np.mean([ci.halfwidth for ci in got])) if m else math.nan
            deg = sum(ci.degenerate for ci in got) / m if m else math.nan
            cells.append(CoverageCell(kind, level, cov, _mc_stderr(cov, m), half, deg, m, r - m))
    j_cells = []
    for jk in j_tests:
        got = [rep.j_reject[jk] for rep in reps if jk in rep.j_reject]
        m = len(got)
        rate = sum(got) / m if m else math.nan
        j_cells.append(RejectionCell(jk, J_LEVEL, rate, _mc_stderr(rate, m), m, r - m))
    return tuple(cells), tuple(j_cells)


def coverage_study(
    spec,
    r: int,
    B: int = 999,
    levels=(0.90, 0.95),
    seed: int = 0,
    ci_kinds=CI_KINDS,
    j_tests=J_KINDS,
    threads: int | None = 1,
    oracle_cache: str | Path | None = None,
) -> CoverageTable:
    """Coverage frequencies of the requested intervals for the design's pseudo-true value."""
    if r < 1:
        raise ValueError("r must be at least 1")
    if B < 1:
        raise ValueError("B must be at least 1")
    levels = _check_levels(levels)
    ci_kinds = _check_kinds(ci_kinds, CI_KINDS, "interval kinds")
    j_tests = _check_kinds(j_tests, J_KINDS, "J tests")
    theta0 = ensure_pseudo_true(spec, oracle_cache)
    fn = partial(run_replication, spec, B=B, levels=levels, seed=seed, ci_kinds=ci_kinds, j_tests=j_tests)
    reps = map_replications(fn, range(r), threads)
    cells, j_cells = summarize_coverage(reps, theta0, levels, ci_kinds, j_tests)
    est = [rep.estimate for rep in reps if np.isfinite(rep.estimate)]
    return CoverageTable(spec, theta0, r, B, seed, cells, j_cells, float(np.mean(est)) if est else math.nan)


# -- power ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PowerCurve:
    spec: object
    pseudo_true: float
    alpha: float
    r: int
    B: int
    seed: int
    grid: np.ndarray
    rejection: dict  # kind -> array over grid
    critical: dict  # kind -> size-corrected critical value
    failures: dict  # kind -> failed replications in the power phase


def decision_statistic(rep: Replication, kind: str, level: float, theta_null) -> np.ndarray | None:
    """``|T|`` for asymptotic tests, ``|T| - z*`` for bootstrap tests; ``+inf`` for a degenerate interval."""
    ci = rep.intervals.get((kind, level))
    if ci is None:
        return None
    theta_null = np.asarray(theta_null, dtype=float)
    if ci.degenerate:
        return np.full(theta_null.shape, np.inf)
    t = np.abs(rep.estimate - theta_null) / rep.se[kind]
    if kind.endswith("*"):
        return t - ci.halfwidth / rep.se[kind]
    return t


def _rejects(stat: np.ndarray, crit: float) -> np.ndarray:
    return (stat > crit) | np.isposinf(stat)


def power_study(
    spec,
    r: int,
    B: int = 999,
    alpha: float = 0.10,
    theta_grid=None,
    seed: int = 0,
    ci_kinds=CI_KINDS,
    threads: int | None = 1,
    grid_points: int = 41,
    grid_width: float = 4.0,
    oracle_cache: str | Path | None = None,
) -> PowerCurve:
    """Size-corrected rejection frequencies of the t tests over a grid of null values.

    Replications ``0..r-1`` calibrate each test's critical value at the
    pseudo-true value, and the same replications are then evaluated over
    the grid, so the null point rejects at ``alpha`` up to quantile ties.
    The default grid spans ``grid_width`` mean robust standard errors either
    side of the pseudo-true value in ``grid_points`` points.
    """
    if r < 1:
        raise ValueError("r must be at least 1")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    ci_kinds = _check_kinds(ci_kinds, CI_KINDS, "test kinds")
    theta0 = ensure_pseudo_true(spec, oracle_cache)
    level = 1.0 - alpha
    fn = partial(run_replication, spec, B=B, levels=(level,), seed=seed, ci_kinds=ci_kinds, j_tests=())
    reps = map_replications(fn, range(r), threads)

    critical = {}
    for kind in ci_kinds:
        stats = [s for s in (decision_statistic(rep, kind, level, theta0) for rep in reps) if s is not None]
        critical[kind] = size_corrected_critical(np.asarray(stats, dtype=float), alpha) if stats else math.nan

    if theta_grid is None:
        ses = [rep.se["MR"] for rep in reps if "MR" in rep.se]
        if not ses:
            ses = [s for rep in reps for s in rep.se.values()]
        scale = float(np.mean(ses)) if ses else 1.0
        grid = theta0 + grid_width * scale * np.linspace(-1.0, 1.0, grid_points)
        grid[grid_points // 2] = theta0
    else:
        grid = np.asarray(theta_grid, dtype=float).ravel()
        if not np.any(np.isclose(grid, theta0, rtol=0.0, atol=1e-12)):
            raise ContractError("power grid must contain the pseudo-true value")

    rejection, failures = {}, {}
    for kind in ci_kinds:
        hits = np.zeros(grid.size)
        m = 0
        for rep in reps:
            stat = decision_statistic(rep, kind, level, grid)
            if stat is None:
                continue
            hits += _rejects(stat, critical[kind])
            m += 1
        rejection[kind] = hits / m if m else np.full(grid.size, np.nan)
        failures[kind] = r - m
    return PowerCurve(spec, theta0, alpha, r, B, seed, grid, rejection, critical, failures)
