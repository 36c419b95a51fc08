"""Confidence intervals, t statistics and overidentification tests.

Five interval constructions share the form ``theta_hat_k +- z * se_k``:

========  ===========================  ==================================
kind      variance                     critical value ``z``
========  ===========================  ==================================
``C``     conventional                 normal ``z_{alpha/2}``
``MR``    misspecification-robust      normal ``z_{alpha/2}``
``HH*``   conventional                 Hall-Horowitz bootstrap quantile
``BN*``   conventional                 Brown-Newey bootstrap quantile
``MR*``   misspecification-robust      MR bootstrap quantile
========  ===========================  ==================================
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .bootstrap import (
    FAILURE_BUDGET,
    ResamplePlan,
    TStatDistribution,
    bootstrap_draws,
    bootstrap_quantile,
    quantile_index,
)
from .errors import BootstrapDegenerateError, ContractError, VarianceInvalidError
from .estimate import GmmFit
from .model import Dataset, MomentModel
from .variance import CONVENTIONAL, ROBUST, VarianceEstimate

CI_KINDS = ("C", "MR", "HH*", "BN*", "MR*")
_SCHEME_VARIANCE = {"MR": ROBUST, "HH": CONVENTIONAL, "BN": CONVENTIONAL}


@dataclass(frozen=True)
class ConfidenceInterval:
    center: float
    halfwidth: float
    lo: float
    hi: float
    kind: str
    level: float
    degenerate: bool = False

    def covers(self, value: float) -> bool:
        """Closed-interval coverage; a degenerate interval never covers."""
        return (not self.degenerate) and self.lo <= value <= self.hi


@dataclass(frozen=True)
class JTestResult:
    statistic: float
    df: int
    critical: float
    reject: bool
    kind: str


def normal_quantile(p: float) -> float:
    """Standard normal quantile."""
    return float(special.ndtri(p))


def _se(sigma: VarianceEstimate, k: int, n: int) -> float:
    v = float(sigma.sigma[k, k])
    if not np.isfinite(v) or v <= 0:
        raise VarianceInvalidError(f"variance of coordinate {k} is not positive ({v})")
    return float(np.sqrt(v / n))


def _check_alpha(alpha: float) -> None:
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")


def t_statistic(fit: GmmFit, sigma: VarianceEstimate, k: int, theta_null: float, n: int | None = None) -> float:
    """``(theta_hat_k - theta_null) / sqrt(Sigma_kk / n)``."""
    n = sigma.n if n is None else n
    return float((fit.theta[k] - theta_null) / _se(sigma, k, n))


def _interval(center: float, half: float, kind: str, alpha: float, degenerate: bool = False) -> ConfidenceInterval:
    return ConfidenceInterval(center, half, center - half, center + half, kind, 1.0 - alpha, degenerate)


def ci_asymptotic(fit: GmmFit, sigma: VarianceEstimate, k: int, alpha: float) -> ConfidenceInterval:
    """Normal-theory interval; kind ``C`` or ``MR`` follows the variance estimator."""
    _check_alpha(alpha)
    se = _se(sigma, k, sigma.n)
    kind = "MR" if sigma.kind == ROBUST else "C"
    return _interval(float(fit.theta[k]), normal_quantile(1.0 - alpha / 2.0) * se, kind, alpha)


def ci_bootstrap(fit: GmmFit, sigma: VarianceEstimate, dist: TStatDistribution, k: int, alpha: float) -> ConfidenceInterval:
    """Symmetric percentile-t interval from a bootstrap |t| distribution.

    A degenerate distribution (Brown-Newey weights that do not exist) gives a
    zero-length interval flagged ``degenerate``.
    """
    _check_alpha(alpha)
    expected = _SCHEME_VARIANCE.get(dist.scheme)
    if expected != sigma.kind:
        raise ContractError(f"{dist.scheme} bootstrap must be paired with the {expected} variance, got {sigma.kind}")
    kind = dist.scheme + "*"
    center = float(fit.theta[k])
    if dist.degenerate:
        return _interval(center, 0.0, kind, alpha, degenerate=True)
    z = bootstrap_quantile(dist, alpha)
    return _interval(center, z * _se(sigma, k, sigma.n), kind, alpha)


def _j_df(model: MomentModel) -> int:
    return model.n_moments - model.n_params


def _check_step2(fit: GmmFit) -> None:
    if fit.step != 2:
        raise ContractError("the J test needs a two-step fit")


def chi2_quantile(p: float, df: int) -> float:
    return float(stats.chi2.ppf(p, df))


def j_test(model: MomentModel, data: Dataset, fit2: GmmFit, level: float = 0.05) -> JTestResult:
    """Asymptotic overidentification test ``n J_n`` against ``chi2(Lg - Lt)``."""
    _check_step2(fit2)
    _check_alpha(level)
    df = _j_df(model)
    if df == 0:
        return JTestResult(0.0, 0, 0.0, False, "asymptotic")
    stat = max(data.n * fit2.criterion_value, 0.0)
    crit = chi2_quantile(1.0 - level, df)
    return JTestResult(stat, df, crit, bool(stat > crit), "asymptotic")


def empirical_quantile(values, level: float) -> float:
    """Order statistic ``v`` minimizing ``|#{V <= v}/m - level|`` (smallest on ties)."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ValueError("empirical quantile of an empty sample")
    return float(v[quantile_index(v, level)])


def j_bootstrap_critical(jstar: np.ndarray, level: float) -> float:
    """Critical value from Hall-Horowitz bootstrap J statistics (NaN marks a failed draw)."""
    good = np.isfinite(jstar)
    failures = int(np.sum(~good))
    if failures > FAILURE_BUDGET * jstar.size:
        raise BootstrapDegenerateError(
            f"J bootstrap: {failures} of {jstar.size} draws failed", failures=failures, draws=jstar.size
        )
    return empirical_quantile(jstar[good], 1.0 - level)


def j_test_bootstrap(
    model: MomentModel, data: Dataset, fit2: GmmFit, plan: ResamplePlan, level: float = 0.05
) -> JTestResult:
    """Overidentification test with a Hall-Horowitz (recentered) bootstrap critical value."""
    _check_step2(fit2)
    _check_alpha(level)
    df = _j_df(model)
    if df == 0:
        return JTestResult(0.0, 0, 0.0, False, "hh-bootstrap")
    _, jstar = bootstrap_draws(model, data, fit2, plan, 0, "HH", want_j=True)
    stat = max(data.n * fit2.criterion_value, 0.0)
    crit = j_bootstrap_critical(jstar, level)
    return JTestResult(stat, df, crit, bool(stat > crit), "hh-bootstrap")


def size_corrected_critical(null_draws, alpha: float) -> float:
    """Empirical ``1 - alpha`` quantile of a decision statistic simulated under the null.

    For asymptotic tests the statistic is ``|T|``; for bootstrap tests it is
    ``|T| - z*`` so that the correction applies to the data-dependent
    bootstrap critical value as well.
    """
    _check_alpha(alpha)
    draws = np.asarray(null_draws, dtype=float).ravel()
    if draws.size == 0:
        raise ValueError("size correction needs at least one null draw")
    return empirical_quantile(draws, 1.0 - alpha)
