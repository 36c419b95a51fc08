"""GMM estimation, misspecification-robust inference and bootstrap intervals.

The package covers one- and two-step GMM for user moment functions, the
conventional and Hall-Inoue covariance estimators, the Hall-Horowitz,
Brown-Newey and misspecification-robust (MR) bootstrap percentile-t
intervals, J tests, and a Monte Carlo harness for the combining-data and
invalid-instrument examples.
"""

__version__ = "0.1.0"

from .bootstrap import (
    ResamplePlan,
    TStatDistribution,
    bn_bootstrap_t,
    bootstrap_quantile,
    el_probabilities,
    hh_bootstrap_t,
    mr_bootstrap_t,
)
from .errors import GmmError
from .estimate import FitOptions, GmmFit, WeightRecipe, criterion, one_step, two_step
from .inference import (
    ConfidenceInterval,
    JTestResult,
    ci_asymptotic,
    ci_bootstrap,
    j_test,
    j_test_bootstrap,
    size_corrected_critical,
    t_statistic,
)
from .model import Dataset, MomentModel, check_derivatives
from .models import combining_data, get_model, linear_iv, sample_mean
from .variance import sigma_conventional, sigma_mr

__all__ = [
    "ConfidenceInterval",
    "Dataset",
    "FitOptions",
    "GmmError",
    "GmmFit",
    "JTestResult",
    "MomentModel",
    "ResamplePlan",
    "TStatDistribution",
    "WeightRecipe",
    "bn_bootstrap_t",
    "bootstrap_quantile",
    "check_derivatives",
    "ci_asymptotic",
    "ci_bootstrap",
    "combining_data",
    "criterion",
    "el_probabilities",
    "get_model",
    "hh_bootstrap_t",
    "j_test",
    "j_test_bootstrap",
    "linear_iv",
    "mr_bootstrap_t",
    "one_step",
    "sample_mean",
    "sigma_conventional",
    "sigma_mr",
    "size_corrected_critical",
    "t_statistic",
    "two_step",
]
