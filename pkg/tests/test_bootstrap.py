import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy import optimize, stats

from mrgmm.bootstrap import (
    ResamplePlan,
    TStatDistribution,
    bn_bootstrap_t,
    bootstrap_draws,
    bootstrap_quantile,
    el_probabilities,
    el_weights_from_moments,
    hh_bootstrap_t,
    mr_bootstrap_t,
    resample_indices,
    tstat_distribution,
)
from mrgmm.errors import BootstrapDegenerateError, QuantileUnavailableError
from mrgmm.estimate import two_step
from mrgmm.experiments import Example1Spec, simulate_example1
from mrgmm.model import Dataset
from mrgmm.models import combining_data, sample_mean
from mrgmm.selftest import brute_force_quantile


def _dist(values):
    return TStatDistribution(np.sort(np.asarray(values, float)), 0, "MR")


def test_resample_singleton():
    assert_array_equal(resample_indices(1, ResamplePlan(3), 2), [0])


def test_resample_deterministic_and_uniform():
    plan = ResamplePlan(1, seed=42)
    a = resample_indices(10_000, plan, 0)
    assert_array_equal(a, resample_indices(10_000, plan, 0))
    assert a.min() >= 0 and a.max() < 10_000
    counts = np.bincount(a, minlength=10_000).reshape(100, 100).sum(axis=1)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_resample_draw_out_of_range():
    with pytest.raises(ValueError):
        resample_indices(5, ResamplePlan(2), 2)


def test_plan_needs_a_draw():
    with pytest.raises(ValueError):
        ResamplePlan(0)


def test_el_symmetric_two_point():
    w = el_weights_from_moments(np.array([-1.0, 1.0]))
    assert w.converged
    assert_allclose(w.lam, [0.0], atol=1e-14)
    assert_allclose(w.p, [0.5, 0.5])


def test_el_hull_violation():
    assert not el_weights_from_moments(np.array([1.0, 2.0, 3.0])).converged


def test_el_three_point_root():
    g = np.array([-1.0, 0.0, 3.0])
    lam = optimize.brentq(lambda t: np.sum(g / (1 + t * g)), -1 / 3 + 1e-9, 1 - 1e-9)
    w = el_weights_from_moments(g)
    assert w.converged
    assert_allclose(w.lam, [lam], rtol=1e-8)
    assert abs(w.p @ g) <= 1e-8
    assert np.all(w.p > 0)


def test_el_feasibility_on_example1():
    m = combining_data()
    for rep in range(20):
        data = simulate_example1(Example1Spec(n=200, delta=-0.6), 9, rep)
        fit = two_step(m, data)
        w = el_probabilities(m, data, fit.theta)
        if w.converged:
            assert np.max(np.abs(w.p @ m.g(data.values, fit.theta))) <= 1e-8
            assert w.p.min() > 0 and w.p.sum() == pytest.approx(1.0)


def test_quantile_examples():
    assert bootstrap_quantile(_dist(range(1, 11)), 0.1) == 9
    assert bootstrap_quantile(_dist([1, 2, 3]), 0.05) == 3
    assert bootstrap_quantile(_dist([0.7]), 0.3) == 0.7


def test_quantile_degenerate():
    with pytest.raises(QuantileUnavailableError):
        bootstrap_quantile(TStatDistribution(np.empty(0), 5, "BN", degenerate=True), 0.1)


@settings(max_examples=1000, deadline=None)
@given(
    st.lists(st.integers(0, 12), min_size=1, max_size=50),
    st.floats(0.01, 0.99),
)
def test_quantile_matches_brute_force(values, alpha):
    vals = np.sort(np.asarray(values, float) / 4)
    assert bootstrap_quantile(_dist(vals), alpha) == brute_force_quantile(vals, 1 - alpha)


def test_failure_budget():
    t = np.arange(10.0)
    t[:2] = np.nan
    d = tstat_distribution(t, "HH", 0)
    assert d.failures == 2 and d.abs_t.size == 8 and d.B == 10
    t[2] = np.nan
    with pytest.raises(BootstrapDegenerateError):
        tstat_distribution(t, "HH", 0)


@pytest.fixture(scope="module")
def normal_mean():
    gen = np.random.default_rng(11)
    m = sample_mean()
    data = Dataset(gen.normal(size=500))
    return m, data, two_step(m, data)


@pytest.mark.parametrize("scheme", ["MR", "HH", "BN"])
def test_pivotal_sample_mean(normal_mean, scheme):
    m, data, fit = normal_mean
    plan = ResamplePlan(2000, seed=4)
    if scheme == "MR":
        d = mr_bootstrap_t(m, data, fit, plan)
    elif scheme == "HH":
        d = hh_bootstrap_t(m, data, fit, plan)
    else:
        d = bn_bootstrap_t(m, data, fit, el_probabilities(m, data, fit.theta), plan)
    assert d.abs_t.size == 2000 and np.all(np.diff(d.abs_t) >= 0)
    assert stats.kstest(d.abs_t, stats.halfnorm.cdf).statistic <= 0.05


def test_hh_equals_naive_when_just_identified(normal_mean):
    m, data, fit = normal_mean
    plan = ResamplePlan(50, seed=1)
    assert_allclose(hh_bootstrap_t(m, data, fit, plan).abs_t, mr_bootstrap_t(m, data, fit, plan).abs_t, rtol=1e-8)


def test_single_draw(normal_mean):
    m, data, fit = normal_mean
    assert mr_bootstrap_t(m, data, fit, ResamplePlan(1)).abs_t.size == 1


def test_bn_degenerate_flag():
    m = combining_data()
    data = simulate_example1(Example1Spec(n=50), 0)
    fit = two_step(m, data)
    bad = el_weights_from_moments(np.array([1.0, 2.0]))
    d = bn_bootstrap_t(m, data, fit, bad, ResamplePlan(10))
    assert d.degenerate and d.abs_t.size == 0


def test_bn_uniform_weights_match_uniform_resampling(normal_mean):
    m, data, fit = normal_mean
    p = np.full(data.n, 1.0 / data.n)
    a, _ = bootstrap_draws(m, data, fit, ResamplePlan(20, 3), 0, "BN", probs=p, stream=1)
    b, _ = bootstrap_draws(m, data, fit, ResamplePlan(20, 3), 0, "MR", stream=1)
    assert_allclose(np.abs(a), np.abs(b), rtol=1e-8)


def test_recentered_moment_mean_zero():
    m = combining_data()
    data = simulate_example1(Example1Spec(n=80, delta=0.5), 2)
    fit = two_step(m, data)
    gn = m.g(data.values, fit.theta).mean(axis=0)
    assert_allclose(m.recentered(gn).g(data.values, fit.theta).mean(axis=0), 0.0, atol=1e-14)


def test_bootstrap_deterministic_across_chunking():
    m = combining_data()
    data = simulate_example1(Example1Spec(n=60, delta=-0.6), 5)
    fit = two_step(m, data)
    a = mr_bootstrap_t(m, data, fit, ResamplePlan(300, 8, 2))
    b = mr_bootstrap_t(m, data, fit, ResamplePlan(300, 8, 2))
    assert_array_equal(a.abs_t, b.abs_t)
    # the first 100 draws of a 300-draw plan equal a 100-draw plan
    t300, _ = bootstrap_draws(m, data, fit, ResamplePlan(300, 8, 2), 0, "MR")
    t100, _ = bootstrap_draws(m, data, fit, ResamplePlan(100, 8, 2), 0, "MR")
    assert_array_equal(t300[:100], t100)
