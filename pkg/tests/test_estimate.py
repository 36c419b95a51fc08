import numpy as np
import pytest
from numpy.testing import assert_allclose

from mrgmm.errors import ContractError, NonConvergenceError, SingularWeightError
from mrgmm.estimate import (
    FitOptions,
    WeightRecipe,
    centered_weight,
    criterion,
    minimize_criterion,
    one_step,
    two_step,
)
from mrgmm.experiments import Example1Spec, simulate_example1
from mrgmm.model import Dataset, MomentModel
from mrgmm.models import combining_data, exponential_regression, linear_iv, sample_mean

from oracles import example1_two_step, tsls


def _fixed_gn_model(gn):
    gn = np.asarray(gn, float)
    return MomentModel("const", gn.size, 1, moment=lambda X, t: np.broadcast_to(gn, X.shape[:-1] + gn.shape))


def test_criterion_examples():
    data = Dataset([0.0])
    assert criterion(_fixed_gn_model([1, 2]), data, [0.0], np.eye(2)) == pytest.approx(5.0)
    assert criterion(_fixed_gn_model([1, 1]), data, [0.0], np.diag([2.0, 1.0])) == pytest.approx(3.0)
    assert criterion(sample_mean(), Dataset([1.0, 3.0]), [2.0], np.eye(1)) == 0.0


def test_criterion_rejects_asymmetric_weight():
    with pytest.raises(ValueError, match="symmetric"):
        criterion(_fixed_gn_model([1, 2]), Dataset([0.0]), [0.0], [[1.0, 0.1], [0.0, 1.0]])


def test_centered_weight_scalar():
    assert_allclose(centered_weight(sample_mean(), Dataset([0.0, 2.0]), [0.0]), [[1.0]])


def test_centered_weight_singular():
    with pytest.raises(SingularWeightError):
        centered_weight(sample_mean(), Dataset([1.0, 1.0, 1.0]), [0.0])
    collinear = Dataset([[1.0, 2.0], [0.0, 0.0], [2.0, 4.0]])
    with pytest.raises(SingularWeightError) as info:
        centered_weight(combining_data(), collinear, [0.0])
    assert info.value.condition > 1e12


def test_sample_mean_fit():
    fit = minimize_criterion(sample_mean(), Dataset([1.0, 2.0, 3.0]), np.eye(1))
    assert_allclose(fit.theta, [2.0])
    assert fit.criterion_value == pytest.approx(0.0, abs=1e-24)


def test_example1_one_step_is_zbar():
    data = simulate_example1(Example1Spec(n=50, delta=0.4), 3)
    fit = one_step(combining_data(), data)
    assert fit.step == 1
    assert_allclose(fit.theta, [data.values[:, 1].mean()], rtol=0, atol=1e-10)


def test_example1_two_step_closed_form_jittered_triple():
    base = np.array([[1.0, 2.0], [0.0, 0.0], [2.0, 4.0]])
    jitter = np.array([[0.0, 0.01], [0.02, 0.0], [0.0, -0.03]])
    X = base + jitter
    fit = two_step(combining_data(), Dataset(X))
    assert fit.step == 2 and fit.first_step is not None
    assert_allclose(fit.theta[0], example1_two_step(X[:, 0], X[:, 1]), atol=1e-8)


def test_example1_two_step_zero_ybar():
    gen = np.random.default_rng(0)
    X = gen.normal(size=(40, 2))
    X[:, 0] -= X[:, 0].mean()
    fit = two_step(combining_data(), Dataset(X))
    assert_allclose(fit.theta[0], X[:, 1].mean(), atol=1e-10)


def test_example1_closed_form_many_datasets():
    gen = np.random.default_rng(1)
    m = combining_data()
    for _ in range(200):
        X = gen.normal(size=(50, 2)) @ np.array([[1.0, 0.6], [0.0, 1.3]]) + [0.3, -0.2]
        fit = two_step(m, Dataset(X))
        assert abs(fit.theta[0] - example1_two_step(X[:, 0], X[:, 1])) <= 1e-8


def test_two_sls_closed_form():
    gen = np.random.default_rng(2)
    m = linear_iv()
    for _ in range(100):
        Z = gen.normal(size=(60, 2))
        u = gen.normal(size=60)
        x = Z @ [0.5, -0.3] + u
        y = 0.7 * x + 0.5 * u + gen.normal(size=60)
        fit = one_step(m, Dataset(np.column_stack([y, x, Z])), WeightRecipe.outer(m.weight_features))
        assert abs(fit.theta[0] - tsls(y, x, Z)[0]) <= 1e-8


def test_dgp35_two_step_pseudo_true():
    spec = Example1Spec(n=100_000, rho=0.5, delta=0.6, lognormal=False)
    fit = two_step(combining_data(), simulate_example1(spec, 12))
    assert abs(fit.theta[0] - (-0.30)) <= 0.02


def test_just_identified_criterion_zero():
    fit = two_step(sample_mean(), Dataset([0.5, 1.5, 4.0]))
    assert fit.criterion_value <= 1e-20


def test_fit_invariants_nonlinear():
    gen = np.random.default_rng(3)
    x = gen.uniform(-1, 1, 300)
    y = np.exp(0.2 + 0.5 * x) + 0.3 * gen.normal(size=300) + 0.1 * x**2
    m = exponential_regression()
    data = Dataset(np.column_stack([y, x]))
    fit = two_step(m, data)
    assert fit.converged and fit.gradient_norm <= 1e-8
    assert fit.criterion_value == criterion(m, data, fit.theta, fit.weight)
    # minimizer property against the first-step estimate
    assert fit.criterion_value <= criterion(m, data, fit.first_step.theta, fit.weight) + 1e-15


def test_one_step_rejects_centered_recipe():
    fit = one_step(sample_mean(), Dataset([1.0, 2.0]))
    with pytest.raises(ContractError):
        one_step(sample_mean(), Dataset([1.0, 2.0]), WeightRecipe.centered(fit))


def test_starts_outside_domain():
    with pytest.raises(ContractError):
        minimize_criterion(sample_mean(), Dataset([1.0]), np.eye(1), FitOptions(starts=[[2e6]]))


def test_non_convergence_reports_best():
    with pytest.raises(NonConvergenceError) as info:
        minimize_criterion(exponential_regression(), Dataset([[1.0, 0.5], [2.0, -0.3], [0.5, 0.1]]),
                           np.eye(3), FitOptions(max_iter=1, starts=[[5.0, 5.0]]))
    assert info.value.best is not None
