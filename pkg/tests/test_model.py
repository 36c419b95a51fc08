import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from mrgmm.errors import ContractError, EvaluationError
from mrgmm.model import Dataset, MomentModel, check_derivatives, eval_moment_means, hessian_term
from mrgmm.models import BUILTIN_MODELS, combining_data, exponential_regression, linear_iv, sample_mean


def test_dataset_rejects_bad_input():
    with pytest.raises(ValueError):
        Dataset(np.empty((0, 2)))
    with pytest.raises(ValueError, match="row 1"):
        Dataset([[1.0], [np.nan]])
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), ("a",))


def test_dataset_is_immutable_copy():
    raw = np.arange(6.0).reshape(3, 2)
    d = Dataset(raw)
    raw[0, 0] = 99.0
    assert d.values[0, 0] == 0.0
    with pytest.raises(ValueError):
        d.values[0, 0] = 1.0


def test_csv_round_trip(tmp_path):
    gen = np.random.default_rng(0)
    d = Dataset(gen.normal(size=(20, 3)) * 1e-7, ("a", "b", "c"))
    d.to_csv(tmp_path / "d.csv")
    back = Dataset.from_csv(tmp_path / "d.csv")
    assert back.columns == d.columns
    assert_array_equal(back.values, d.values)


def test_csv_ragged_row(tmp_path):
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n3\n")
    with pytest.raises(ValueError, match=":3"):
        Dataset.from_csv(tmp_path / "bad.csv")


def test_underidentified_model_rejected():
    with pytest.raises(ValueError):
        MomentModel("bad", 1, 2, moment=lambda X, t: X)


def test_means_sample_mean_model():
    s = eval_moment_means(sample_mean(), Dataset([1.0, 2.0, 3.0]), [2.0])
    assert_allclose(s.g_n, [0.0])
    assert_allclose(s.G_n, [[-1.0]])
    assert_allclose(s.G2_n, [[0.0]])


def test_means_example1_hand_arithmetic():
    data = Dataset([[1.0, 2.0], [0.0, 0.0], [2.0, 4.0]])
    s = eval_moment_means(combining_data(), data, [0.0])
    assert_allclose(s.g_n, [1.0, 2.0])
    assert_allclose(s.G_n, [[0.0], [-1.0]])


def test_means_at_domain_boundary():
    m = dataclasses.replace(sample_mean(), lower=np.array([0.0]), upper=np.array([1.0]))
    eval_moment_means(m, Dataset([0.5]), [1.0])
    with pytest.raises(ContractError):
        eval_moment_means(m, Dataset([0.5]), [1.5])


def test_means_permutation_invariant():
    gen = np.random.default_rng(1)
    X = gen.normal(size=(101, 4))
    m = linear_iv()
    a = eval_moment_means(m, Dataset(X), [0.3])
    b = eval_moment_means(m, Dataset(X[gen.permutation(101)]), [0.3])
    assert_allclose(a.g_n, b.g_n, rtol=1e-14, atol=1e-15)
    assert_allclose(a.G_n, b.G_n, rtol=1e-14, atol=1e-15)


def test_non_finite_moment_names_observation():
    def g(X, theta):
        with np.errstate(invalid="ignore"):
            return np.log(X) - theta[..., None, :]

    m = MomentModel("log", 1, 1, moment=g)
    with pytest.raises(EvaluationError) as info:
        eval_moment_means(m, Dataset([1.0, 2.0, -1.0, 3.0]), [0.0])
    assert info.value.index == 2


def test_derivatives_linear_exact():
    rep = check_derivatives(sample_mean(), Dataset([1.0, 2.0, 3.0]), [2.0])
    assert rep.passed
    assert rep.jacobian_error <= 1e-10
    assert rep.second_error == 0.0


def test_derivatives_linear_iv():
    gen = np.random.default_rng(2)
    rep = check_derivatives(linear_iv(), Dataset(gen.normal(size=(50, 4))), [0.4], step=1e-5)
    assert rep.jacobian_error <= 1e-8


def test_sign_flipped_jacobian_fails():
    good = exponential_regression()
    bad = dataclasses.replace(good, jacobian=lambda X, t: -good.jacobian(X, t))
    gen = np.random.default_rng(3)
    x = gen.uniform(-1, 1, 80)
    data = Dataset(np.column_stack([np.exp(0.1 + 0.5 * x), x]))
    rep = check_derivatives(bad, data, [0.1, 0.4])
    assert not rep.jacobian_ok
    assert rep.jacobian_error == pytest.approx(2.0, rel=1e-4)


def test_check_derivatives_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        check_derivatives(sample_mean(), Dataset([1.0]), [0.0], step=0.0)


@pytest.mark.parametrize("name", sorted(BUILTIN_MODELS))
def test_builtin_derivatives_random_points(name):
    gen = np.random.default_rng(4)
    factory = BUILTIN_MODELS[name]
    m = factory()
    for _ in range(5):
        n, d = 40, len(m.columns)
        X = gen.normal(size=(n, d))
        if name == "exponential":
            X[:, 1] = gen.uniform(-1, 1, n)
        theta = gen.uniform(-0.5, 0.5, m.n_params)
        assert check_derivatives(m, Dataset(X), theta, step=1e-5, tol=1e-6).passed


def test_finite_difference_fallback():
    ref = exponential_regression()
    bare = dataclasses.replace(ref, jacobian=None, second_derivative=None)
    gen = np.random.default_rng(5)
    X = np.column_stack([gen.normal(size=30), gen.uniform(-1, 1, 30)])
    theta = np.array([0.2, -0.3])
    assert_allclose(bare.G(X, theta), ref.G(X, theta), rtol=1e-6, atol=1e-8)
    assert_allclose(bare.G2(X, theta), ref.G2(X, theta), rtol=1e-3, atol=1e-5)


def test_g2_column_major_layout():
    # g = (t0 * t1, t0**2): vec(G) rows are (dg0/dt0, dg1/dt0, dg0/dt1, dg1/dt1)
    def g(X, t):
        return np.stack([t[..., 0] * t[..., 1], t[..., 0] ** 2], -1)[..., None, :] + 0 * X

    m = MomentModel("toy", 2, 2, moment=g)
    G2 = m.G2(np.zeros((1, 1)), np.array([1.0, 2.0]))[0]
    want = np.array([[0.0, 1.0], [2.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    assert_allclose(G2, want, atol=1e-6)
    # sum_a v_a Hess(g_a)
    assert_allclose(hessian_term(G2, np.array([1.0, 1.0])), [[2.0, 1.0], [1.0, 0.0]], atol=1e-6)
