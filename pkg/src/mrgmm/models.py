"""Built-in moment models with analytic derivatives."""

from __future__ import annotations

import numpy as np

from .model import MomentModel


def _batch_shape(X: np.ndarray, theta: np.ndarray) -> tuple[int, ...]:
    return np.broadcast_shapes(X.shape[:-2], theta.shape[:-1])


def sample_mean(d: int = 1) -> MomentModel:
    """Just-identified mean model ``g(x, theta) = x - theta``."""

    def g(X, theta):
        return X - theta[..., None, :]

    def G(X, theta):
        shape = _batch_shape(X, theta) + (X.shape[-2], d, d)
        return np.broadcast_to(-np.eye(d), shape)

    return MomentModel(
        name="sample_mean",
        n_moments=d,
        n_params=d,
        moment=g,
        jacobian=G,
        affine=True,
        columns=tuple(f"x{j}" for j in range(d)) if d > 1 else ("x",),
    )


def combining_data() -> MomentModel:
    """Mean of ``z`` with the side information ``E y = 0``: ``g = (y, z - theta)'``.

    Data columns are ``(y, z)``.
    """

    def g(X, theta):
        y = X[..., 0]
        z = X[..., 1] - theta[..., None, 0]
        y, z = np.broadcast_arrays(y, z)
        return np.stack([y, z], axis=-1)

    def G(X, theta):
        shape = _batch_shape(X, theta) + (X.shape[-2], 2, 1)
        return np.broadcast_to(np.array([[0.0], [-1.0]]), shape)

    return MomentModel(
        name="example1",
        n_moments=2,
        n_params=1,
        moment=g,
        jacobian=G,
        affine=True,
        columns=("y", "z"),
    )


def linear_iv(n_regressors: int = 1, n_instruments: int = 2) -> MomentModel:
    """Linear IV moments ``g = z (y - x' beta)``.

    Data columns are ``(y, x_1..x_p, z_1..z_q)``.  The instrument vector is
    exposed as ``weight_features`` so that ``(n^-1 sum z z')^-1`` weighting
    (two-stage least squares) can be built from it.
    """
    p, q = n_regressors, n_instruments
    if q < p:
        raise ValueError("need at least as many instruments as regressors")

    def g(X, theta):
        x = X[..., 1 : 1 + p]
        z = X[..., 1 + p : 1 + p + q]
        resid = X[..., 0] - np.einsum("...nk,...k->...n", x, theta)
        return z * resid[..., None]

    def G(X, theta):
        x = X[..., 1 : 1 + p]
        z = X[..., 1 + p : 1 + p + q]
        out = -z[..., :, None] * x[..., None, :]
        shape = _batch_shape(X, theta) + out.shape[-3:]
        return np.broadcast_to(out, shape)

    def features(X):
        return X[..., 1 + p : 1 + p + q]

    cols = ("y",) + tuple(f"x{k + 1}" if p > 1 else "x" for k in range(p)) + tuple(f"z{k + 1}" for k in range(q))
    return MomentModel(
        name="example2" if (p, q) == (1, 2) else f"linear_iv_{p}x{q}",
        n_moments=q,
        n_params=p,
        moment=g,
        jacobian=G,
        affine=True,
        columns=cols,
        weight_features=features,
    )


def exponential_regression() -> MomentModel:
    """Overidentified nonlinear model ``g = (1, x, x^2)' (y - exp(a + b x))``.

    Data columns are ``(y, x)``; parameters ``(a, b)``.  Used to exercise the
    second-derivative terms that vanish for the linear examples.
    """

    def parts(X, theta):
        y = X[..., 0]
        x = X[..., 1]
        mu = np.exp(theta[..., None, 0] + theta[..., None, 1] * x)
        z = np.stack(np.broadcast_arrays(np.ones_like(x), x, x * x), axis=-1)
        w = np.stack(np.broadcast_arrays(np.ones_like(x), x), axis=-1)
        return y, mu, z, w

    def g(X, theta):
        y, mu, z, _ = parts(X, theta)
        return z * (y - mu)[..., None]

    def G(X, theta):
        _, mu, z, w = parts(X, theta)
        return -mu[..., None, None] * z[..., :, None] * w[..., None, :]

    def G2(X, theta):
        _, mu, z, w = parts(X, theta)
        # d G[a, c] / d theta_m = -mu z_a w_c w_m at row c*3 + a
        full = -mu[..., None, None, None] * w[..., :, None, None] * z[..., None, :, None] * w[..., None, None, :]
        return full.reshape(full.shape[:-3] + (6, 2))

    return MomentModel(
        name="exponential",
        n_moments=3,
        n_params=2,
        moment=g,
        jacobian=G,
        second_derivative=G2,
        lower=[-50.0, -50.0],
        upper=[50.0, 50.0],
        columns=("y", "x"),
    )


BUILTIN_MODELS = {
    "example1": combining_data,
    "example2": linear_iv,
    "sample_mean": sample_mean,
    "exponential": exponential_regression,
}


def get_model(name: str) -> MomentModel:
    try:
        return BUILTIN_MODELS[name]()
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(BUILTIN_MODELS)}") from None
