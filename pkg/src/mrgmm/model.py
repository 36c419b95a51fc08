"""Moment models, datasets, and sample moment means.

A moment model supplies per-observation moment functions ``g``, their
Jacobian ``G = dg/dtheta'`` and the second-derivative array ``G2``.  All
evaluators are vectorized: ``X`` has shape ``(..., n, d)`` and ``theta`` has
shape ``(..., p)`` with matching (or broadcastable) leading batch axes.  The
outputs are

* ``g``:  ``(..., n, Lg)``
* ``G``:  ``(..., n, Lg, Lt)``
* ``G2``: ``(..., n, Lg*Lt, Lt)``

``G2`` stacks ``d vec(G) / d theta'`` where ``vec`` is the column-major
vectorization, so row ``c*Lg + a`` holds the gradient of ``G[a, c]``.  For a
model with two moments and two parameters::

    vec(G) = (G[0,0], G[1,0], G[0,1], G[1,1])'
    G2[0] = d G[0,0] / d theta',  G2[1] = d G[1,0] / d theta',
    G2[2] = d G[0,1] / d theta',  G2[3] = d G[1,1] / d theta'

Models that only provide ``g`` get ``G`` and ``G2`` by central differences.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ContractError, EvaluationError

DEFAULT_BOUND = 1.0e6

Evaluator = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class Dataset:
    """An iid sample stored as an ``n x d`` float matrix (rows are observations)."""

    values: np.ndarray
    columns: tuple[str, ...] = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise ValueError(f"dataset must be a 2-d matrix, got shape {values.shape}")
        if values.shape[0] < 1:
            raise ValueError("dataset must contain at least one observation")
        if not np.all(np.isfinite(values)):
            bad = int(np.argwhere(~np.isfinite(values))[0, 0])
            raise ValueError(f"dataset has non-finite entries (first at row {bad})")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        cols = tuple(self.columns) or tuple(f"x{j}" for j in range(values.shape[1]))
        if len(cols) != values.shape[1]:
            raise ValueError(f"{len(cols)} column names for {values.shape[1]} columns")
        object.__setattr__(self, "columns", cols)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def take(self, indices) -> "Dataset":
        return Dataset(self.values[np.asarray(indices)], self.columns)

    @classmethod
    def from_csv(cls, path: str | Path) -> "Dataset":
        """Read a CSV with a header row and one observation per line."""
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ValueError(f"{path}: empty file") from None
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row or all(not cell.strip() for cell in row):
                    continue
                if len(row) != len(header):
                    raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
                try:
                    rows.append([float(cell) for cell in row])
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from None
        if not rows:
            raise ValueError(f"{path}: no observations")
        return cls(np.array(rows), tuple(h.strip() for h in header))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.columns)
            for row in self.values:
                writer.writerow([repr(float(v)) for v in row])


@dataclass(frozen=True, eq=False)
class MomentModel:
    """Moment function with its derivatives and a box parameter domain.

    ``affine=True`` declares ``g`` affine in ``theta`` (so ``G2`` is zero);
    estimation then skips second-derivative evaluation.  ``shift`` is a fixed
    vector subtracted from every moment (used by recentered bootstraps).
    """

    name: str
    n_moments: int
    n_params: int
    moment: Evaluator
    jacobian: Evaluator | None = None
    second_derivative: Evaluator | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    affine: bool = False
    columns: tuple[str, ...] | None = None
    weight_features: Callable[[np.ndarray], np.ndarray] | None = None
    shift: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.n_params < 1:
            raise ValueError("model needs at least one parameter")
        if self.n_moments < self.n_params:
            raise ValueError(
                f"underidentified model: {self.n_moments} moments < {self.n_params} parameters"
            )
        lo = np.full(self.n_params, -DEFAULT_BOUND) if self.lower is None else np.asarray(self.lower, float)
        hi = np.full(self.n_params, DEFAULT_BOUND) if self.upper is None else np.asarray(self.upper, float)
        lo = np.broadcast_to(lo, (self.n_params,)).copy()
        hi = np.broadcast_to(hi, (self.n_params,)).copy()
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    # -- evaluation -------------------------------------------------------
    def g(self, X: np.ndarray, theta: np.ndarray) -> np.ndarray:
        out = self.moment(X, np.asarray(theta, dtype=float))
        if self.shift is not None:
            out = out - self.shift
        return out

    def G(self, X: np.ndarray, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.jacobian is not None:
            return self.jacobian(X, theta)
        return _fd_jacobian(lambda t: self.moment(X, t), theta, rel_step=1e-6)

    def G2(self, X: np.ndarray, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.second_derivative is not None:
            return self.second_derivative(X, theta)
        if self.jacobian is not None:
            # d vec(G)/d theta' from the analytic Jacobian
            def vec_g(t):
                Gt = self.jacobian(X, t)
                return np.swapaxes(Gt, -1, -2).reshape(Gt.shape[:-2] + (-1,))

            return _fd_jacobian(vec_g, theta, rel_step=1e-6)
        return _fd_second(lambda t: self.moment(X, t), theta, self.n_moments, rel_step=1e-4)

    def recentered(self, center: np.ndarray) -> "MomentModel":
        """Model whose moments are ``g - center`` (``center`` a fixed vector)."""
        center = np.asarray(center, dtype=float)
        total = center if self.shift is None else self.shift + center
        return dataclasses.replace(self, shift=total)

    def in_domain(self, theta: np.ndarray) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))


def _fd_jacobian(fun, theta: np.ndarray, rel_step: float) -> np.ndarray:
    """Central-difference Jacobian of ``fun`` (output ``(..., n, m)``) wrt the last axis of theta."""
    p = theta.shape[-1]
    cols = []
    for k in range(p):
        h = rel_step * np.maximum(1.0, np.abs(theta[..., k]))
        e = np.zeros(p)
        e[k] = 1.0
        tp = theta + h[..., None] * e
        tm = theta - h[..., None] * e
        diff = fun(tp) - fun(tm)
        cols.append(diff / (2.0 * np.asarray(h)[..., None, None]))
    return np.stack(cols, axis=-1)


def _fd_second(fun, theta: np.ndarray, n_moments: int, rel_step: float) -> np.ndarray:
    """Second differences of ``g`` laid out as ``d vec(G) / d theta'``."""
    p = theta.shape[-1]
    h = rel_step * np.maximum(1.0, np.abs(theta))
    eye = np.eye(p)

    def at(*steps):
        t = theta.copy()
        for sign, k in steps:
            t = t + sign * h[..., k, None] * eye[k]
        return fun(t)

    hess = [[None] * p for _ in range(p)]
    for c in range(p):
        for m in range(c, p):
            hc = np.asarray(h[..., c])[..., None, None]
            hm = np.asarray(h[..., m])[..., None, None]
            val = (at((1, c), (1, m)) - at((1, c), (-1, m)) - at((-1, c), (1, m)) + at((-1, c), (-1, m))) / (
                4.0 * hc * hm
            )
            hess[c][m] = hess[m][c] = val
    # rows c*Lg + a, columns m
    blocks = [np.stack([hess[c][m] for m in range(p)], axis=-1) for c in range(p)]
    return np.concatenate(blocks, axis=-2)


def hessian_term(G2: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``sum_a v_a d^2 g_a / d theta d theta'`` from a column-major ``G2``.

    ``G2`` is ``(..., Lg*Lt, Lt)`` and ``v`` is ``(..., Lg)``; returns ``(..., Lt, Lt)``.
    """
    lt = G2.shape[-1]
    lg = G2.shape[-2] // lt
    blocks = G2.reshape(G2.shape[:-2] + (lt, lg, lt))
    return np.einsum("...cam,...a->...cm", blocks, v)


@dataclass(frozen=True, eq=False)
class MomentStats:
    """Sample means of ``g``, ``G`` and ``G2`` at ``theta``."""

    g_n: np.ndarray
    G_n: np.ndarray
    G2_n: np.ndarray
    theta: np.ndarray


def _check_finite(name: str, arr: np.ndarray, model: MomentModel) -> None:
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        idx = int(bad[arr.ndim - 3]) if arr.ndim >= 3 else int(bad[0])
        raise EvaluationError(f"{model.name}: non-finite {name} at observation {idx}", index=idx)


def evaluate(model: MomentModel, X: np.ndarray, theta: np.ndarray, order: int = 1):
    """Per-observation ``g`` (and ``G``, ``G2`` up to ``order``), with finiteness checks."""
    g = model.g(X, theta)
    _check_finite("moment", g, model)
    if order == 0:
        return g, None, None
    G = model.G(X, theta)
    _check_finite("jacobian", G, model)
    if order == 1:
        return g, G, None
    if model.affine:
        G2 = np.zeros(G.shape[:-2] + (model.n_moments * model.n_params, model.n_params))
    else:
        G2 = model.G2(X, theta)
        _check_finite("second derivative", G2, model)
    return g, G, G2


def _validate(model: MomentModel, data: Dataset, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.size != model.n_params:
        raise ContractError(f"theta has {theta.size} entries, model {model.name} has {model.n_params} parameters")
    if model.columns is not None and len(model.columns) != data.d:
        raise ContractError(f"model {model.name} expects {len(model.columns)} data columns, got {data.d}")
    return theta


def eval_moment_means(model: MomentModel, data: Dataset, theta) -> MomentStats:
    """Arithmetic means of the per-observation ``g``, ``G`` and ``G2`` at ``theta``."""
    theta = _validate(model, data, theta)
    if not model.in_domain(theta):
        raise ContractError(f"theta {theta} outside the parameter domain")
    g, G, G2 = evaluate(model, data.values, theta, order=2)
    return MomentStats(g.mean(axis=0), G.mean(axis=0), G2.mean(axis=0), theta)


@dataclass(frozen=True)
class DerivativeReport:
    jacobian_error: float
    second_error: float
    tol: float

    @property
    def jacobian_ok(self) -> bool:
        return self.jacobian_error <= self.tol

    @property
    def second_ok(self) -> bool:
        return self.second_error <= self.tol

    @property
    def passed(self) -> bool:
        return self.jacobian_ok and self.second_ok


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # entries small relative to the matrix scale are judged against that scale
    floor = 1e-3 * max(1.0, float(np.max(np.abs(numeric), initial=0.0)))
    denom = np.maximum(np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))


def check_derivatives(
    model: MomentModel, data: Dataset, theta, step: float = 1e-5, tol: float = 1e-6
) -> DerivativeReport:
    """Compare ``G_n`` and ``G2_n`` with central differences of ``g_n`` and ``G_n``."""
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    theta = _validate(model, data, theta)
    if np.any(theta - step < model.lower) or np.any(theta + step > model.upper):
        raise ContractError("theta must be interior to the domain by at least `step`")
    X = data.values
    stats = eval_moment_means(model, data, theta)
    p = model.n_params
    fd_G = np.empty_like(stats.G_n)
    fd_G2 = np.empty_like(stats.G2_n)
    for k in range(p):
        e = np.zeros(p)
        e[k] = step
        gp, Gp, _ = evaluate(model, X, theta + e, order=1)
        gm, Gm, _ = evaluate(model, X, theta - e, order=1)
        fd_G[:, k] = (gp.mean(axis=0) - gm.mean(axis=0)) / (2 * step)
        dG = (Gp.mean(axis=0) - Gm.mean(axis=0)) / (2 * step)
        fd_G2[:, k] = dG.T.reshape(-1)  # column-major vec
    return DerivativeReport(_relative_error(stats.G_n, fd_G), _relative_error(stats.G2_n, fd_G2), tol)
