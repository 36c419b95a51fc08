"""Batched small-matrix helpers (symmetric inversion with rank checks)."""

from __future__ import annotations

import numpy as np

EIG_CUTOFF = 1e-12


def symmetrize(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def sym_inv(A: np.ndarray, cutoff: float = EIG_CUTOFF):
    """Inverse of symmetric matrices via eigendecomposition.

    Returns ``(inverse, ok, condition)``; ``ok`` is False where the smallest
    absolute eigenvalue falls below ``cutoff`` times the largest.  The inverse
    entries are NaN where ``ok`` is False (never a pseudo-inverse).
    """
    A = symmetrize(np.asarray(A, dtype=float))
    finite = np.all(np.isfinite(A), axis=(-1, -2))
    A_safe = np.where(finite[..., None, None], A, np.eye(A.shape[-1]))
    vals, vecs = np.linalg.eigh(A_safe)
    absvals = np.abs(vals)
    vmax = absvals.max(axis=-1)
    vmin = absvals.min(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(vmin > 0, vmax / vmin, np.inf)
        ok = finite & (vmin > cutoff * vmax) & (vmax > 0)
        inv_vals = np.where(ok[..., None], 1.0 / np.where(vals == 0, 1.0, vals), np.nan)
    inv = np.einsum("...ij,...j,...kj->...ik", vecs, inv_vals, vecs)
    return symmetrize(inv), ok, np.where(finite, cond, np.inf)


def pd_check(A: np.ndarray, cutoff: float = EIG_CUTOFF) -> np.ndarray:
    """True where symmetric ``A`` is positive definite with bounded condition."""
    vals = np.linalg.eigvalsh(symmetrize(A))
    return (vals[..., 0] > cutoff * np.abs(vals[..., -1])) & (vals[..., -1] > 0)


def outer_mean(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``n^-1 sum_i a_i b_i'`` over the observation axis (-2)."""
    b = a if b is None else b
    n = a.shape[-2]
    # batched matmul is far faster than einsum for this contraction
    return (np.swapaxes(a, -1, -2) @ b) / n


def obs_mean(arr: np.ndarray, axis: int = -2) -> np.ndarray:
    """Mean over the observation axis (negative ``axis``).

    A broadcast (stride-0) observation axis is read off directly; otherwise
    a plain einsum sum, which is much faster than a strided ``mean``.
    """
    if arr.strides[axis] == 0:
        return np.moveaxis(arr, axis, 0)[0]
    n = arr.shape[axis]
    tail = arr.shape[axis + 1:] if axis != -1 else ()
    flat = arr.reshape(arr.shape[:axis] + (n, -1)) if axis != -1 else arr[..., None]
    out = np.einsum("...nk->...k", flat) / n
    return out.reshape(arr.shape[:axis] + tail)
