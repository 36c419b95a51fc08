"""Conventional and misspecification-robust (Hall-Inoue) sandwich covariances.

The robust estimator linearizes the GMM first-order condition around a
possibly nonzero population moment.  With ``g_n``, ``G_n``, ``G2_n`` at the
estimate and realized weight ``W``::

    H   = G_n' W G_n + (g_n' W (x) I) G2_n
    psi_i = G_n' W (g_i - g_n) + (G_i - G_n)' W g_n + G_n' W_i g_n
    V   = n^-1 sum psi_i psi_i'
    Sigma_MR = H^-1 V H^-1'

where ``W_i`` is the per-observation influence of a random weight matrix
(zero for nonrandom weights).  Stacking the three pieces of ``psi_i`` gives
the robust moment matrix ``Omega`` and the selector
``A = [G_n'W, I, G_n']`` with ``V = A Omega A'``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._linalg import obs_mean, outer_mean, sym_inv, symmetrize
from .errors import BreadSingularError, ContractError, EvaluationError, SingularMatrixError
from .estimate import GmmFit, RealizedWeight, realize_weight
from .model import Dataset, MomentModel, evaluate, hessian_term

CONVENTIONAL = "conventional"
ROBUST = "misspecification-robust"


@dataclass(frozen=True, eq=False)
class SandwichParts:
    H: np.ndarray
    Omega: np.ndarray
    V: np.ndarray
    selector: np.ndarray
    W_terms: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class VarianceEstimate:
    sigma: np.ndarray
    kind: str
    step: int
    n: int

    def se(self, k: int = 0) -> float:
        return float(np.sqrt(self.sigma[k, k] / self.n))


def fit_weight(model: MomentModel, X: np.ndarray, fit: GmmFit) -> RealizedWeight:
    """Re-realize the weight a fit was computed with (needed for its influence terms)."""
    recipe = fit.recipe
    if recipe.kind == "centered":
        anchor = recipe.anchor if recipe.anchor is not None else fit.first_step
        if anchor is None:
            raise ContractError("step-2 fit has no first-step anchor")
        return realize_weight(model, X, recipe, anchor_theta=anchor.theta)
    return realize_weight(model, X, recipe)


# -- batched cores --------------------------------------------------------

def robust_batch(model: MomentModel, g, G, G2, rw: RealizedWeight):
    """Batched ``(Sigma_MR, ok)`` from per-observation ``g, G, G2`` (leading batch axis)."""
    gn = obs_mean(g)
    Gn = obs_mean(G, -3)
    W = rw.W
    Wg = np.einsum("...ij,...j->...i", W, gn)
    H = np.einsum("...ic,...ij,...jm->...cm", Gn, W, Gn)
    if G2 is not None:
        H = H + hessian_term(obs_mean(G2, -3), Wg)
    GtW = np.einsum("...ic,...ij->...cj", Gn, W)
    # G'W(g_i - g_n) + G'W_i g_n, with W_i g_n = -W(c_i c_i'u - S u), u = W g_n
    inner = g - gn[..., None, :]
    if rw.factors is not None:
        c = rw.factors
        cu = c @ Wg[..., None]
        inner = inner - c * cu + np.einsum("...ij,...j->...i", rw.S, Wg)[..., None, :]
    psi = inner @ np.swapaxes(GtW, -1, -2)
    if G.strides[-3] != 0:
        psi = psi + np.einsum("...nic,...i->...nc", G - Gn[..., None, :, :], Wg)
    V = outer_mean(psi)
    Hinv, ok, _ = _inv_general(H)
    sigma = symmetrize(np.einsum("...ij,...jk,...lk->...il", Hinv, V, Hinv))
    ok = ok & np.all(np.isfinite(sigma), axis=(-1, -2))
    return sigma, ok


def conventional_batch(model: MomentModel, g, G, rw: RealizedWeight, step: int):
    """Batched ``(Sigma_C, ok)`` with uncentered ``Omega_C = n^-1 sum g_i g_i'``."""
    Gn = obs_mean(G, -3)
    omega = symmetrize(outer_mean(g))
    if step == 2:
        oinv, ok1, _ = sym_inv(omega)
        info = np.einsum("...ic,...ij,...jm->...cm", Gn, oinv, Gn)
        sigma, ok2, _ = sym_inv(info)
        ok = ok1 & ok2
    else:
        W = rw.W
        bread, ok, _ = sym_inv(np.einsum("...ic,...ij,...jm->...cm", Gn, W, Gn))
        GtW = np.einsum("...ic,...ij->...cj", Gn, W)
        meat = np.einsum("...ci,...ij,...dj->...cd", GtW, omega, GtW)
        sigma = np.einsum("...ij,...jk,...lk->...il", bread, meat, bread)
    sigma = symmetrize(sigma)
    ok = ok & np.all(np.isfinite(sigma), axis=(-1, -2))
    return sigma, ok


def _inv_general(H: np.ndarray):
    # H is symmetric up to rounding (sum of symmetric pieces)
    return sym_inv(H)


# -- public single-sample API -------------------------------------------

def _moments_at(model: MomentModel, data: Dataset, fit: GmmFit):
    if not fit.converged:
        raise ContractError("variance requires a converged fit")
    return evaluate(model, data.values, fit.theta, order=1 if model.affine else 2)


def hessian_H(model: MomentModel, data: Dataset, fit: GmmFit) -> np.ndarray:
    """Bread ``H_n = G_n'WG_n + (g_n'W (x) I)G2_n`` at the fit."""
    g, G, G2 = _moments_at(model, data, fit)
    gn, Gn = g.mean(axis=0), G.mean(axis=0)
    W = fit.weight
    H = Gn.T @ W @ Gn
    if G2 is not None:
        H = H + hessian_term(G2.mean(axis=0), W @ gn)
    if not np.all(np.isfinite(H)):
        raise EvaluationError("non-finite bread matrix")
    return H


def omega_robust(model: MomentModel, data: Dataset, fit: GmmFit) -> SandwichParts:
    """Robust moment matrix ``Omega_n``, selector, meat ``V_n`` and weight influences ``W_i``.

    Nonrandom weights stack ``(g_i - g_n; (G_i - G_n)'W g_n)``; random weights
    (two-step, 2SLS) append ``W_i g_n``.
    """
    if fit.step == 2 and fit.first_step is None and (fit.recipe.anchor is None):
        raise ContractError("step-2 fit has no first-step anchor")
    g, G, G2 = _moments_at(model, data, fit)
    rw = fit_weight(model, data.values, fit)
    gn, Gn = g.mean(axis=0), G.mean(axis=0)
    W = fit.weight
    Wg = W @ gn
    pieces = [g - gn, np.einsum("nic,i->nc", G - Gn, Wg)]
    lt = model.n_params
    selector = [Gn.T @ W, np.eye(lt)]
    W_terms = None
    if rw.factors is not None:
        W_terms = rw.influence_terms()
        pieces.append(np.einsum("nij,j->ni", W_terms, gn))
        selector.append(Gn.T)
    stack = np.concatenate(pieces, axis=1)
    Omega = symmetrize(outer_mean(stack))
    A = np.concatenate(selector, axis=1)
    V = symmetrize(A @ Omega @ A.T)
    H = Gn.T @ W @ Gn
    if G2 is not None:
        H = H + hessian_term(G2.mean(axis=0), Wg)
    return SandwichParts(H, Omega, V, A, W_terms)


def sigma_mr(model: MomentModel, data: Dataset, fit: GmmFit) -> VarianceEstimate:
    """Hall-Inoue covariance ``H^-1 V H^-1'``."""
    parts = omega_robust(model, data, fit)
    Hinv, ok, cond = sym_inv(parts.H)
    if not ok:
        raise BreadSingularError("bread matrix H_n is singular", float(cond))
    sigma = symmetrize(Hinv @ parts.V @ Hinv.T)
    return VarianceEstimate(sigma, ROBUST, fit.step, data.n)


def sigma_conventional(model: MomentModel, data: Dataset, fit: GmmFit) -> VarianceEstimate:
    """Conventional GMM covariance, valid only under correct specification.

    Two-step: ``(G'Omega_C^-1 G)^-1``; one-step with weight ``W``:
    ``(G'WG)^-1 G'W Omega_C W G (G'WG)^-1``.
    """
    g, G, _ = _moments_at(model, data, fit)
    Gn = G.mean(axis=0)
    omega = symmetrize(g.T @ g / data.n)
    if fit.step == 2:
        oinv, ok, cond = sym_inv(omega)
        if not ok:
            raise SingularMatrixError("moment second-moment matrix Omega_C is singular", float(cond))
        sigma, ok, cond = sym_inv(Gn.T @ oinv @ Gn)
        if not ok:
            raise SingularMatrixError("G' Omega_C^-1 G is singular", float(cond))
    else:
        W = fit.weight
        bread, ok, cond = sym_inv(Gn.T @ W @ Gn)
        if not ok:
            raise SingularMatrixError("G'WG is singular", float(cond))
        if not sym_inv(omega)[1]:
            raise SingularMatrixError("moment second-moment matrix Omega_C is singular", float(sym_inv(omega)[2]))
        meat = Gn.T @ W @ omega @ W @ Gn
        sigma = bread @ meat @ bread
    return VarianceEstimate(symmetrize(sigma), CONVENTIONAL, fit.step, data.n)
