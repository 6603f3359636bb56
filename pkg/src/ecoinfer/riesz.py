"""Closed-form sieve Riesz representers for the group-mean functionals.

For group ``j`` the representer ``alpha_j(xbar, z) = (xbar kron Phi(z))' zeta_j``
minimizes the penalized empirical Riesz loss

    sum_g [ w_g alpha(xbar_g, z_g)^2 - 2 u_gj alpha(e_j, z_g) ] + lam ||zeta||^2,

whose solution is ``zeta_j = (X'WX + lam I)^{-1} b_j`` with
``b_j = sum_g u_gj (e_j kron Phi(z_g))``. Penalties use the sum convention.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ridge import LEVERAGE_TOL, SvdCache, _check_lambda


@dataclass
class RieszFit:
    """Representer coefficients and values for one or more groups.

    Attributes
    ----------
    zeta : ndarray of shape (n_coef, k)
    alpha : ndarray of shape (m, k)
        Representer evaluated at each geography's ``(xbar_g, z_g)``.
    second_moment : ndarray of shape (k,)
        ``mean(alpha ** 2)`` per column.
    nu2 : ndarray of shape (k,)
        Closed-form estimate of ``E[2 m(alpha) - alpha^2]``; may be negative
        under heavy penalization.
    """

    zeta: np.ndarray
    alpha: np.ndarray
    second_moment: np.ndarray
    nu2: np.ndarray
    lam: float
    loo_alpha: Optional[np.ndarray] = None

    @property
    def nu_hat(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.nu2, 0.0))


def riesz_solve(svd: SvdCache, b, lam: float, X=None) -> RieszFit:
    """Representer coefficients for right-hand side(s) ``b`` of shape (n_coef,) or (n_coef, k).

    ``svd`` decomposes the (possibly ``sqrt(w)``-weighted) design; ``X`` is
    the unweighted design used to evaluate ``alpha`` (defaults to ``svd.X``).
    """
    _check_lambda(svd, lam)
    b = np.asarray(b, dtype=float)
    one = b.ndim == 1
    B = b[:, None] if one else b
    D2 = svd.D ** 2
    VtB = svd.V.T @ B
    zeta = svd.V @ (VtB / (D2 + lam)[:, None])
    X = svd.X if X is None else X
    alpha = X @ zeta
    m = X.shape[0]
    nu2 = nu_from_projection(VtB, D2, lam, m)
    fit = RieszFit(
        zeta=zeta, alpha=alpha, second_moment=np.mean(alpha ** 2, axis=0), nu2=nu2, lam=float(lam)
    )
    if np.any(nu2 < 0):
        warnings.warn("estimated nu^2 is negative; the penalty dominates the representer",
                      RuntimeWarning, stacklevel=2)
    return fit


def nu_from_projection(VtB, D2, lam: float, m: int) -> np.ndarray:
    """``(1/m) b'V (2(D^2+lam)^-1 - D^2 (D^2+lam)^-2) V'b`` per column of ``V'b``."""
    VtB = np.asarray(VtB, dtype=float)
    if VtB.ndim == 1:
        VtB = VtB[:, None]
    if lam == 0:
        kern = 1.0 / D2
    else:
        kern = 2.0 / (D2 + lam) - D2 / (D2 + lam) ** 2
    return np.einsum("rk,r,rk->k", VtB, kern, VtB) / m


def nu_hat(svd: SvdCache, b, lam: float) -> np.ndarray:
    """Raw ``nu^2`` estimate for right-hand side(s) ``b`` (see :func:`riesz_solve`)."""
    _check_lambda(svd, lam)
    b = np.asarray(b, dtype=float)
    return nu_from_projection(svd.V.T @ (b if b.ndim > 1 else b[:, None]), svd.D ** 2, lam, svd.m)


def riesz_loo(svd: SvdCache, alpha, lam: float, pure_vt, hat_diag, xz_scale=None) -> np.ndarray:
    """Leave-one-out representer values ``alpha_(-i)(x_i)``.

    Parameters
    ----------
    alpha : ndarray of shape (m,)
        In-sample representer values from the full fit.
    pure_vt : ndarray of shape (m, r)
        Rows ``V' (u_ij e_j kron Phi(z_i))``.
    hat_diag : ndarray of shape (m,)
        Leverages of the (weighted) design at ``lam``.
    xz_scale : ndarray of shape (m,), optional
        Row weights ``sqrt(w_i)`` folded into the decomposed design.
    """
    h = np.asarray(hat_diag, dtype=float)
    if np.any(h >= 1 - LEVERAGE_TOL):
        raise np.linalg.LinAlgError("leverage of 1: leave-one-out representer undefined")
    D = svd.D
    cross = np.empty(svd.m)
    # x_i' V (D^2 + lam)^-1 V' xt_i with x_i' V = U_i D (weighted rows)
    for rows, Ub in svd.iter_U_blocks():
        cross[rows] = np.einsum("ir,r,ir->i", Ub, D / (D * D + lam), pure_vt[rows])
    if xz_scale is not None:
        # weighted rows: x_i' V = U_i D / sqrt(w_i)
        cross = cross / np.asarray(xz_scale, dtype=float)
    return (np.asarray(alpha, dtype=float) - cross) / (1 - h)


def riesz_loo_nu2(svd: SvdCache, pure_vt, lam: float, riesz_weight=None) -> float:
    """Held-out estimate of ``nu^2 = E[2 m(alpha) - w alpha^2]``.

    Each row's terms are evaluated at the representer refit without that
    row (Sherman-Morrison on ``X'WX + lam``), so added basis directions that
    only fit noise do not inflate the estimate.

    Parameters
    ----------
    pure_vt : ndarray of shape (m, r)
        Rows ``V' t_i`` where ``t_i`` is row ``i``'s contribution to the
        functional (``u_ij e_j kron Phi(z_i)`` or a contrast of these).
    riesz_weight : ndarray of shape (m,), optional
        Row weights ``w`` folded into the decomposed design as ``sqrt(w)``.
    """
    _check_lambda(svd, lam)
    T = np.asarray(pure_vt, dtype=float)
    w = np.ones(svd.m) if riesz_weight is None else np.asarray(riesz_weight, dtype=float)
    D = svd.D
    K = 1.0 / (D * D + lam)
    zeta = K * T.sum(axis=0)
    total = 0.0
    for rows, Ub in svd.iter_U_blocks():
        # unweighted rows in V coordinates: x_i' V = U_i D / sqrt(w_i)
        Xv = Ub * D / np.sqrt(w[rows])[:, None]
        Tb = T[rows]
        h = w[rows] * np.einsum("ir,r,ir->i", Xv, K, Xv)
        if np.any(h >= 1 - LEVERAGE_TOL):
            raise np.linalg.LinAlgError("leverage of 1: leave-one-out representer undefined")
        xt = np.einsum("ir,r,ir->i", Xv, K, Tb)
        a = Xv @ zeta - xt
        alpha_loo = a / (1 - h)
        m_loo = Tb @ zeta - np.einsum("ir,r,ir->i", Tb, K, Tb) + w[rows] * xt * alpha_loo
        total += float(np.sum(2 * m_loo - w[rows] * alpha_loo ** 2))
    return total / svd.m


def gaussian_representer(xbar, cond_mean, cond_var, j: int) -> np.ndarray:
    """Representer of the group-``j`` mean over all square-integrable
    ``gamma`` when ``xbar_j | z`` is Gaussian with constant variance and all
    sizes are one.

    Integrating ``E[u_j d gamma / d x_j]`` by parts gives
    ``-(d u_j / d x_j) - u_j d log f / d x_j``, i.e.
    ``xbar_j (xbar_j - E[xbar_j | z]) / (var * E[xbar_j]) - 1 / E[xbar_j]``.
    The size weight depends on ``xbar_j``, which is where the constant term
    comes from. Used only as a cross-check.
    """
    xbar = np.asarray(xbar, dtype=float)
    mu = np.asarray(cond_mean, dtype=float)
    mu = mu[:, j] if mu.ndim == 2 else mu
    mean_x = xbar[:, j].mean()
    return (xbar[:, j] * (xbar[:, j] - mu) / float(cond_var) - 1.0) / mean_x
