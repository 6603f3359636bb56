"""Per-geography estimates of the local group means ``B_g``.

The fitted coefficient functions ``eta(z_g)`` are moved onto the accounting
hyperplane ``{b : b' xbar_g = ybar_g}`` by an oblique projection along the
estimated conditional covariance ``Sigma(z_g)``, then (for bounded outcomes)
into the box, and wrapped in a Chebyshev confidence region.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy.optimize import minimize

from .ridge import (ConvergenceError, active_set_qp, default_lambda_grid, loocv_path, ridge_solve,
                    svd_cache)
from .sieve import BasisSpec, SieveBasis

PSD_FLOOR = 1e-10
SIGMA_RIDGE = 1e-8
UNIMODAL_FACTOR = 2.0 / 3.0


def _vech_pairs(d: int):
    return [(j, k) for j in range(d) for k in range(j, d)]


def quadratic_features(xbar) -> np.ndarray:
    """``vech(x x')`` per row, ordered ``(0,0), (0,1), ..., (d-1,d-1)``."""
    xbar = np.asarray(xbar, dtype=float)
    pairs = _vech_pairs(xbar.shape[1])
    return np.column_stack([xbar[:, j] * xbar[:, k] for j, k in pairs])


def polarize(kappa, d: int) -> np.ndarray:
    """Recover the symmetric matrix of a quadratic form from evaluations.

    ``kappa(x)`` must accept an array of shape (q, d) and return shape (q,)
    (or (q, k) for ``k`` covariate points). Uses
    ``S_jk = 2 (kappa(e_j/2 + e_k/2) - kappa(e_j)/4 - kappa(e_k)/4)``.
    """
    E = np.eye(d)
    diag = np.asarray(kappa(E))
    pairs = [(j, k) for j in range(d) for k in range(j + 1, d)]
    mids = np.array([(E[j] + E[k]) / 2 for j, k in pairs]).reshape(-1, d)
    off = np.asarray(kappa(mids)) if pairs else np.zeros((0,) + diag.shape[1:])
    S = np.zeros((d, d) + diag.shape[1:])
    for j in range(d):
        S[j, j] = diag[j]
    for (j, k), val in zip(pairs, off):
        S[j, k] = S[k, j] = 2 * (val - diag[j] / 4 - diag[k] / 4)
    return S


def psd_clip(S, floor: float = PSD_FLOOR) -> np.ndarray:
    """Clip eigenvalues of symmetric matrices (..., d, d) at ``floor``."""
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    vals, vecs = np.linalg.eigh(S)
    vals = np.maximum(vals, floor)
    return (vecs * vals[..., None, :]) @ np.swapaxes(vecs, -1, -2)


class ConditionalCovariance:
    """Quadratic-in-shares model of the squared outcome residual.

    ``kappa(x, z) = x' S(z) x`` where the entries of ``S(z)`` are linear in
    a sieve ``Phi_k(z)``; ``Sigma(z)`` is recovered by polarization and made
    positive semidefinite.
    """

    def __init__(self, sieve: SieveBasis, coef: np.ndarray, d: int, lam: float):
        self.sieve = sieve
        self.coef = coef  # (n_pairs, J_k)
        self.d = d
        self.lam = lam

    def kappa(self, x, Z) -> np.ndarray:
        """Fitted quadratic form at shares ``x`` (q, d) for each row of ``Z``; (q, k)."""
        Phi = self.sieve.transform(Z)
        pair_vals = Phi @ self.coef.T  # (k, n_pairs)
        return quadratic_features(np.atleast_2d(x)) @ pair_vals.T

    def sigma_raw(self, Z) -> np.ndarray:
        """Polarized covariance before PSD projection; shape (k, d, d)."""
        S = polarize(lambda x: self.kappa(x, Z), self.d)
        return np.moveaxis(S, -1, 0)

    def sigma(self, Z) -> np.ndarray:
        return psd_clip(self.sigma_raw(Z))


def fit_kappa(xbar, Z, residuals, basis: BasisSpec = BasisSpec("linear"), lambda_grid=None,
              linear_columns=None) -> ConditionalCovariance:
    """Ridge regression of squared residuals on ``vech(xbar xbar') kron Phi_k(z)``,
    penalty chosen by leave-one-out error."""
    xbar = np.asarray(xbar, dtype=float)
    m, d = xbar.shape
    Z = np.zeros((m, 0)) if Z is None else np.asarray(Z, dtype=float).reshape(m, -1)
    sieve = SieveBasis(basis, linear_columns).fit(Z)
    Phi = sieve.transform(Z)
    Q = quadratic_features(xbar)
    design = (Q[:, :, None] * Phi[:, None, :]).reshape(m, -1)
    r2 = np.asarray(residuals, dtype=float) ** 2
    svd = svd_cache(design)
    grid = default_lambda_grid() if lambda_grid is None else np.asarray(lambda_grid, dtype=float)
    if not np.any(r2):
        coef = np.zeros(design.shape[1])
        lam = float(grid[0])
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            lam_sum, _ = loocv_path(svd, r2, m * grid)
        coef = ridge_solve(svd, r2, lam_sum, hat=False).theta
        lam = lam_sum / m
    return ConditionalCovariance(sieve, coef.reshape(Q.shape[1], Phi.shape[1]), d, lam)


# ---------------------------------------------------------------------------
# geometry


def hyperplane_basis(xbar, ybar):
    """Orthonormal basis of ``{b : b' xbar = 0}`` and the point ``ybar xbar / |xbar|^2``."""
    x = np.asarray(xbar, dtype=float).reshape(-1)
    nrm2 = float(x @ x)
    if nrm2 == 0:
        raise ValueError("zero share vector has no accounting hyperplane")
    d = x.size
    Q, _ = np.linalg.qr(np.column_stack([x, np.eye(d)]))
    return Q[:, 1:d], float(ybar) * x / nrm2


def hyperplane_bases(xbar, ybar):
    """Vectorized :func:`hyperplane_basis`; returns H (m, d, d-1) and b0 (m, d)."""
    xbar = np.asarray(xbar, dtype=float)
    m, d = xbar.shape
    nrm2 = np.einsum("gj,gj->g", xbar, xbar)
    if np.any(nrm2 == 0):
        raise ValueError("zero share vector has no accounting hyperplane")
    blocks = np.concatenate([xbar[:, :, None], np.broadcast_to(np.eye(d), (m, d, d))], axis=2)
    Q, _ = np.linalg.qr(blocks)
    return Q[:, :, 1:d], np.asarray(ybar, dtype=float)[:, None] * xbar / nrm2[:, None]


def oblique_projector(H, Sigma):
    """``Pi = H (H' S^-1 H)^-1 H' S^-1`` with ``S = Sigma + 1e-8 I``; batched.

    Returns ``(Pi, M)`` with ``M = H' S^-1 H``.
    """
    d = Sigma.shape[-1]
    Sinv = np.linalg.inv(Sigma + SIGMA_RIDGE * np.eye(d))
    M = np.swapaxes(H, -1, -2) @ Sinv @ H
    Pi = H @ np.linalg.solve(M, np.swapaxes(H, -1, -2) @ Sinv)
    return Pi, M


# ---------------------------------------------------------------------------


@dataclass
class LocalEstimates:
    """Per-geography point estimates and confidence regions.

    Attributes
    ----------
    eta : ndarray of shape (m, d)
        Fitted coefficient functions at each geography.
    B_hat : ndarray of shape (m, d)
        Oblique projection onto the accounting hyperplane.
    B_hat_prime : ndarray of shape (m, d)
        Further projection into the outcome bounds (equals ``B_hat`` when
        the outcome is unbounded).
    H : ndarray of shape (m, d, d-1)
    Pi : ndarray of shape (m, d, d)
    M : ndarray of shape (m, d-1, d-1)
        ``H' Sigma^-1 H``; the region's quadratic form in hyperplane
        coordinates is ``w' M w``.
    Sigma : ndarray of shape (m, d, d)
    """

    eta: np.ndarray
    B_hat: np.ndarray
    B_hat_prime: np.ndarray
    H: np.ndarray
    Pi: np.ndarray
    M: np.ndarray
    Sigma: np.ndarray
    xbar: np.ndarray
    ybar: np.ndarray
    bounds: Optional[tuple] = None

    @property
    def m(self) -> int:
        return self.eta.shape[0]

    @property
    def d(self) -> int:
        return self.eta.shape[1]

    def region_shape(self) -> np.ndarray:
        """Pseudo-inverse of the projected covariance, ``H M H'``; (m, d, d)."""
        return self.H @ self.M @ np.swapaxes(self.H, -1, -2)

    def projected_covariance(self) -> np.ndarray:
        """``Pi Sigma Pi'`` = ``H M^-1 H'``; (m, d, d)."""
        return self.H @ np.linalg.solve(self.M, np.swapaxes(self.H, -1, -2))

    def region(self, alpha: float):
        """Center, shape matrix and radius of each confidence region."""
        return self.B_hat_prime, self.region_shape(), region_radius(self.d, alpha)

    def contains(self, b, alpha: float, tol: float = 1e-8) -> np.ndarray:
        """Whether each row of ``b`` lies in its geography's region."""
        b = np.asarray(b, dtype=float)
        on_plane = np.abs(np.einsum("gj,gj->g", b, self.xbar) - self.ybar) <= tol
        if self.bounds is not None:
            lo, hi = self.bounds
            on_plane &= np.all((b >= lo - tol) & (b <= hi + tol), axis=1)
        diff = b - self.B_hat_prime
        w = np.einsum("gjk,gj->gk", self.H, diff)
        q = np.einsum("gk,gkl,gl->g", w, self.M, w)
        return on_plane & (q <= region_radius(self.d, alpha) * (1 + 1e-12))

    def intervals(self, alpha: float, unimodal: bool = False):
        """Per-component extremes of each region; returns (lower, upper), each (m, d)."""
        r = region_radius(self.d, alpha)
        cov = self.projected_covariance()
        half = np.sqrt(r * np.clip(np.einsum("gjj->gj", cov), 0.0, None))
        lower = self.B_hat_prime - half
        upper = self.B_hat_prime + half
        if self.bounds is not None:
            lo, hi = self.bounds
            binding = np.any(lower < lo - 1e-12, axis=1) | np.any(upper > hi + 1e-12, axis=1)
            for g in np.flatnonzero(binding):
                lower[g], upper[g] = _box_extremes(
                    self.B_hat_prime[g], self.H[g], self.M[g], r, lo, hi, lower[g], upper[g]
                )
        if unimodal:
            c = self.B_hat_prime
            lower = c - UNIMODAL_FACTOR * (c - lower)
            upper = c + UNIMODAL_FACTOR * (upper - c)
        return lower, upper

    def to_frame(self, alpha: float = 0.05, unimodal: bool = False, ids=None, group_names=None) -> pd.DataFrame:
        lower, upper = self.intervals(alpha, unimodal)
        names = group_names or [f"x{j}" for j in range(self.d)]
        frame = pd.DataFrame({"id": np.arange(self.m) if ids is None else ids})
        for j, name in enumerate(names):
            frame[f"eta_{name}"] = self.eta[:, j]
            frame[f"B_{name}"] = self.B_hat_prime[:, j]
            frame[f"lower_{name}"] = lower[:, j]
            frame[f"upper_{name}"] = upper[:, j]
        return frame


def region_radius(d: int, alpha: float) -> float:
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    return (d - 1) / alpha


def _box_extremes(center, H, M, r, lo, hi, lower, upper):
    """Exact per-component extremes over the ellipsoid intersected with the box."""
    d = center.size
    if d == 2:
        h = H[:, 0]
        reach = np.sqrt(r / M[0, 0])
        t_lo, t_hi = -reach, reach
        for j in range(d):
            if abs(h[j]) > 1e-15:
                a, b = (lo - center[j]) / h[j], (hi - center[j]) / h[j]
                t_lo, t_hi = max(t_lo, min(a, b)), min(t_hi, max(a, b))
        ends = center[None, :] + np.outer([t_lo, t_hi], h)
        return ends.min(axis=0), ends.max(axis=0)
    out_lo, out_hi = np.array(lower), np.array(upper)
    cons = [
        {"type": "ineq", "fun": lambda w: r - w @ M @ w, "jac": lambda w: -2 * M @ w},
        {"type": "ineq", "fun": lambda w: center + H @ w - lo, "jac": lambda w: H},
        {"type": "ineq", "fun": lambda w: hi - center - H @ w, "jac": lambda w: -H},
    ]
    w0 = np.zeros(d - 1)
    for j in range(d):
        for sign in (1.0, -1.0):
            res = minimize(lambda w: sign * (H[j] @ w), w0, jac=lambda w: sign * H[j],
                           constraints=cons, method="SLSQP", options={"ftol": 1e-12, "maxiter": 500})
            val = center[j] + H[j] @ res.x
            if sign > 0:
                out_lo[j] = max(min(val, center[j]), lo)
            else:
                out_hi[j] = min(max(val, center[j]), hi)
    return out_lo, out_hi


def project_local(eta, Sigma, xbar, ybar, bounds=None):
    """Oblique and box projections for a batch of geographies.

    Returns ``(B_hat, B_hat_prime, Pi, H, M)``.
    """
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    xbar = np.atleast_2d(np.asarray(xbar, dtype=float))
    ybar = np.atleast_1d(np.asarray(ybar, dtype=float))
    Sigma = np.asarray(Sigma, dtype=float)
    if Sigma.ndim == 2:
        Sigma = np.broadcast_to(Sigma, (eta.shape[0],) + Sigma.shape)
    H, b0 = hyperplane_bases(xbar, ybar)
    Pi, M = oblique_projector(H, Sigma)
    B_hat = b0 + np.einsum("gij,gj->gi", Pi, eta - b0)
    if bounds is None:
        B_prime = B_hat.copy()
    else:
        lo, hi = bounds
        inside = np.all((B_hat >= lo) & (B_hat <= hi), axis=1)
        B_prime = B_hat.copy()
        for g in np.flatnonzero(~inside):
            B_prime[g] = box_project(B_hat[g], H[g], M[g], ybar[g], lo, hi)
    return B_hat, B_prime, Pi, H, M


def box_project(b, H, M, ybar, lo, hi):
    """Closest point to ``b`` (on the hyperplane) within the box, in the
    metric whose hyperplane form is ``M``.

    Solved exactly in hyperplane coordinates ``b + H w`` by an active-set
    method started from the feasible point ``ybar * 1``.
    """
    d = b.size
    G = np.vstack([H, -H])
    h = np.concatenate([np.full(d, lo) - b, b - np.full(d, hi)])
    w0 = H.T @ (np.full(d, float(ybar)) - b)
    w, _ = active_set_qp(M, np.zeros(d - 1), G, h, w0)
    out = b + H @ w
    viol = max(lo - out.min(), out.max() - hi, 0.0)
    if viol > 1e-8:
        raise ConvergenceError(f"box projection left the box by {viol:.3g}")
    # only round-off remains; clipping it keeps the sum within float error
    return np.clip(out, lo, hi)


def local_estimates(model, X, y, Z=None, kappa_basis: BasisSpec = BasisSpec("linear"),
                    bounds=None, linear_columns=None) -> LocalEstimates:
    """Local estimates from a fitted :class:`~ecoinfer.dml.EcoDML`."""
    xbar = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    m = xbar.shape[0]
    Zm = np.zeros((m, 0)) if Z is None else np.asarray(Z, dtype=float).reshape(m, -1)
    eta = model.predict_eta(Zm, m=m)
    resid = y - np.einsum("gj,gj->g", eta, xbar)
    cc = fit_kappa(xbar, Zm, resid, kappa_basis, linear_columns=linear_columns)
    Sigma = cc.sigma(Zm)
    bounds = model.bounds if bounds is None else bounds
    B_hat, B_prime, Pi, H, M = project_local(eta, Sigma, xbar, y, bounds)
    out = LocalEstimates(eta=eta, B_hat=B_hat, B_hat_prime=B_prime, H=H, Pi=Pi, M=M,
                         Sigma=Sigma, xbar=xbar, ybar=y,
                         bounds=None if bounds is None else tuple(bounds))
    out.kappa = cc
    return out
