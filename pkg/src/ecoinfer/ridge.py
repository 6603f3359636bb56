"""Ridge regression through a cached spectral decomposition of the design.

Penalties here use the sum-of-squares convention: ``theta`` minimizes
``||y - X theta||^2 + lam * ||theta||^2``. Estimators that expose the
empirical-mean convention convert with ``lam_sum = m * lam``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

RANK_RTOL = 1e-12
# eigenvalues of X'X carry roughly squared relative error, so the Gram route
# can only resolve singular values down to about sqrt(eps)
GRAM_RANK_RTOL = 1.5e-7
LEVERAGE_TOL = 1e-12
_ROW_BLOCK = 4096


class RankDeficiencyError(np.linalg.LinAlgError):
    pass


class ConvergenceError(RuntimeError):
    pass


def default_lambda_grid(lo: float = 1e-8, hi: float = 1e2, num: int = 50) -> np.ndarray:
    """Log-spaced penalty grid (empirical-mean convention)."""
    return np.logspace(np.log10(lo), np.log10(hi), num)


@dataclass(frozen=True, eq=False)
class SvdCache:
    """Thin SVD ``X = U diag(D) V'`` of a (possibly row-weighted) design.

    When built through the Gram route ``U`` is ``None`` and the products
    that need it are formed blockwise from ``X`` on demand.
    """

    D: np.ndarray
    V: np.ndarray
    X: np.ndarray
    U: Optional[np.ndarray] = None
    full_rank: bool = True

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def n_coef(self) -> int:
        return self.X.shape[1]

    @property
    def rank(self) -> int:
        return self.D.shape[0]

    def Ut(self, y) -> np.ndarray:
        """``U' y``"""
        if self.U is not None:
            return self.U.T @ y
        return (self.V.T @ (self.X.T @ y)) / self.D

    def U_times(self, c) -> np.ndarray:
        """``U c`` for a vector of length ``rank``."""
        if self.U is not None:
            return self.U @ c
        return self.X @ (self.V @ (c / self.D))

    def iter_U_blocks(self, block: int = _ROW_BLOCK):
        """Yield ``(rows, U[rows])`` blocks."""
        for start in range(0, self.m, block):
            rows = slice(start, min(start + block, self.m))
            if self.U is not None:
                yield rows, self.U[rows]
            else:
                yield rows, (self.X[rows] @ self.V) / self.D

    def leverage(self, shrink) -> np.ndarray:
        """Hat diagonals ``sum_k U_ik^2 shrink_k``; ``shrink`` may be (r,) or (r, L)."""
        shrink = np.asarray(shrink, dtype=float)
        out = np.empty((self.m,) + shrink.shape[1:])
        for rows, Ub in self.iter_U_blocks():
            out[rows] = (Ub * Ub) @ shrink
        return out


def svd_cache(X, rtol: Optional[float] = None, method: str = "auto") -> SvdCache:
    """Decompose ``X`` once for repeated ridge solves.

    ``method`` is ``"svd"`` (LAPACK thin SVD), ``"gram"`` (eigendecomposition
    of ``X'X``, much cheaper when ``m`` far exceeds the column count) or
    ``"auto"``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("design must be 2-D")
    if not np.all(np.isfinite(X)):
        raise ValueError("design contains non-finite values")
    m, n = X.shape
    if method == "auto":
        method = "gram" if (m >= 2 * n and m * n * n > 2e9) else "svd"
    if method == "svd":
        try:
            U, D, Vt = scipy.linalg.svd(X, full_matrices=False, lapack_driver="gesdd")
        except np.linalg.LinAlgError:
            U, D, Vt = scipy.linalg.svd(X, full_matrices=False, lapack_driver="gesvd")
        tol = RANK_RTOL if rtol is None else rtol
        keep = D > tol * D[0] if D.size and D[0] > 0 else np.zeros(D.shape, bool)
        r = int(keep.sum())
        return SvdCache(D=D[:r], V=Vt[:r].T.copy(), X=X, U=U[:, :r].copy(), full_rank=r == n)
    if method == "gram":
        G = X.T @ X
        evals, evecs = scipy.linalg.eigh(G, overwrite_a=True, check_finite=False, driver="evd")
        del G
        order = np.argsort(evals)[::-1]
        evals, evecs = evals[order], evecs[:, order]
        D = np.sqrt(np.clip(evals, 0.0, None))
        tol = GRAM_RANK_RTOL if rtol is None else rtol
        keep = D > tol * D[0] if D.size and D[0] > 0 else np.zeros(D.shape, bool)
        r = int(keep.sum())
        return SvdCache(D=D[:r], V=np.ascontiguousarray(evecs[:, :r]), X=X, U=None, full_rank=r == n)
    raise ValueError(f"unknown decomposition method {method!r}")


@dataclass
class RidgeFit:
    theta: np.ndarray
    lam: float
    fitted: np.ndarray
    hat_diag: Optional[np.ndarray] = None
    loocv_error: Optional[float] = None


def _check_lambda(svd: SvdCache, lam: float):
    if not np.isfinite(lam) or lam < 0:
        raise ValueError("penalty must be a finite nonnegative number")
    if lam == 0 and not svd.full_rank:
        raise RankDeficiencyError(
            f"lambda = 0 needs a full-rank design (rank {svd.rank} < {svd.n_coef} columns)"
        )


def ridge_solve(svd: SvdCache, y, lam: float, hat: bool = True) -> RidgeFit:
    """Solve ``min ||y - X theta||^2 + lam ||theta||^2`` (row weights, if
    any, are already folded into the cache and ``y``)."""
    _check_lambda(svd, lam)
    y = np.asarray(y, dtype=float)
    D = svd.D
    Uty = svd.Ut(y)
    theta = svd.V @ (D / (D * D + lam) * Uty)
    shrink = D * D / (D * D + lam)
    fitted = svd.U_times(shrink * Uty)
    out = RidgeFit(theta=theta, lam=float(lam), fitted=fitted)
    if hat:
        h = svd.leverage(shrink)
        out.hat_diag = h
        if np.all(h < 1 - LEVERAGE_TOL):
            out.loocv_error = float(np.mean(((y - fitted) / (1 - h)) ** 2))
    return out


def loocv_path(svd: SvdCache, y, lambda_grid):
    """Closed-form leave-one-out error for each penalty in ``lambda_grid``.

    For a weighted fit pass the ``sqrt(w)``-scaled design and outcome; the
    error is then the ``w``-weighted mean of squared leave-one-out residuals.
    Returns ``(best_lambda, errors)``; skipped penalties get ``nan``.
    """
    grid = np.asarray(lambda_grid, dtype=float).reshape(-1)
    if grid.size == 0:
        raise ValueError("empty penalty grid")
    if np.any(grid < 0) or not np.all(np.isfinite(grid)):
        raise ValueError("penalties must be finite and nonnegative")
    y = np.asarray(y, dtype=float)
    D2 = svd.D ** 2
    Uty = svd.Ut(y)
    usable = (grid > 0) | svd.full_rank
    shrink = D2[:, None] / (D2[:, None] + grid[None, :])  # (r, L)
    fitted = np.empty((svd.m, grid.size))
    H = np.empty((svd.m, grid.size))
    for rows, Ub in svd.iter_U_blocks():
        fitted[rows] = Ub @ (shrink * Uty[:, None])
        H[rows] = (Ub * Ub) @ shrink
    errors = np.full(grid.size, np.nan)
    # weighted rows: the leave-one-out residual on the original scale is
    # (y_i - yhat_i) / (1 - h_ii) / sqrt(w_i); squared and weighted by w_i it
    # equals the scaled residual squared, so no correction is needed
    for k in range(grid.size):
        if not usable[k]:
            warnings.warn(f"lambda = {grid[k]:g} skipped: design is rank deficient", RuntimeWarning)
            continue
        h = H[:, k]
        if np.any(h >= 1 - LEVERAGE_TOL):
            warnings.warn(f"lambda = {grid[k]:g} skipped: an observation has leverage 1",
                          RuntimeWarning)
            continue
        errors[k] = np.mean(((y - fitted[:, k]) / (1 - h)) ** 2)
    if np.all(np.isnan(errors)):
        raise RankDeficiencyError("every penalty in the grid was skipped")
    best = int(np.nanargmin(errors))
    return float(grid[best]), errors


# ---------------------------------------------------------------------------
# bound-constrained variant


def ridge_solve_bounded(svd: SvdCache, constraint_rows, y, lam: float, bounds,
                        start=None, max_iter: int = 10_000, tol: float = 1e-8) -> RidgeFit:
    """Ridge fit with ``lo <= a' theta <= hi`` for every row ``a`` of
    ``constraint_rows``.

    Returns the unconstrained solution when it is already feasible; otherwise
    runs a primal active-set method from the feasible point ``start``.
    """
    _check_lambda(svd, lam)
    lo, hi = (float(b) for b in bounds)
    if not lo < hi:
        raise ValueError("bounds must satisfy lo < hi")
    A = np.asarray(constraint_rows, dtype=float)
    y = np.asarray(y, dtype=float)
    free = ridge_solve(svd, y, lam, hat=False)
    vals = A @ free.theta
    if np.all(vals >= lo - 1e-9) and np.all(vals <= hi + 1e-9):
        return free

    A = np.unique(A, axis=0)
    X = svd.X
    Hm = X.T @ X + lam * np.eye(X.shape[1])
    c = X.T @ y
    if start is None:
        raise ValueError("a feasible starting point is required when constraints bind")
    # rows of the inequality system G theta >= h
    G = np.vstack([A, -A])
    h = np.concatenate([np.full(A.shape[0], lo), np.full(A.shape[0], -hi)])
    theta, _ = active_set_qp(Hm, c, G, h, np.asarray(start, dtype=float), max_iter=max_iter, tol=tol)
    return RidgeFit(theta=theta, lam=float(lam), fitted=X @ theta)


def active_set_qp(H, c, G, h, x0, max_iter: int = 10_000, tol: float = 1e-8):
    """Minimize ``0.5 x'Hx - c'x`` subject to ``G x >= h`` from feasible ``x0``.

    Returns ``(x, multipliers)`` where multipliers are indexed like ``G``.
    """
    x = x0.copy()
    n = x.size
    if np.any(G @ x < h - 1e-9):
        raise ValueError("starting point is infeasible")
    W: list[int] = []
    scale = max(1.0, float(np.abs(c).max(initial=0.0)), float(np.abs(H).max()))
    for _ in range(max_iter):
        g = H @ x - c
        Aw = G[W]
        # equality-constrained step in the null space of the working set;
        # robust to badly scaled H where a KKT least-squares solve is not
        Z = scipy.linalg.null_space(Aw) if W else np.eye(n)
        if Z.shape[1]:
            Hz = Z.T @ H @ Z
            p = Z @ scipy.linalg.solve(Hz, -(Z.T @ g), assume_a="sym")
        else:
            p = np.zeros(n)
        if np.linalg.norm(p, np.inf) <= 1e-11 * max(1.0, np.linalg.norm(x, np.inf)):
            mult = np.linalg.lstsq(Aw.T, g, rcond=None)[0] if W else np.zeros(0)
            if not W or mult.min() >= -tol * scale:
                full = np.zeros(G.shape[0])
                full[W] = mult
                return x, full
            W.pop(int(np.argmin(mult)))
            continue
        Gp = G @ p
        slack = G @ x - h
        blocking = np.flatnonzero(Gp < -1e-14)
        blocking = np.setdiff1d(blocking, W, assume_unique=False)
        step, hit = 1.0, None
        if blocking.size:
            ratios = np.maximum(slack[blocking], 0.0) / -Gp[blocking]
            i = int(np.argmin(ratios))
            if ratios[i] < 1.0:
                step, hit = float(ratios[i]), int(blocking[i])
        x = x + step * p
        if hit is not None:
            W.append(hit)
    raise ConvergenceError(f"active-set QP did not converge in {max_iter} iterations")


def kkt_residual(H, c, G, h, x, mult) -> float:
    """Largest violation among stationarity, feasibility and complementarity."""
    stat = np.abs(H @ x - c - G.T @ mult).max(initial=0.0)
    feas = np.maximum(h - G @ x, 0.0).max(initial=0.0)
    comp = np.abs(mult * (G @ x - h)).max(initial=0.0)
    dual = np.maximum(-mult, 0.0).max(initial=0.0)
    return float(max(stat, feas, comp, dual))
