"""Input checks shared by the estimators.

These avoid ``sklearn.utils.check_array`` on the hot path because it may copy
large arrays; they only convert when the input is not already float64.
"""

from __future__ import annotations

import numpy as np

SHARE_TOL = 1e-9


def _float_array(a, name: str, ndim: int) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if ndim == 2 and arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_shares(X, tol: float = SHARE_TOL) -> np.ndarray:
    """Shares must lie in [0, 1] with rows summing to one."""
    xbar = _float_array(X, "shares", 2)
    if xbar.shape[0] < 2:
        raise ValueError("need at least 2 geographies")
    if np.any(xbar < 0) or np.any(xbar > 1):
        raise ValueError("shares must lie in [0, 1]")
    dev = np.abs(xbar.sum(axis=1) - 1.0)
    if np.any(dev > tol):
        g = int(np.argmax(dev))
        raise ValueError(f"share-sum violation in row {g}")
    return xbar


def check_outcome(y, m: int, bounds=None) -> np.ndarray:
    y = _float_array(y, "outcome", 1)
    if y.shape[0] != m:
        raise ValueError(f"outcome has {y.shape[0]} rows, expected {m}")
    if bounds is not None:
        lo, hi = bounds
        if not lo < hi:
            raise ValueError("bounds must satisfy lo < hi")
        if np.any(y < lo) or np.any(y > hi):
            raise ValueError(f"outcome outside declared bounds [{lo}, {hi}]")
    return y


def check_covariates(Z, m) -> np.ndarray:
    if Z is None:
        return np.zeros((0 if m is None else m, 0))
    Z = _float_array(Z, "covariates", 2)
    if m is not None and Z.shape[0] != m:
        raise ValueError(f"covariates have {Z.shape[0]} rows, expected {m}")
    return Z


def check_sizes(n, m: int) -> np.ndarray:
    if n is None:
        return np.ones(m)
    n = _float_array(n, "population sizes", 1)
    if n.shape[0] != m:
        raise ValueError(f"population sizes have {n.shape[0]} rows, expected {m}")
    if np.any(n <= 0):
        raise ValueError("population sizes must be positive")
    return n


def check_weights(w, m: int):
    if w is None:
        return None
    w = _float_array(w, "sample weights", 1)
    if w.shape[0] != m:
        raise ValueError(f"sample weights have {w.shape[0]} rows, expected {m}")
    if np.any(w <= 0):
        raise ValueError("sample weights must be positive")
    return w
