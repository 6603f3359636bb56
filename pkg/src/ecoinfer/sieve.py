"""Sieve bases over covariates and the share-interacted design matrices.

A fitted coefficient vector ``theta`` of length ``d * J`` represents the
function ``(xbar, z) -> (xbar kron Phi(z)) @ theta``; block ``j`` (columns
``j*J .. (j+1)*J - 1``) holds the coefficients of group ``j``.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
from scipy.interpolate import BSpline
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

FAMILIES = ("cosine", "polynomial", "spline", "linear", "intercept")


@dataclass(frozen=True)
class BasisSpec:
    """Description of a sieve basis.

    Parameters
    ----------
    family : {"cosine", "polynomial", "spline", "linear", "intercept"}
    n_terms : int, optional
        Number of terms ``J`` kept after ordering. Required for cosine,
        optional truncation for polynomial and spline.
    degree : int
        Maximum per-variable degree for the polynomial family.
    max_frequency : int, optional
        Largest univariate cosine frequency allowed in a tensor term.
    n_knots : int
        Interior knots per covariate for the spline family.
    order : int
        Spline order (4 is cubic).
    """

    family: str = "linear"
    n_terms: Optional[int] = None
    degree: int = 2
    max_frequency: Optional[int] = None
    n_knots: int = 3
    order: int = 4

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown basis family {self.family!r}; expected one of {FAMILIES}")
        if self.n_terms is not None and self.n_terms < 1:
            raise ValueError("n_terms must be at least 1")
        if self.family == "cosine" and self.n_terms is None:
            raise ValueError("cosine basis needs n_terms")
        if self.degree < 0 or self.n_knots < 0 or self.order < 1:
            raise ValueError("degree, n_knots and order must be nonnegative (order >= 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "BasisSpec":
        return cls(**obj)


# ---------------------------------------------------------------------------
# scaling


def scale_covariates(z, lo=None, hi=None):
    """Min-max scale each column of ``z`` to [0, 1].

    Returns the scaled matrix and the ``(lo, hi)`` maps. Constant columns map
    to 0.5. Passing stored ``lo``/``hi`` applies a previously fitted map.
    """
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite covariate value")
    if lo is None:
        lo, hi = z.min(axis=0), z.max(axis=0)
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    span = hi - lo
    const = span <= 0
    out = (z - lo) / np.where(const, 1.0, span)
    out[:, const] = 0.5
    return out, (lo, hi)


# ---------------------------------------------------------------------------
# term enumeration


def _compositions(total: int, parts: int, cap: Optional[int]):
    """Tuples of ``parts`` nonnegative ints summing to ``total``, in
    ascending lexicographic order, each entry at most ``cap``."""
    if parts == 1:
        if cap is None or total <= cap:
            yield (total,)
        return
    hi = total if cap is None else min(total, cap)
    for first in range(hi + 1):
        for rest in _compositions(total - first, parts - 1, cap):
            yield (first,) + rest


def cosine_terms(p: int, n_terms: int, max_frequency: Optional[int] = None):
    """Frequency tuples ordered by total frequency, then lexicographically."""
    if p == 0:
        if n_terms > 1:
            raise ValueError("J exceeds enumerable terms: no covariates, only the intercept")
        return [()]
    terms = []
    max_total = None if max_frequency is None else p * max_frequency
    for total in itertools.count():
        if max_total is not None and total > max_total:
            raise ValueError(
                f"J={n_terms} exceeds enumerable terms ({len(terms)}) with max frequency {max_frequency}"
            )
        for t in _compositions(total, p, max_frequency):
            terms.append(t)
            if len(terms) == n_terms:
                return terms


def polynomial_terms(p: int, degree: int, n_terms: Optional[int] = None):
    """Exponent tuples with per-variable degree at most ``degree``."""
    terms = [()] if p == 0 else sorted(
        itertools.product(range(degree + 1), repeat=p), key=lambda t: (sum(t), t)
    )
    if n_terms is not None:
        if n_terms > len(terms):
            raise ValueError(f"J={n_terms} exceeds enumerable terms ({len(terms)}) for degree {degree}")
        terms = terms[:n_terms]
    return terms


def _spline_design(x, n_knots: int, order: int) -> np.ndarray:
    degree = order - 1
    interior = np.linspace(0.0, 1.0, n_knots + 2)[1:-1]
    knots = np.concatenate([np.zeros(order), interior, np.ones(order)])
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    return BSpline.design_matrix(x, knots, degree).toarray()


def evaluate_basis(spec: BasisSpec, scaled_z) -> np.ndarray:
    """Evaluate the basis at already-scaled covariates; returns ``(m, J)``."""
    scaled_z = np.asarray(scaled_z, dtype=float)
    if scaled_z.ndim == 1:
        scaled_z = scaled_z[:, None]
    m, p = scaled_z.shape
    fam = spec.family
    if fam == "intercept" or p == 0:
        if spec.n_terms not in (None, 1):
            raise ValueError("J exceeds enumerable terms: the intercept basis has one term")
        return np.ones((m, 1))
    if fam == "linear":
        phi = np.column_stack([np.ones(m), scaled_z])
        if spec.n_terms is not None:
            if spec.n_terms > phi.shape[1]:
                raise ValueError(f"J={spec.n_terms} exceeds enumerable terms ({phi.shape[1]})")
            phi = phi[:, : spec.n_terms]
        return phi
    if fam == "cosine":
        terms = cosine_terms(p, spec.n_terms, spec.max_frequency)
        top = max(max(t) for t in terms)
        freqs = np.arange(top + 1)
        # uni[k, g, f] = phi_f(z_gk)
        uni = np.sqrt(2.0) * np.cos(np.pi * scaled_z.T[:, :, None] * freqs)
        uni[:, :, 0] = 1.0
        return _tensor(uni, terms)
    if fam == "polynomial":
        terms = polynomial_terms(p, spec.degree, spec.n_terms)
        uni = scaled_z.T[:, :, None] ** np.arange(spec.degree + 1)
        return _tensor(uni, terms)
    # spline: tensor B-splines; the first product is replaced by the constant,
    # which leaves the span unchanged because B-splines sum to one
    uni = np.stack([_spline_design(scaled_z[:, k], spec.n_knots, spec.order) for k in range(p)])
    k_uni = uni.shape[2]
    terms = sorted(itertools.product(range(k_uni), repeat=p), key=lambda t: (sum(t), t))
    if spec.n_terms is not None:
        if spec.n_terms > len(terms):
            raise ValueError(f"J={spec.n_terms} exceeds enumerable terms ({len(terms)})")
        terms = terms[: spec.n_terms]
    phi = _tensor(uni, terms)
    phi[:, 0] = 1.0
    return phi


def _tensor(uni: np.ndarray, terms) -> np.ndarray:
    p, m, _ = uni.shape
    # skip multiplications by a constant-one zeroth function (cosine, monomials)
    unit_zero = [bool(np.all(uni[k, :, 0] == 1.0)) for k in range(p)]
    out = np.empty((m, len(terms)))
    for c, t in enumerate(terms):
        col = np.ones(m)
        for k, f in enumerate(t):
            if f or not unit_zero[k]:
                col = col * uni[k, :, f]
        out[:, c] = col
    return out


def build_basis(spec: BasisSpec, scaled_z) -> np.ndarray:
    return evaluate_basis(spec, scaled_z)


# ---------------------------------------------------------------------------
# transformer


class SieveBasis(TransformerMixin, BaseEstimator):
    """Scale covariates and expand them into a sieve basis ``Phi``.

    Columns flagged in ``linear_columns`` (for instance one-hot indicators)
    skip the expansion and are appended unscaled after the basis terms.
    Exact duplicate covariate columns are dropped with a warning.

    Parameters
    ----------
    spec : BasisSpec
    linear_columns : sequence of bool, optional
    """

    def __init__(self, spec: BasisSpec = BasisSpec(), linear_columns=None):
        self.spec = spec
        self.linear_columns = linear_columns

    def fit(self, Z, y=None):
        Z = _as_2d(Z)
        p = Z.shape[1]
        flags = np.zeros(p, bool) if self.linear_columns is None else np.asarray(self.linear_columns, bool)
        if flags.shape != (p,):
            raise ValueError("linear_columns must have one flag per covariate")
        keep = []
        for k in range(p):
            if any(np.array_equal(Z[:, k], Z[:, i]) for i in keep):
                warnings.warn(f"covariate column {k} duplicates an earlier column and is ignored",
                              UserWarning, stacklevel=2)
                continue
            keep.append(k)
        keep = np.asarray(keep, dtype=int)
        self.kept_columns_ = keep
        self.smooth_columns_ = keep[~flags[keep]] if keep.size else keep
        self.linear_columns_ = keep[flags[keep]] if keep.size else keep
        _, (self.scale_lo_, self.scale_hi_) = scale_covariates(Z[:, self.smooth_columns_])
        self.n_features_in_ = p
        self.n_terms_ = self.transform(Z[:1]).shape[1]
        return self

    def transform(self, Z):
        check_is_fitted(self, "scale_lo_")
        Z = _as_2d(Z)
        if Z.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} covariates, got {Z.shape[1]}")
        scaled, _ = scale_covariates(Z[:, self.smooth_columns_], self.scale_lo_, self.scale_hi_)
        phi = evaluate_basis(self.spec, scaled)
        if self.linear_columns_.size:
            phi = np.column_stack([phi, Z[:, self.linear_columns_]])
        return phi

    def get_config(self) -> dict:
        check_is_fitted(self, "scale_lo_")
        return {
            "spec": self.spec.to_dict(),
            "kept_columns": self.kept_columns_.tolist(),
            "smooth_columns": self.smooth_columns_.tolist(),
            "linear_columns": self.linear_columns_.tolist(),
            "scale_lo": self.scale_lo_.tolist(),
            "scale_hi": self.scale_hi_.tolist(),
        }


def _as_2d(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.ndim != 2:
        raise ValueError("covariates must be a 2-D array")
    if not np.all(np.isfinite(Z)):
        raise ValueError("non-finite covariate value")
    return Z


# ---------------------------------------------------------------------------
# interacted design


class SieveDesign:
    """Share-interacted design ``xbar kron Phi`` with lazy pure rows.

    Parameters
    ----------
    Phi : ndarray of shape (m, J)
    xbar : ndarray of shape (m, d)
    """

    def __init__(self, Phi, xbar, basis: Optional[SieveBasis] = None):
        self.Phi = np.asarray(Phi, dtype=float)
        self.xbar = np.asarray(xbar, dtype=float)
        if self.Phi.shape[0] != self.xbar.shape[0]:
            raise ValueError("Phi and xbar must have the same number of rows")
        self.basis = basis
        self._design = None

    @property
    def m(self) -> int:
        return self.Phi.shape[0]

    @property
    def d(self) -> int:
        return self.xbar.shape[1]

    @property
    def J(self) -> int:
        return self.Phi.shape[1]

    @property
    def n_coef(self) -> int:
        return self.d * self.J

    @property
    def design(self) -> np.ndarray:
        if self._design is None:
            self._design = kron_rows(self.xbar, self.Phi)
        return self._design

    def pure_rows(self, j: int) -> np.ndarray:
        """Dense ``(m, d*J)`` matrix with rows ``e_j kron Phi(z_g)``."""
        out = np.zeros((self.m, self.n_coef))
        out[:, j * self.J:(j + 1) * self.J] = self.Phi
        return out

    def pure_sum(self, j: int, weights) -> np.ndarray:
        """``sum_g weights_g (e_j kron Phi(z_g))`` without forming pure rows."""
        out = np.zeros(self.n_coef)
        out[j * self.J:(j + 1) * self.J] = self.Phi.T @ np.asarray(weights, dtype=float)
        return out

    def block(self, theta, j: int) -> np.ndarray:
        return np.asarray(theta)[j * self.J:(j + 1) * self.J]

    def predict_pure(self, theta, j: int) -> np.ndarray:
        """``gamma(e_j, z_g)`` for every row."""
        return self.Phi @ self.block(theta, j)

    def coef_matrix(self, theta) -> np.ndarray:
        """Reshape ``theta`` into ``(J, d)`` so that ``Phi @ C`` gives eta(z)."""
        return np.asarray(theta).reshape(self.d, self.J).T

    def predict(self, theta) -> np.ndarray:
        """``gamma(xbar_g, z_g)`` without forming the full design."""
        eta = self.Phi @ self.coef_matrix(theta)
        return np.einsum("gj,gj->g", eta, self.xbar)


def kron_rows(xbar, Phi) -> np.ndarray:
    """Row-wise Kronecker product, group-major column layout."""
    xbar = np.asarray(xbar, dtype=float)
    Phi = np.asarray(Phi, dtype=float)
    m = Phi.shape[0]
    return (xbar[:, :, None] * Phi[:, None, :]).reshape(m, -1)


def interact(Phi, xbar, basis: Optional[SieveBasis] = None) -> SieveDesign:
    return SieveDesign(Phi, xbar, basis)
