"""Debiased estimator of group-level conditional means from aggregate data.

The outcome regression ``gamma(xbar, z) = eta(z)' xbar`` and the per-group
Riesz representers share one sieve design and one penalty. The estimate for
group ``j`` is the sample mean of the orthogonal score

    psi_gj = u_gj gamma(e_j, z_g) + w_g alpha_j(xbar_g, z_g) (ybar_g - gamma(xbar_g, z_g)).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_shares, check_outcome, check_sizes, check_covariates, check_weights
from .ridge import (
    SvdCache,
    default_lambda_grid,
    loocv_path,
    ridge_solve,
    ridge_solve_bounded,
    svd_cache,
)
from .riesz import RieszFit, riesz_solve
from .sieve import BasisSpec, SieveBasis, SieveDesign

WEIGHTINGS = ("car", "car-u")


@dataclass
class NuisanceFit:
    """Fitted outcome regression and representers on a shared design."""

    theta: np.ndarray
    lam: float
    lam_sum: float
    fitted: np.ndarray
    gamma_pure: np.ndarray
    riesz: RieszFit
    nu_gram: np.ndarray
    loocv_errors: Optional[np.ndarray] = None
    lambda_grid: Optional[np.ndarray] = None
    rank: int = 0
    bounded: bool = False


@dataclass
class EstimateResult:
    """Point estimates, score covariance and normal confidence intervals.

    ``beta_clipped`` is a convenience copy of ``beta`` clipped to declared
    outcome bounds; inference always refers to the raw ``beta``.
    """

    beta: np.ndarray
    vcov: np.ndarray
    level: float = 0.95
    group_names: Sequence[str] = ()
    beta_clipped: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    method: str = "dml"

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.vcov = np.asarray(self.vcov, dtype=float)
        if not self.group_names:
            self.group_names = tuple(f"x{j}" for j in range(self.beta.size))

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    def ci(self, level: Optional[float] = None):
        level = self.level if level is None else level
        half = normal_quantile(level) * self.std_errors
        return self.beta - half, self.beta + half

    def contrast(self, c, level: Optional[float] = None):
        """Estimate, standard error and interval for ``c' beta``."""
        c = np.asarray(c, dtype=float).reshape(-1)
        if c.size != self.beta.size:
            raise ValueError(f"contrast has length {c.size}, expected {self.beta.size}")
        if not np.all(np.isfinite(c)):
            raise ValueError("contrast weights must be finite")
        est = float(c @ self.beta)
        se = float(np.sqrt(max(c @ self.vcov @ c, 0.0)))
        half = normal_quantile(self.level if level is None else level) * se
        return est, se, (est - half, est + half)

    def to_dict(self) -> dict:
        lo, hi = self.ci()
        out = {
            "method": self.method,
            "groups": list(self.group_names),
            "beta": self.beta.tolist(),
            "std_errors": self.std_errors.tolist(),
            "level": self.level,
            "ci_lower": lo.tolist(),
            "ci_upper": hi.tolist(),
            "vcov": self.vcov.tolist(),
        }
        if self.beta_clipped is not None:
            out["beta_clipped"] = np.asarray(self.beta_clipped).tolist()
        out["diagnostics"] = _jsonify(self.diagnostics)
        out["config"] = _jsonify(self.config)
        return out

    def to_json(self, path=None, indent=2) -> str:
        text = json.dumps(self.to_dict(), indent=indent)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text


def normal_quantile(level: float) -> float:
    if not 0 < level < 1:
        raise ValueError("confidence level must lie in (0, 1)")
    return float(stats.norm.ppf(0.5 + level / 2))


def _jsonify(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonify(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def size_weights(n, xbar) -> np.ndarray:
    """``u_gj = n_g xbar_gj / mean_g(n xbar_j)`` for every group."""
    mass = np.asarray(n, dtype=float)[:, None] * np.asarray(xbar, dtype=float)
    total = mass.mean(axis=0)
    if np.any(total <= 0):
        j = int(np.flatnonzero(total <= 0)[0])
        raise ValueError(f"group absent: group {j} has zero mass")
    return mass / total


def fit_nuisance(design: SieveDesign, ybar, u, lam="auto", lambda_grid=None, loss_weight=None,
                 riesz_weight=None, bounds=None, decomposition="auto") -> NuisanceFit:
    """Fit the outcome regression and every group's representer.

    Parameters
    ----------
    lam : float or "auto"
        Penalty in the empirical-mean convention; the sum-of-squares solves
        use ``m * lam``. "auto" picks it by closed-form leave-one-out error.
    loss_weight : ndarray of shape (m,), optional
        Row weights in the outcome regression loss.
    riesz_weight : ndarray of shape (m,), optional
        Row weights in the quadratic term of the Riesz loss.
    """
    m, d = design.m, design.d
    y = np.asarray(ybar, dtype=float)
    X = design.design
    sw = None if loss_weight is None else np.sqrt(np.asarray(loss_weight, dtype=float))
    rw = None if riesz_weight is None else np.sqrt(np.asarray(riesz_weight, dtype=float))

    Xg = X if sw is None else X * sw[:, None]
    yg = y if sw is None else y * sw
    svd_g = svd_cache(Xg, method=decomposition)

    errors = grid = None
    if isinstance(lam, str):
        if lam != "auto":
            raise ValueError(f"penalty must be a number or 'auto', got {lam!r}")
        grid = default_lambda_grid() if lambda_grid is None else np.asarray(lambda_grid, dtype=float)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            lam_sum, errors = loocv_path(svd_g, yg, m * grid)
        lam_mean = lam_sum / m
    else:
        lam_mean = float(lam)
        lam_sum = m * lam_mean

    bounded = bounds is not None
    if bounded:
        J = design.J
        start = np.zeros(design.n_coef)
        start[::J] = 0.5 * (bounds[0] + bounds[1])
        rows = np.unique(design.Phi, axis=0)
        A = np.zeros((d * rows.shape[0], design.n_coef))
        for j in range(d):
            A[j * rows.shape[0]:(j + 1) * rows.shape[0], j * J:(j + 1) * J] = rows
        gfit = ridge_solve_bounded(svd_g, A, yg, lam_sum, bounds, start=start)
    else:
        gfit = ridge_solve(svd_g, yg, lam_sum, hat=False)
    theta = gfit.theta
    fitted = design.predict(theta)
    gamma_pure = design.Phi @ design.coef_matrix(theta)

    if _same_weights(sw, rw):
        svd_a = svd_g
    else:
        svd_a = svd_cache(X if rw is None else X * rw[:, None], method=decomposition)
    B = np.zeros((design.n_coef, d))
    for j in range(d):
        B[:, j] = design.pure_sum(j, u[:, j])
    riesz = riesz_solve(svd_a, B, lam_sum, X=X)
    VtB = svd_a.V.T @ B
    D2 = svd_a.D ** 2
    kern = 1.0 / D2 if lam_sum == 0 else 2.0 / (D2 + lam_sum) - D2 / (D2 + lam_sum) ** 2
    nu_gram = (VtB.T * kern) @ VtB / m
    return NuisanceFit(
        theta=theta, lam=lam_mean, lam_sum=lam_sum, fitted=fitted, gamma_pure=gamma_pure,
        riesz=riesz, nu_gram=nu_gram, loocv_errors=errors, lambda_grid=grid,
        rank=svd_g.rank, bounded=bounded,
    )


def _same_weights(a, b) -> bool:
    if a is None and b is None:
        return True
    if a is None or b is None:
        return False
    return bool(np.array_equal(a, b))


def orthogonal_scores(ybar, u, gamma_fitted, gamma_pure, alpha, riesz_weight=None) -> np.ndarray:
    resid = np.asarray(ybar, dtype=float) - gamma_fitted
    w = 1.0 if riesz_weight is None else np.asarray(riesz_weight, dtype=float)[:, None]
    return u * gamma_pure + w * alpha * resid[:, None]


class EcoDML(RegressorMixin, BaseEstimator):
    """Debiased estimator of group means from aggregate shares and outcomes.

    Parameters
    ----------
    basis : BasisSpec
        Sieve over the covariates. Defaults to covariates entering linearly.
    lam : float or "auto"
        Ridge penalty in the empirical-mean convention, shared by the
        outcome regression and the representers. "auto" selects it by
        leave-one-out error of the outcome regression.
    lambda_grid : array-like, optional
        Candidate penalties for "auto"; defaults to 50 log-spaced values
        from 1e-8 to 1e2.
    weighting : {"car", "car-u"}
        "car-u" weights every regression by relative population size.
    bounds : tuple of float, optional
        Known outcome range; constrains ``gamma(e_j, z)`` to it.
    level : float
        Confidence level of reported intervals.
    decomposition : {"auto", "svd", "gram"}
        How the design is decomposed.

    Attributes
    ----------
    coef_ : ndarray of shape (d,)
        Estimated group means.
    vcov_ : ndarray of shape (d, d)
        Sample covariance of the scores divided by ``m``.
    scores_ : ndarray of shape (m, d)
    lambda_ : float
    nuisance_ : NuisanceFit
    result_ : EstimateResult

    Examples
    --------
    >>> import numpy as np
    >>> X = np.array([[0.2, 0.8], [0.5, 0.5], [0.9, 0.1], [0.4, 0.6]])
    >>> y = X @ np.array([0.3, 0.7])
    >>> EcoDML(basis=BasisSpec("intercept"), lam=0.0).fit(X, y).coef_.round(6)
    array([0.3, 0.7])
    """

    def __init__(self, basis: BasisSpec = BasisSpec("linear"), lam="auto", lambda_grid=None,
                 weighting: str = "car", bounds=None, level: float = 0.95,
                 decomposition: str = "auto"):
        self.basis = basis
        self.lam = lam
        self.lambda_grid = lambda_grid
        self.weighting = weighting
        self.bounds = bounds
        self.level = level
        self.decomposition = decomposition

    def fit(self, X, y, Z=None, n=None, sample_weight=None, linear_columns=None, group_names=()):
        """Fit on shares ``X`` (m, d), outcomes ``y``, covariates ``Z`` (m, p),
        population sizes ``n`` and optional precision weights."""
        xbar = check_shares(X)
        m, d = xbar.shape
        y = check_outcome(y, m, self.bounds)
        Z = check_covariates(Z, m)
        n = check_sizes(n, m)
        pw = check_weights(sample_weight, m)
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")

        u = size_weights(n, xbar)
        w = n / n.mean() if self.weighting == "car-u" else None
        loss_w = w
        if pw is not None:
            loss_w = pw if w is None else w * pw

        self.sieve_ = SieveBasis(self.basis, linear_columns).fit(Z)
        Phi = self.sieve_.transform(Z)
        design = SieveDesign(Phi, xbar, self.sieve_)
        self.nuisance_ = fit_nuisance(
            design, y, u, lam=self.lam, lambda_grid=self.lambda_grid, loss_weight=loss_w,
            riesz_weight=w, bounds=self.bounds, decomposition=self.decomposition,
        )
        nu = self.nuisance_
        psi = orthogonal_scores(y, u, nu.fitted, nu.gamma_pure, nu.riesz.alpha, w)
        self.scores_ = psi
        self.coef_ = psi.mean(axis=0)
        self.vcov_ = np.atleast_2d(np.cov(psi, rowvar=False, ddof=1)) / m
        self.lambda_ = nu.lam
        self.n_groups_ = d
        self.n_features_in_ = d
        self.residuals_ = y - nu.fitted
        self.u_ = u
        self.riesz_weight_ = w

        clipped = None
        if self.bounds is not None:
            clipped = np.clip(self.coef_, *self.bounds)
        diagnostics = {
            "lambda": nu.lam,
            "lambda_sum": nu.lam_sum,
            "alpha_second_moment": nu.riesz.second_moment,
            "nu2": np.diag(nu.nu_gram),
            "max_u": u.max(axis=0),
            "design_rank": nu.rank,
            "n_coef": design.n_coef,
            "m": m,
        }
        self.result_ = EstimateResult(
            beta=self.coef_, vcov=self.vcov_, level=self.level,
            group_names=tuple(group_names) or tuple(f"x{j}" for j in range(d)),
            beta_clipped=clipped, diagnostics=diagnostics, config=self.get_config(),
        )
        return self

    def get_config(self) -> dict:
        lam = self.lam if isinstance(self.lam, str) else float(self.lam)
        return {
            "basis": self.basis.to_dict(),
            "lam": lam,
            "lambda_grid": None if self.lambda_grid is None else np.asarray(self.lambda_grid).tolist(),
            "weighting": self.weighting,
            "bounds": None if self.bounds is None else [float(b) for b in self.bounds],
            "level": self.level,
            "decomposition": self.decomposition,
        }

    def predict_eta(self, Z=None, m=None) -> np.ndarray:
        """Coefficient functions ``eta(z)`` at covariates ``Z``; shape (m, d)."""
        check_is_fitted(self, "nuisance_")
        if Z is None:
            Z = np.zeros((1 if m is None else m, 0))
        Phi = self.sieve_.transform(check_covariates(Z, None))
        return Phi @ self.nuisance_.theta.reshape(self.n_groups_, -1).T

    def predict(self, X, Z=None) -> np.ndarray:
        """Fitted conditional mean ``gamma(xbar, z)``."""
        xbar = check_shares(X)
        eta = self.predict_eta(Z, m=xbar.shape[0])
        return np.einsum("gj,gj->g", eta, xbar)

    def score(self, X, y, Z=None, sample_weight=None):
        from sklearn.metrics import r2_score

        return r2_score(y, self.predict(X, Z), sample_weight=sample_weight)

    def contrast(self, c, level=None):
        check_is_fitted(self, "result_")
        return self.result_.contrast(c, level)


def estimate(data, basis: BasisSpec = BasisSpec("linear"), lam="auto", lambda_grid=None,
             weighting="car", use_bounds=True, level=0.95, sample_weight=None,
             decomposition="auto") -> EstimateResult:
    """Fit :class:`EcoDML` to an :class:`~ecoinfer.dataset.AggregateDataset`."""
    model = fit_dataset(data, basis=basis, lam=lam, lambda_grid=lambda_grid, weighting=weighting,
                        use_bounds=use_bounds, level=level, sample_weight=sample_weight,
                        decomposition=decomposition)
    return model.result_


def fit_dataset(data, basis: BasisSpec = BasisSpec("linear"), lam="auto", lambda_grid=None,
                weighting="car", use_bounds=True, level=0.95, sample_weight=None,
                decomposition="auto") -> EcoDML:
    model = EcoDML(
        basis=basis, lam=lam, lambda_grid=lambda_grid, weighting=weighting,
        bounds=data.outcome_bounds if use_bounds else None, level=level,
        decomposition=decomposition,
    )
    return model.fit(
        data.xbar, data.ybar, data.z, data.n, sample_weight=sample_weight,
        linear_columns=data.linear_covariates, group_names=data.group_names,
    )


# ---------------------------------------------------------------------------
# baseline


class GoodmanRegression(RegressorMixin, BaseEstimator):
    """No-intercept least squares of outcomes on shares.

    Standard errors are heteroskedasticity robust (HC1 sandwich).

    Parameters
    ----------
    level : float
        Confidence level of reported intervals.
    """

    def __init__(self, level: float = 0.95):
        self.level = level

    def fit(self, X, y, sample_weight=None, group_names=()):
        xbar = check_shares(X)
        m, d = xbar.shape
        y = check_outcome(y, m, None)
        w = np.ones(m) if sample_weight is None else check_weights(sample_weight, m)
        if m <= d:
            raise ValueError("need more geographies than groups")
        sw = np.sqrt(w)
        Xw, yw = xbar * sw[:, None], y * sw
        if np.linalg.matrix_rank(Xw) < d:
            raise np.linalg.LinAlgError("shares are collinear; least squares is not identified")
        coef, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
        bread = np.linalg.inv(Xw.T @ Xw)
        e = yw - Xw @ coef
        meat = (Xw * e[:, None] ** 2).T @ Xw
        self.coef_ = coef
        self.vcov_ = bread @ meat @ bread * m / (m - d)
        self.n_features_in_ = d
        self.result_ = EstimateResult(
            beta=coef, vcov=self.vcov_, level=self.level,
            group_names=tuple(group_names) or tuple(f"x{j}" for j in range(d)),
            config={"weighted": sample_weight is not None}, method="goodman",
        )
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return check_shares(X) @ self.coef_


def goodman(data, weighted: bool = False, level: float = 0.95) -> EstimateResult:
    """Goodman's ecological regression, optionally weighted by population size."""
    model = GoodmanRegression(level=level).fit(
        data.xbar, data.ybar, sample_weight=data.n if weighted else None,
        group_names=data.group_names,
    )
    return model.result_
