"""Bounds on the bias of the group-mean estimates when the covariates do not
fully account for confounding.

With residual scale ``sigma`` and representer scale ``nu``, an omitted
confounder that explains a share ``C_gamma^2`` of the outcome residual and
raises the representer second moment by a factor governed by ``C_alpha``
moves the estimand by at most ``rho * sigma * nu * C_gamma * C_alpha``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .dml import EcoDML, _jsonify
from .ridge import svd_cache
from .riesz import riesz_loo_nu2
from .sieve import SieveDesign


def bias_bound(sigma_hat, nu_hat, rho, c_gamma, c_alpha):
    """``sigma * nu * rho * C_gamma * C_alpha``; broadcasts over arrays."""
    c_gamma = np.asarray(c_gamma, dtype=float)
    c_alpha = np.asarray(c_alpha, dtype=float)
    if np.any(c_gamma < 0) or np.any(c_alpha < 0):
        raise ValueError("sensitivity parameters C_gamma and C_alpha must be nonnegative")
    if not 0 <= rho <= 1:
        raise ValueError("rho must lie in [0, 1]")
    if sigma_hat < 0 or nu_hat < 0:
        raise ValueError("sigma and nu must be nonnegative")
    out = sigma_hat * nu_hat * rho * c_gamma * c_alpha
    return float(out) if out.ndim == 0 else out


def robustness_value(scale: float, delta: float, rho: float = 1.0) -> float:
    """Largest common R^2 level of both sensitivity parameters keeping the
    bias bound at or below ``delta``.

    Setting ``C_gamma^2 = RV`` and ``C_alpha^2 = RV / (1 - RV)`` gives the
    bound ``rho * scale * RV / sqrt(1 - RV)``; its root in ``(0, 1)`` solves
    a quadratic in ``RV``.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    k = rho * scale
    if k <= 0:
        return 1.0
    d2 = delta * delta
    return float(2 * d2 / (d2 + np.sqrt(d2 * d2 + 4 * k * k * d2)))


def rv_bound(scale: float, rv: float, rho: float = 1.0) -> float:
    """Bias bound when both R^2 parameters equal ``rv``."""
    return float(rho * scale * rv / np.sqrt(1 - rv))


@dataclass
class CovariateBenchmark:
    """Full-versus-drop comparison for one covariate.

    ``r2_y`` is the partial R^2 of the outcome fit attributable to the
    covariate (so ``c_gamma = sqrt(r2_y)``); ``c_alpha_sq`` is the relative
    increase in the representer second moment.
    """

    covariate: str
    r2_y: float
    c_gamma: float
    c_alpha_sq: float
    c_alpha: float
    rho: float
    delta_beta: float
    bound: float

    def to_dict(self) -> dict:
        return _jsonify(self.__dict__)


@dataclass
class SensitivityReport:
    """Sensitivity summary for one group mean or a linear contrast."""

    target: list
    estimate: float
    std_error: float
    sigma_hat: float
    nu2: float
    rho: float = 1.0
    robustness_values: dict = field(default_factory=dict)
    benchmarks: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def nu_hat(self) -> float:
        return float(np.sqrt(max(self.nu2, 0.0)))

    @property
    def S(self) -> float:
        return self.sigma_hat * self.nu_hat

    def bound(self, c_gamma, c_alpha, rho: Optional[float] = None):
        return bias_bound(self.sigma_hat, self.nu_hat, self.rho if rho is None else rho, c_gamma, c_alpha)

    def robustness_value(self, delta: float) -> float:
        return robustness_value(self.S, delta, self.rho)

    def contour_grid(self, c_gamma, c_alpha, rho: float = 1.0) -> pd.DataFrame:
        """Bias bound and shifted estimate over the grid of parameter values."""
        cg, ca = np.meshgrid(np.asarray(c_gamma, float), np.asarray(c_alpha, float), indexing="ij")
        cg, ca = cg.ravel(), ca.ravel()
        b = np.atleast_1d(self.bound(cg, ca, rho))
        return pd.DataFrame({
            "c_gamma": cg, "c_alpha": ca, "bound": b,
            "lower": self.estimate - b, "upper": self.estimate + b,
        })

    def to_dict(self) -> dict:
        return _jsonify({
            "target": self.target,
            "estimate": self.estimate,
            "std_error": self.std_error,
            "sigma_hat": self.sigma_hat,
            "nu2_raw": self.nu2,
            "nu_hat": self.nu_hat,
            "S": self.S,
            "rho": self.rho,
            "zero_crossing_bound": abs(self.estimate),
            "robustness_values": [
                {"delta": d, "rv": rv} for d, rv in self.robustness_values.items()
            ],
            "benchmarks": [b.to_dict() for b in self.benchmarks],
            "config": self.config,
        })

    def to_json(self, path=None, indent=2) -> str:
        text = json.dumps(self.to_dict(), indent=indent)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text


def target_vector(target, d: int) -> np.ndarray:
    """Group index or contrast weights as a length-``d`` vector."""
    if np.isscalar(target):
        j = int(target)
        if not 0 <= j < d:
            raise IndexError(f"group index {j} out of range for d={d}")
        c = np.zeros(d)
        c[j] = 1.0
        return c
    c = np.asarray(target, dtype=float).reshape(-1)
    if c.size != d:
        raise ValueError(f"contrast has length {c.size}, expected {d}")
    if not np.all(np.isfinite(c)):
        raise ValueError("contrast weights must be finite")
    return c


def sensitivity_report(model: EcoDML, target=0, rho: float = 1.0, deltas=None) -> SensitivityReport:
    """Sensitivity summary from a fitted estimator.

    ``deltas`` defaults to one and two standard errors and the absolute
    estimate (the bias that would move the estimate to zero).
    """
    d = model.coef_.size
    c = target_vector(target, d)
    est, se, _ = model.result_.contrast(c)
    sigma = float(np.sqrt(np.mean(model.residuals_ ** 2)))
    nu2 = float(c @ model.nuisance_.nu_gram @ c)
    report = SensitivityReport(target=c.tolist(), estimate=est, std_error=se, sigma_hat=sigma,
                               nu2=nu2, rho=rho)
    if deltas is None:
        deltas = [se, 2 * se, abs(est)]
    for delta in deltas:
        if delta > 0:
            report.robustness_values[float(delta)] = report.robustness_value(delta)
    return report


def _held_out_fit(model: EcoDML, data, c):
    """Leave-one-out outcome sum of squares and representer ``nu^2`` for
    contrast ``c`` at the model's fitted penalty."""
    Phi = model.sieve_.transform(data.z)
    design = SieveDesign(Phi, data.xbar, model.sieve_)
    w = model.riesz_weight_
    sw = np.ones(data.m) if w is None else np.sqrt(w)
    svd = svd_cache(design.design * sw[:, None])
    lam = model.nuisance_.lam_sum
    h = svd.leverage(svd.D ** 2 / (svd.D ** 2 + lam))
    rss = float(np.sum((sw * model.residuals_ / (1 - h)) ** 2))
    T = np.zeros((data.m, svd.V.shape[1]))
    for j in np.flatnonzero(c):
        T += (c[j] * model.u_[:, j])[:, None] * (Phi @ svd.V[j * design.J:(j + 1) * design.J])
    return rss, riesz_loo_nu2(svd, T, lam, riesz_weight=w)


def _relative_gain(full: float, drop: float) -> float:
    return max((full - drop) / drop, 0.0) if drop > 0 else 0.0


def benchmark_covariates(data, basis=None, target=0, lam="auto", lambda_grid=None, weighting="car",
                         rho: float = 1.0, full_model: Optional[EcoDML] = None):
    """Refit without each covariate in turn and compare with the full fit.

    Both sensitivity parameters are measured on held-out fit: the outcome
    partial R^2 from leave-one-out residuals and the representer gain from
    the leave-one-out ``nu^2``. A covariate that only fits noise therefore
    benchmarks near zero. Returns a list of :class:`CovariateBenchmark` for
    the requested target.
    """
    from .dml import fit_dataset
    from .sieve import BasisSpec

    basis = BasisSpec("linear") if basis is None else basis
    if data.p < 1:
        raise ValueError("benchmarking needs at least one covariate")
    opts = dict(basis=basis, lam=lam, lambda_grid=lambda_grid, weighting=weighting, use_bounds=False)
    full = full_model if full_model is not None else fit_dataset(data, **opts)
    c = target_vector(target, data.d)
    report = sensitivity_report(full, c, rho=rho, deltas=[])
    rss_full, nu2_full = _held_out_fit(full, data, c)
    alpha_full = full.nuisance_.riesz.alpha @ c
    gamma_full = full.nuisance_.fitted
    out = []
    for k in range(data.p):
        sub = data.drop_covariates([k])
        drop = fit_dataset(sub, **opts)
        rss_drop, nu2_drop = _held_out_fit(drop, sub, c)
        r2_y = 1.0 - rss_full / rss_drop if rss_drop > 0 else 0.0
        r2_y = min(max(r2_y, 0.0), 1.0)
        c_alpha_sq = _relative_gain(nu2_full, nu2_drop)
        dg, da = gamma_full - drop.nuisance_.fitted, alpha_full - drop.nuisance_.riesz.alpha @ c
        if np.std(dg) > 0 and np.std(da) > 0:
            rho_k = float(np.corrcoef(dg, da)[0, 1])
        else:
            rho_k = 0.0
        c_gamma, c_alpha = float(np.sqrt(r2_y)), float(np.sqrt(c_alpha_sq))
        out.append(CovariateBenchmark(
            covariate=data.covariate_names[k], r2_y=r2_y, c_gamma=c_gamma, c_alpha_sq=c_alpha_sq,
            c_alpha=c_alpha, rho=rho_k, delta_beta=float(c @ (full.coef_ - drop.coef_)),
            bound=bias_bound(report.sigma_hat, report.nu_hat, min(abs(rho_k), 1.0), c_gamma, c_alpha),
        ))
    return out
