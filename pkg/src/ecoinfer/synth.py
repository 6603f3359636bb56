"""Synthetic aggregate data from a truncated-normal ecological model.

Shares and covariates are jointly Normal (shares restricted to the simplex),
local group means ``B_g`` are Normal around ``mu_b + Lambda' z_g`` truncated to
the unit cube, and outcomes satisfy ``ybar_g = B_g' xbar_g`` exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import pandas as pd
from scipy import special

from .dataset import AggregateDataset

MAX_REJECTION_ROUNDS = 10_000
GIBBS_BURN_IN = 1_000


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the generator.

    Parameters
    ----------
    m, d, p : int
        Geographies, groups and covariates.
    mu_b : sequence of float
        Mean of the local coefficients when ``z = 0``.
    sigma_b : d x d nested sequence
        Covariance of the local coefficients before truncation.
    r2_xz, r2_bz : float
        Population R^2 of shares and of local coefficients on covariates.
    dirichlet_alpha : sequence of float, optional
        Concentration of the Dirichlet whose first two moments the shares
        follow; defaults to ``(1, ..., d)``.
    """

    m: int = 500
    d: int = 2
    p: int = 3
    mu_b: tuple = (0.3, 0.7)
    sigma_b: tuple = ((0.04, 0.02), (0.02, 0.04))
    r2_xz: float = 0.5
    r2_bz: float = 0.5
    seed: int = 0
    dirichlet_alpha: Optional[tuple] = None

    def __post_init__(self):
        if self.m < 2 or self.d < 1 or self.p < 0:
            raise ValueError("need m >= 2, d >= 1 and p >= 0")
        mu = np.asarray(self.mu_b, dtype=float)
        S = np.asarray(self.sigma_b, dtype=float)
        if mu.shape != (self.d,) or S.shape != (self.d, self.d):
            raise ValueError("mu_b and sigma_b must match d")
        if not np.allclose(S, S.T) or np.linalg.eigvalsh(S).min() < -1e-12:
            raise ValueError("sigma_b must be symmetric positive semidefinite")
        for r2 in (self.r2_xz, self.r2_bz):
            if not 0 <= r2 < 1:
                raise ValueError("R^2 targets must lie in [0, 1)")
        object.__setattr__(self, "mu_b", tuple(float(v) for v in mu))
        object.__setattr__(self, "sigma_b", tuple(tuple(float(v) for v in row) for row in S))
        if self.dirichlet_alpha is not None:
            object.__setattr__(self, "dirichlet_alpha", tuple(float(a) for a in self.dirichlet_alpha))

    def with_seed(self, seed: int) -> "SynthConfig":
        return SynthConfig(**{**asdict(self), "seed": int(seed)})

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mu_b"] = list(self.mu_b)
        out["sigma_b"] = [list(r) for r in self.sigma_b]
        out["dirichlet_alpha"] = None if self.dirichlet_alpha is None else list(self.dirichlet_alpha)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthConfig":
        obj = dict(obj)
        obj["mu_b"] = tuple(obj["mu_b"])
        obj["sigma_b"] = tuple(tuple(r) for r in obj["sigma_b"])
        if obj.get("dirichlet_alpha") is not None:
            obj["dirichlet_alpha"] = tuple(obj["dirichlet_alpha"])
        return cls(**obj)


def study1_config(seed: int = 0, m: int = 500) -> SynthConfig:
    """Two groups, three confounding covariates, moderate confounding."""
    return SynthConfig(
        m=m, d=2, p=3, mu_b=(0.3, 0.7), sigma_b=_equicorrelated(2, 0.02),
        r2_xz=0.5, r2_bz=0.5, seed=seed,
    )


def study2_config(m: int, d: int, p: int, r2_xz: float, seed: int = 0, r2_bz: float = 0.2) -> SynthConfig:
    return SynthConfig(
        m=m, d=d, p=p, mu_b=tuple(np.linspace(0.3, 0.7, d)), sigma_b=_equicorrelated(d, 0.005),
        r2_xz=r2_xz, r2_bz=r2_bz, seed=seed,
    )


def _equicorrelated(d: int, scale: float):
    S = scale * (np.eye(d) + np.ones((d, d)))
    return tuple(tuple(r) for r in S)


@dataclass(eq=False)
class SynthDataset:
    data: AggregateDataset
    B: np.ndarray
    beta_true: np.ndarray
    Lambda: np.ndarray
    Gamma: np.ndarray
    eta: np.ndarray
    config: SynthConfig
    extra: dict = field(default_factory=dict)

    def truth_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"id": self.data.ids})
        for j, name in enumerate(self.data.group_names):
            frame[f"B_{name}"] = self.B[:, j]
        return frame

    def write(self, data_path, truth_path=None) -> None:
        from .dataset import save_csv

        save_csv(self.data, data_path)
        if truth_path is not None:
            self.truth_frame().to_csv(truth_path, index=False)
            meta = {"beta_true": self.beta_true.tolist(), "config": self.config.to_dict()}
            with open(str(truth_path) + ".json", "w", encoding="utf-8") as fh:
                json.dump(meta, fh, indent=2)


# ---------------------------------------------------------------------------
# building blocks


def dirichlet_moments(alpha):
    """Mean vector and covariance matrix of a Dirichlet distribution."""
    a = np.asarray(alpha, dtype=float)
    a0 = a.sum()
    mean = a / a0
    cov = (np.diag(a) * a0 - np.outer(a, a)) / (a0 ** 2 * (a0 + 1))
    return mean, cov


def toeplitz_covariance(p: int) -> np.ndarray:
    """Symmetric Toeplitz matrix with diagonals ``0.25 exp(-(k-1)/2)``."""
    from scipy.linalg import toeplitz

    if p == 0:
        return np.zeros((0, 0))
    return toeplitz(0.25 * np.exp(-np.arange(p) / 2.0))


def _sym_sqrt(S: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(S)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _share_factor(Sigma_x: np.ndarray) -> np.ndarray:
    """``L`` with ``L L' = Sigma_x`` and ``1' L = 0`` (rank d - 1)."""
    vals, vecs = np.linalg.eigh(Sigma_x)
    keep = vals > 1e-12 * max(vals.max(), 1e-300)
    return vecs[:, keep] * np.sqrt(vals[keep])


def calibrate_r2(raw, target: float, context: str, *, T=None, Sigma_x=None, Sigma_b=None) -> np.ndarray:
    """Scale a raw Gaussian matrix to hit a population R^2 target.

    ``context="gamma"`` builds the (p, d) share/covariate cross-covariance:
    rows sum to zero and every share has R^2 equal to ``target`` when
    ``p >= d - 1`` (otherwise the mean R^2 across shares is matched).
    ``context="lambda"`` scales each column of the (p, d) coefficient
    matrix so that ``B_j`` has R^2 ``target`` on ``z``.
    """
    if not 0 <= target < 1:
        raise ValueError("R^2 target must lie in [0, 1)")
    raw = np.asarray(raw, dtype=float)
    if target == 0 or raw.size == 0:
        return np.zeros_like(raw)
    if context == "lambda":
        sb = np.diag(np.asarray(Sigma_b, dtype=float))
        var = np.einsum("kj,kl,lj->j", raw, T, raw)
        want = target / (1 - target) * sb
        return raw * np.sqrt(want / np.where(var > 0, var, 1.0))
    if context == "gamma":
        centered = raw - raw.mean(axis=1, keepdims=True)
        L = _share_factor(Sigma_x)
        if L.shape[1] == 0:
            return np.zeros_like(raw)
        T_half = _sym_sqrt(T)
        T_ihalf = np.linalg.pinv(T_half)
        # raw coupling between whitened shares and whitened covariates
        K = np.linalg.pinv(L) @ centered.T @ T_ihalf
        P, _, Qt = np.linalg.svd(K, full_matrices=False)
        polar = P @ Qt
        lev = np.einsum("jr,rs,js->j", L, P @ P.T, L) / np.einsum("jr,jr->j", L, L)
        scale = np.sqrt(target / lev.mean())
        scale = min(scale, 0.95)
        K = scale * polar
        return T_half @ K.T @ L.T
    raise ValueError(f"unknown calibration context {context!r}")


def population_r2_xz(Gamma, T, Sigma_x) -> np.ndarray:
    """Population R^2 of each share on the covariates before truncation."""
    Tinv = np.linalg.pinv(T)
    return np.einsum("kj,kl,lj->j", Gamma, Tinv, Gamma) / np.diag(Sigma_x)


# ---------------------------------------------------------------------------
# samplers


def truncated_mvn_sample(mean, cov, box, rng, size: Optional[int] = None):
    """Draw from ``N(mean, cov)`` truncated to ``box = (lo, hi)``.

    ``mean`` may be a single vector or one vector per draw. Rejection
    sampling is used first; rows that keep failing fall back to a
    coordinate-wise Gibbs sampler.
    """
    mean = np.asarray(mean, dtype=float)
    single = mean.ndim == 1 and size is None
    M = np.atleast_2d(mean)
    if size is not None and M.shape[0] == 1:
        M = np.repeat(M, size, axis=0)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (M.shape[1],)) for b in box)
    if np.any(lo >= hi):
        raise ValueError("box must be nondegenerate")
    if not np.any(cov):
        out = np.clip(M, lo, hi)
        return out[0] if single else out
    factor = _sym_sqrt(cov)
    k, d = M.shape
    out = np.empty((k, d))
    pending = np.arange(k)
    for _ in range(MAX_REJECTION_ROUNDS):
        if pending.size == 0:
            break
        draw = M[pending] + rng.standard_normal((pending.size, d)) @ factor
        ok = np.all((draw >= lo) & (draw <= hi), axis=1)
        out[pending[ok]] = draw[ok]
        pending = pending[~ok]
    if pending.size:
        out[pending] = _gibbs_truncated(M[pending], cov, lo, hi, rng)
    return out[0] if single else out


def _truncnorm_draw(mean, sd, lo, hi, rng):
    """Inverse-CDF draws from ``N(mean, sd^2)`` on ``[lo, hi]``, vectorized.

    Upper-tail intervals are reflected so the CDF is evaluated where it is
    accurate.
    """
    a, b = (lo - mean) / sd, (hi - mean) / sd
    flip = a > 0
    a, b = np.where(flip, -b, a), np.where(flip, -a, b)
    pa, pb = special.ndtr(a), special.ndtr(b)
    t = special.ndtri(pa + rng.uniform(size=np.shape(mean)) * (pb - pa))
    t = np.where(flip, -t, t)
    return np.clip(mean + sd * t, lo, hi)


def _gibbs_truncated(means, cov, lo, hi, rng, burn_in: Optional[int] = None):
    """Coordinate-wise Gibbs sampler run on every row of ``means`` at once."""
    burn_in = GIBBS_BURN_IN if burn_in is None else burn_in
    k, d = means.shape
    prec = np.linalg.inv(cov + 1e-12 * np.eye(d))
    x = np.clip(means, lo, hi)
    for _ in range(burn_in + 1):
        for i in range(d):
            others = np.arange(d) != i
            cond_var = 1.0 / prec[i, i]
            cond_mean = means[:, i] - cond_var * (x[:, others] - means[:, others]) @ prec[i, others]
            x[:, i] = _truncnorm_draw(cond_mean, np.sqrt(cond_var), lo[i], hi[i], rng)
    return x


def _sample_shares_covariates(m, mu_x, L, K, T_half, rng):
    """Rejection-sample ``(xbar, z)`` with ``xbar >= 0`` on the simplex."""
    r, p = K.shape
    resid = _sym_sqrt(np.eye(p) - K.T @ K) if p else np.zeros((0, 0))
    xs, zs, have = [], [], 0
    batch = max(2 * m, 64)
    for _ in range(MAX_REJECTION_ROUNDS):
        w = rng.standard_normal((batch, r))
        v = w @ K + rng.standard_normal((batch, p)) @ resid
        x = mu_x + w @ L.T
        ok = np.all(x >= 0, axis=1)
        xs.append(x[ok])
        zs.append(v[ok] @ T_half)
        have += int(ok.sum())
        if have >= m:
            break
    else:
        raise RuntimeError("share sampler failed to produce enough draws inside the simplex")
    x = np.concatenate(xs)[:m]
    z = np.concatenate(zs)[:m]
    x = np.clip(x, 0.0, None)
    return x / x.sum(axis=1, keepdims=True), z


# ---------------------------------------------------------------------------


def generate(config: SynthConfig, n=None) -> SynthDataset:
    """Draw one dataset; identical configs give identical datasets."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    d, p, m = config.d, config.p, config.m
    alpha = np.arange(1, d + 1, dtype=float) if config.dirichlet_alpha is None \
        else np.asarray(config.dirichlet_alpha, dtype=float)
    mu_x, Sigma_x = dirichlet_moments(alpha)
    T = toeplitz_covariance(p)
    Sigma_b = np.asarray(config.sigma_b, dtype=float)
    mu_b = np.asarray(config.mu_b, dtype=float)

    Gamma_raw = rng.standard_normal((p, d))
    Lambda_raw = rng.standard_normal((p, d))
    L = _share_factor(Sigma_x)
    if p:
        Gamma = calibrate_r2(Gamma_raw, config.r2_xz, "gamma", T=T, Sigma_x=Sigma_x)
        Lambda = calibrate_r2(Lambda_raw, config.r2_bz, "lambda", T=T, Sigma_b=Sigma_b)
        T_half = _sym_sqrt(T)
        # whitened coupling recovered from Gamma = T^1/2 K' L'
        K = (np.linalg.pinv(L) @ Gamma.T @ np.linalg.pinv(T_half)) if L.shape[1] else np.zeros((0, p))
    else:
        Gamma = np.zeros((0, d))
        Lambda = np.zeros((0, d))
        T_half = np.zeros((0, 0))
        K = np.zeros((L.shape[1], 0))
    joint = np.block([[Sigma_x, Gamma.T], [Gamma, T]]) if p else Sigma_x
    if np.linalg.eigvalsh(joint).min() < -1e-10:
        raise ValueError("joint share/covariate covariance is not positive semidefinite")

    if d == 1:
        xbar = np.ones((m, 1))
        z = rng.standard_normal((m, p)) @ T_half if p else np.zeros((m, 0))
    else:
        xbar, z = _sample_shares_covariates(m, mu_x, L, K, T_half, rng)
    eta = z @ Lambda + mu_b
    B = truncated_mvn_sample(eta, Sigma_b, (0.0, 1.0), rng)
    ybar = np.einsum("gj,gj->g", B, xbar)
    n = np.ones(m) if n is None else np.asarray(n, dtype=float)
    mass = n[:, None] * xbar
    beta_true = (mass * B).sum(axis=0) / mass.sum(axis=0)
    data = AggregateDataset.from_arrays(
        ybar=ybar, xbar=xbar, z=z, n=n,
        group_names=[f"x{j}" for j in range(d)], covariate_names=[f"z{k}" for k in range(p)],
    )
    return SynthDataset(data=data, B=B, beta_true=beta_true, Lambda=Lambda, Gamma=Gamma,
                        eta=eta, config=config)
