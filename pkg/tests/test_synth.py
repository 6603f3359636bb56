import io

import numpy as np
import pytest
from scipy import integrate, stats

from ecoinfer import synth
from ecoinfer.synth import (
    SynthConfig,
    calibrate_r2,
    dirichlet_moments,
    generate,
    population_r2_xz,
    study1_config,
    study2_config,
    toeplitz_covariance,
    truncated_mvn_sample,
)


@pytest.mark.parametrize("cfg", [study1_config(seed=3, m=400), study2_config(300, 5, 3, 0.5, seed=4)])
def test_accounting_identity_exact(cfg):
    sd = generate(cfg)
    d = sd.data
    assert np.max(np.abs(d.ybar - np.einsum("gj,gj->g", sd.B, d.xbar))) <= 1e-15
    assert np.all((sd.B >= 0) & (sd.B <= 1))
    assert np.all(d.xbar >= 0)
    np.testing.assert_allclose(d.xbar.sum(axis=1), 1.0, atol=1e-14)


def test_beta_true_is_size_weighted_mean():
    n = np.random.default_rng(0).integers(50, 500, 200).astype(float)
    sd = generate(study1_config(seed=2, m=200), n=n)
    mass = n[:, None] * sd.data.xbar
    np.testing.assert_allclose(sd.beta_true, (mass * sd.B).sum(0) / mass.sum(0), rtol=1e-14)


def _csv_bytes(sd):
    buf = io.StringIO()
    frame = sd.data.to_dict()
    buf.write(repr(frame))
    return buf.getvalue().encode(), sd.B.tobytes(), sd.data.z.tobytes(), sd.data.xbar.tobytes()


def test_seeded_determinism_byte_identical(tmp_path):
    cfg = study2_config(250, 3, 2, 0.5, seed=17)
    a, b = generate(cfg), generate(cfg)
    assert _csv_bytes(a) == _csv_bytes(b)
    a.write(tmp_path / "a.csv", tmp_path / "ta.csv")
    b.write(tmp_path / "b.csv", tmp_path / "tb.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "ta.csv").read_bytes() == (tmp_path / "tb.csv").read_bytes()
    assert not np.array_equal(generate(cfg.with_seed(18)).B, a.B)


def test_config_round_trip():
    cfg = study2_config(100, 4, 2, 0.3, seed=9)
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg


def test_toeplitz_diagonals():
    T = toeplitz_covariance(3)
    np.testing.assert_array_equal(np.round([T[0, 0], T[0, 1], T[0, 2]], 5), [0.25, 0.15163, 0.09197])
    np.testing.assert_allclose(T, T.T)
    assert T[1, 2] == T[0, 1]


def test_dirichlet_moments():
    mean, cov = dirichlet_moments([1.0, 2.0])
    np.testing.assert_allclose(mean, [1 / 3, 2 / 3])
    np.testing.assert_allclose(cov, [[1 / 18, -1 / 18], [-1 / 18, 1 / 18]])
    np.testing.assert_allclose(cov.sum(axis=1), 0, atol=1e-16)


def test_share_mean_matches_truncated_normal():
    # x0 ~ N(1/3, 1/18) restricted to [0, 1]: the truncation moves the mean
    sd = generate(study1_config(seed=8, m=100_000))
    s = np.sqrt(1 / 18)
    oracle = stats.truncnorm.mean((0 - 1 / 3) / s, (1 - 1 / 3) / s, loc=1 / 3, scale=s)
    assert abs(sd.data.xbar[:, 0].mean() - oracle) < 0.005
    assert abs(sd.data.xbar[:, 1].mean() - (1 - oracle)) < 0.005


def test_share_mean_near_dirichlet_when_truncation_is_rare():
    cfg = SynthConfig(m=100_000, d=2, p=1, mu_b=(0.3, 0.7), sigma_b=((0.01, 0), (0, 0.01)),
                      r2_xz=0.3, r2_bz=0.3, seed=5, dirichlet_alpha=(20.0, 40.0))
    sd = generate(cfg)
    np.testing.assert_allclose(sd.data.xbar.mean(axis=0), [1 / 3, 2 / 3], atol=0.01)


def test_gamma_rows_sum_to_zero_and_population_r2():
    rng = np.random.default_rng(1)
    for d, p in [(2, 3), (3, 3), (4, 5)]:
        _, Sx = dirichlet_moments(np.arange(1, d + 1.0))
        T = toeplitz_covariance(p)
        G = calibrate_r2(rng.normal(size=(p, d)), 0.5, "gamma", T=T, Sigma_x=Sx)
        assert np.abs(G.sum(axis=1)).max() <= 1e-12
        np.testing.assert_allclose(population_r2_xz(G, T, Sx), 0.5, atol=1e-10)


def test_calibrate_zero_target_and_errors():
    raw = np.ones((2, 2))
    assert not np.any(calibrate_r2(raw, 0.0, "lambda", T=np.eye(2), Sigma_b=np.eye(2)))
    with pytest.raises(ValueError):
        calibrate_r2(raw, 1.0, "lambda", T=np.eye(2), Sigma_b=np.eye(2))
    with pytest.raises(ValueError):
        calibrate_r2(raw, 0.5, "other")


def _pre_truncation_r2(target, regressors):
    Z = np.column_stack([np.ones(len(target)), regressors])
    resid = target - Z @ np.linalg.lstsq(Z, target, rcond=None)[0]
    return 1 - resid.var() / target.var()


@pytest.mark.parametrize("d", [2, 3])
def test_pre_truncation_in_sample_r2(d):
    cfg = SynthConfig(m=10, d=d, p=3, mu_b=tuple(np.linspace(0.3, 0.7, d)),
                      sigma_b=tuple(map(tuple, 0.02 * (np.eye(d) + 1))), r2_xz=0.5, r2_bz=0.5, seed=21)
    sd = generate(cfg)
    mu_x, Sx = dirichlet_moments(np.arange(1, d + 1.0))
    T = toeplitz_covariance(3)
    joint = np.block([[Sx, sd.Gamma.T], [sd.Gamma, T]])
    rng = np.random.default_rng(22)
    draws = rng.multivariate_normal(np.concatenate([mu_x, np.zeros(3)]), joint, size=100_000,
                                    method="eigh")
    x, z = draws[:, :d], draws[:, d:]
    Sb = np.asarray(cfg.sigma_b)
    b = z @ sd.Lambda + rng.multivariate_normal(np.zeros(d), Sb, size=100_000)
    for j in range(d):
        assert 0.48 <= _pre_truncation_r2(x[:, j], z) <= 0.52
        assert 0.48 <= _pre_truncation_r2(b[:, j], z) <= 0.52


def test_zero_r2_gives_independent_covariates():
    sd = generate(study2_config(20_000, 3, 2, 0.0, seed=3, r2_bz=0.0))
    assert not np.any(sd.Gamma) and not np.any(sd.Lambda)
    for j in range(3):
        assert _pre_truncation_r2(sd.data.xbar[:, j], sd.data.z) < 0.002


def test_degenerate_sigma_b_clips_means():
    cfg = SynthConfig(m=50, d=3, p=2, mu_b=(-0.2, 0.4, 1.3), sigma_b=((0,) * 3,) * 3,
                      r2_xz=0.4, r2_bz=0.0, seed=1)
    sd = generate(cfg)
    np.testing.assert_array_equal(sd.B, np.tile([0.0, 0.4, 1.0], (50, 1)))
    np.testing.assert_allclose(sd.beta_true, [0.0, 0.4, 1.0])


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        SynthConfig(r2_xz=1.0)
    with pytest.raises(ValueError):
        SynthConfig(sigma_b=((1.0, 2.0), (2.0, 1.0)))
    with pytest.raises(ValueError):
        SynthConfig(d=3)


def test_truncated_flat_normal_is_uniform():
    rng = np.random.default_rng(0)
    draws = truncated_mvn_sample(np.array([0.5]), np.array([[100.0]]), (0.0, 1.0), rng, size=100_000)
    assert draws.shape == (100_000, 1)
    assert stats.kstest(draws[:, 0], "uniform").statistic < 0.02


@pytest.mark.parametrize("mu,sd", [(0.2, 0.3), (0.9, 0.5), (-0.3, 0.4)])
def test_truncated_mean_matches_quadrature(mu, sd):
    rng = np.random.default_rng(1)
    draws = truncated_mvn_sample(np.array([mu]), np.array([[sd ** 2]]), (0.0, 1.0), rng, size=100_000)
    dens = lambda x: np.exp(-0.5 * ((x - mu) / sd) ** 2)
    oracle = integrate.quad(lambda x: x * dens(x), 0, 1)[0] / integrate.quad(dens, 0, 1)[0]
    assert abs(draws.mean() - oracle) < 0.005


def test_truncated_tiny_covariance_stays_at_mean():
    rng = np.random.default_rng(2)
    mean = np.array([0.4, 0.6])
    draws = truncated_mvn_sample(mean, 1e-10 * np.eye(2), (0.0, 1.0), rng, size=100)
    np.testing.assert_allclose(draws, np.tile(mean, (100, 1)), atol=1e-3)


def test_gibbs_fallback_for_far_tail(monkeypatch):
    monkeypatch.setattr(synth, "MAX_REJECTION_ROUNDS", 5)
    monkeypatch.setattr(synth, "GIBBS_BURN_IN", 50)
    rng = np.random.default_rng(3)
    mean, sd = np.array([4.0, -3.0]), 1.0
    draws = truncated_mvn_sample(np.tile(mean, (400, 1)), sd ** 2 * np.eye(2), (0.0, 1.0), rng)
    assert np.all((draws >= 0) & (draws <= 1))
    for j in range(2):
        a, b = (0 - mean[j]) / sd, (1 - mean[j]) / sd
        assert abs(draws[:, j].mean() - stats.truncnorm.mean(a, b, loc=mean[j], scale=sd)) < 0.05


def test_per_row_means():
    rng = np.random.default_rng(4)
    means = np.array([[0.1, 0.9], [0.5, 0.5]])
    draws = truncated_mvn_sample(means, 1e-6 * np.eye(2), (0.0, 1.0), rng)
    np.testing.assert_allclose(draws, means, atol=0.01)
