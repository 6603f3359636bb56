import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from ecoinfer import AggregateDataset, BasisSpec, EcoDML, GoodmanRegression, estimate, goodman
from ecoinfer.dml import fit_dataset, normal_quantile

from conftest import random_dataset
from oracles import dense_dml, ols_no_intercept


@pytest.fixture
def constant_data(rng):
    xbar = rng.dirichlet([2, 2], size=30)
    y = xbar @ np.array([0.3, 0.7])
    return AggregateDataset.from_arrays(y, xbar)


def test_constant_dataset_exact(constant_data):
    model = fit_dataset(constant_data, basis=BasisSpec("intercept"), lam=0.0)
    np.testing.assert_allclose(model.coef_, [0.3, 0.7], atol=1e-10)
    np.testing.assert_allclose(model.residuals_, 0.0, atol=1e-12)
    est, se, _ = model.contrast([1, -1])
    assert est == pytest.approx(-0.4, abs=1e-10)
    # with zero residuals the scores reduce to u_j B_j; only the weights vary
    u = model.u_
    assert se == pytest.approx(np.std(0.3 * u[:, 0] - 0.7 * u[:, 1], ddof=1) / np.sqrt(30), rel=1e-8)
    est, se, (lo, hi) = model.contrast([0, 0])
    assert (est, se, lo, hi) == (0.0, 0.0, 0.0, 0.0)


def test_goodman_constant(constant_data):
    np.testing.assert_allclose(goodman(constant_data).beta, [0.3, 0.7], atol=1e-12)


def test_intercept_only_equals_goodman(rng):
    data = random_dataset(rng, m=50, d=3, p=2)
    beta = estimate(data, basis=BasisSpec("intercept"), lam=0.0).beta
    np.testing.assert_allclose(beta, ols_no_intercept(data.xbar, data.ybar), atol=1e-8)
    np.testing.assert_allclose(beta, goodman(data).beta, atol=1e-8)


@pytest.mark.parametrize("basis", [BasisSpec("linear"), BasisSpec("cosine", n_terms=3)])
@pytest.mark.parametrize("lam", [0.0, 0.01])
def test_matches_dense_oracle(rng, basis, lam):
    data = random_dataset(rng, m=40, d=3, p=2, n=rng.uniform(1, 10, 40))
    model = fit_dataset(data, basis=basis, lam=lam)
    Phi = model.sieve_.transform(data.z)
    beta, vcov, theta, alpha = dense_dml(data.xbar, Phi, data.ybar, data.n, lam_sum=data.m * lam)
    np.testing.assert_allclose(model.coef_, beta, atol=1e-8)
    np.testing.assert_allclose(model.vcov_, vcov, atol=1e-10)
    np.testing.assert_allclose(model.nuisance_.riesz.alpha, alpha, atol=1e-7)


def test_car_u_matches_weighted_oracle(rng):
    n = rng.uniform(1, 20, 40)
    data = random_dataset(rng, m=40, d=2, p=1, n=n)
    model = fit_dataset(data, lam=0.0, weighting="car-u")
    Phi = model.sieve_.transform(data.z)
    w = n / n.mean()
    beta, vcov, _, _ = dense_dml(data.xbar, Phi, data.ybar, n, w=w)
    np.testing.assert_allclose(model.coef_, beta, atol=1e-8)
    np.testing.assert_allclose(model.vcov_, vcov, atol=1e-10)


def test_precision_weights_enter_outcome_loss_only(rng):
    data = random_dataset(rng, m=40, d=2, p=1)
    pw = rng.uniform(0.5, 2.0, 40)
    model = fit_dataset(data, lam=0.01, sample_weight=pw)
    Phi = model.sieve_.transform(data.z)
    beta, _, theta, _ = dense_dml(data.xbar, Phi, data.ybar, lam_sum=40 * 0.01, loss_w=pw)
    np.testing.assert_allclose(model.nuisance_.theta, theta, atol=1e-8)
    np.testing.assert_allclose(model.coef_, beta, atol=1e-8)


def test_scores_average_to_estimate(rng):
    data = random_dataset(rng, m=60, d=3, p=2)
    model = fit_dataset(data)
    np.testing.assert_allclose(model.scores_.mean(axis=0), model.coef_, atol=1e-15)
    V = model.vcov_
    np.testing.assert_allclose(V, V.T, atol=1e-15)
    assert np.linalg.eigvalsh(V).min() >= -1e-10


def test_ci_half_width(rng):
    res = estimate(random_dataset(rng, m=40), level=0.9)
    lo, hi = res.ci()
    np.testing.assert_allclose((hi - lo) / 2, normal_quantile(0.9) * np.sqrt(np.diag(res.vcov)))
    est, se, (clo, chi) = res.contrast([1, 0])
    assert est == res.beta[0] and se == pytest.approx(res.std_errors[0])
    assert (clo, chi) == pytest.approx((lo[0], hi[0]))


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 2**31 - 1))
def test_scale_equivariance(c, seed):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, m=30, d=2, p=1)
    for lam in (0.0, 0.05):
        a = estimate(data, lam=lam)
        b = estimate(data.with_ybar(c * data.ybar), lam=lam)
        np.testing.assert_allclose(b.beta, c * a.beta, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(b.std_errors, c * a.std_errors, rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(np.array(b.ci()), c * np.array(a.ci()), rtol=1e-8, atol=1e-12)


def test_auto_lambda_is_scale_free(rng):
    data = random_dataset(rng, m=50, d=2, p=2)
    a = fit_dataset(data)
    b = fit_dataset(data.with_ybar(3.0 * data.ybar))
    assert a.lambda_ == b.lambda_
    np.testing.assert_allclose(b.coef_, 3.0 * a.coef_, rtol=1e-10)


def test_bounds_constrain_group_functions(rng):
    m = 80
    xbar = rng.dirichlet([1, 1], size=m)
    z = rng.normal(size=(m, 1))
    B = np.clip(np.column_stack([0.05 + 0.3 * z[:, 0], 0.9 + 0.3 * z[:, 0]]), 0, 1)
    y = np.einsum("gj,gj->g", B, xbar)
    data = AggregateDataset.from_arrays(y, xbar, z, outcome_bounds=(0, 1))
    model = fit_dataset(data, lam=1e-4)
    pure = model.nuisance_.gamma_pure
    assert pure.min() >= -1e-9 and pure.max() <= 1 + 1e-9
    assert model.nuisance_.bounded
    np.testing.assert_array_equal(model.result_.beta_clipped, np.clip(model.coef_, 0, 1))


def test_gram_and_svd_agree(rng):
    data = random_dataset(rng, m=300, d=3, p=3)
    a = fit_dataset(data, basis=BasisSpec("cosine", n_terms=6), decomposition="svd")
    b = fit_dataset(data, basis=BasisSpec("cosine", n_terms=6), decomposition="gram")
    assert a.lambda_ == b.lambda_
    np.testing.assert_allclose(a.coef_, b.coef_, atol=1e-7)


def test_neyman_orthogonality(rng):
    data = random_dataset(rng, m=60, d=2, p=2)
    model = fit_dataset(data, lam=0.0)
    Phi = model.sieve_.transform(data.z)
    from ecoinfer.sieve import SieveDesign

    design = SieveDesign(Phi, data.xbar)
    zeta = model.nuisance_.riesz.zeta
    theta0 = model.nuisance_.theta

    def beta_at(theta, z):
        gamma = design.predict(theta)
        alpha = design.design @ z
        return np.array([
            np.mean(model.u_[:, j] * design.predict_pure(theta, j) + alpha[:, j] * (data.ybar - gamma))
            for j in range(data.d)
        ])

    eps = 1e-4
    for _ in range(10):
        v = rng.normal(size=theta0.size)
        v /= np.linalg.norm(v)
        deriv = (beta_at(theta0 + eps * v, zeta) - beta_at(theta0 - eps * v, zeta)) / (2 * eps)
        assert np.abs(deriv).max() <= 1e-6
        V = rng.normal(size=zeta.shape)
        V /= np.linalg.norm(V)
        deriv = (beta_at(theta0, zeta + eps * V) - beta_at(theta0, zeta - eps * V)) / (2 * eps)
        assert np.abs(deriv).max() <= 1e-6


def test_goodman_weighted_hand_example():
    xbar = np.array([[0.2, 0.8], [0.5, 0.5], [0.9, 0.1], [0.4, 0.6]])
    B = np.array([[0.1, 0.6], [0.3, 0.7], [0.6, 0.9], [0.2, 0.5]])
    n = np.array([1.0, 10.0, 50.0, 2.0])
    y = np.einsum("gj,gj->g", B, xbar)
    data = AggregateDataset.from_arrays(y, xbar, n=n)
    unweighted, weighted = goodman(data).beta, goodman(data, weighted=True).beta
    Wx = xbar * n[:, None]
    hand = np.linalg.solve(xbar.T @ Wx, Wx.T @ y)
    np.testing.assert_allclose(weighted, hand, atol=1e-12)
    np.testing.assert_allclose(unweighted, ols_no_intercept(xbar, y), atol=1e-12)
    assert np.abs(weighted - unweighted).max() > 1e-3


def test_goodman_hc1_sandwich(rng):
    data = random_dataset(rng, m=30, d=2, p=1)
    X, y = data.xbar, data.ybar
    res = GoodmanRegression().fit(X, y)
    e = y - X @ res.coef_
    bread = np.linalg.inv(X.T @ X)
    V = bread @ (X.T * e ** 2) @ X @ bread * 30 / 28
    np.testing.assert_allclose(res.vcov_, V, rtol=1e-10)


def test_goodman_collinear():
    xbar = np.tile([0.5, 0.5], (5, 1))
    with pytest.raises(np.linalg.LinAlgError):
        GoodmanRegression().fit(xbar, np.full(5, 0.4))


def test_group_absent():
    xbar = np.tile([1.0, 0.0], (5, 1))
    with pytest.raises(ValueError, match="group absent"):
        EcoDML(basis=BasisSpec("intercept"), lam=0.1).fit(xbar, np.full(5, 0.4))


def test_sklearn_api(rng):
    data = random_dataset(rng, m=40, d=2, p=2)
    model = EcoDML(lam=0.01)
    params = model.get_params()
    assert params["lam"] == 0.01 and params["weighting"] == "car"
    fitted = clone(model).fit(data.xbar, data.ybar, data.z)
    pred = fitted.predict(data.xbar, data.z)
    np.testing.assert_allclose(pred, fitted.nuisance_.fitted, atol=1e-12)
    assert fitted.score(data.xbar, data.ybar, data.z) > 0.5
    eta = fitted.predict_eta(data.z)
    np.testing.assert_allclose(np.einsum("gj,gj->g", eta, data.xbar), pred, atol=1e-12)


def test_input_validation():
    with pytest.raises(ValueError):
        EcoDML().fit(np.array([[0.5, 0.6], [0.5, 0.5]]), [0.1, 0.2])
    with pytest.raises(ValueError):
        EcoDML(weighting="other").fit(np.array([[0.5, 0.5], [0.2, 0.8]]), [0.1, 0.2])
    with pytest.raises(ValueError):
        EcoDML(lam=-1.0).fit(np.array([[0.5, 0.5], [0.2, 0.8], [0.1, 0.9]]), [0.1, 0.2, 0.3])


def test_result_json(rng):
    res = estimate(random_dataset(rng, m=30))
    obj = json.loads(res.to_json())
    assert obj["beta"] == res.beta.tolist()
    assert set(obj["diagnostics"]) >= {"lambda", "alpha_second_moment", "max_u", "nu2"}
    assert obj["config"]["basis"]["family"] == "linear"


def test_consistency_without_covariates_when_unconfounded():
    from ecoinfer.synth import SynthConfig, generate

    cfg = SynthConfig(m=10_000, d=2, p=3, mu_b=(0.3, 0.7), sigma_b=((0.04, 0.02), (0.02, 0.04)),
                      r2_xz=0.0, r2_bz=0.5, seed=11)
    errs = []
    for rep in range(3):
        sd = generate(cfg.with_seed(11 + rep))
        res = estimate(sd.data.drop_covariates(range(3)), basis=BasisSpec("intercept"))
        errs.append(res.beta - sd.beta_true)
    assert np.sqrt(np.mean(np.square(errs))) < 0.01
