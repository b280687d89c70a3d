import math

import numpy as np
import pytest

from twcv.core import Dataset, distance_matrix
from twcv.models import ModelSpec, fit_model
from twcv.models.forest import fit_rf, rf_oob_mse, rf_predict
from twcv.models.kriging import fit_rk, krige_from_residuals, krige_predict
from twcv.models.trend import RankDeficiencyError, fit_ols, forward_bic
from twcv.models.variogram import (EmpiricalSemivariogram, SemivariogramModel,
                                   cressie_semivariogram, fit_exponential_svgm)
from twcv.simfield import CovarianceSpec, ScenarioConfig, draw_sample, make_world, simulate_grf


# -- trend -------------------------------------------------------------------

def test_ols_noiseless_line():
    x = np.linspace(0, 1, 20)
    m = fit_ols(x[:, None], 2 + 3 * x, ["x"])
    assert m.intercept == pytest.approx(2, abs=1e-12)
    assert m.coefficients[0] == pytest.approx(3, abs=1e-12)
    assert m.residual_variance == pytest.approx(0, abs=1e-20)


def test_ols_intercept_only_and_errors():
    y = np.array([1.0, 2.0, 6.0])
    assert fit_ols(np.empty((3, 0)), y, []).intercept == pytest.approx(3.0)
    x = np.arange(10.0)
    with pytest.raises(RankDeficiencyError, match="b"):
        fit_ols(np.column_stack([x, 2 * x]), x, ["a", "b"])
    with pytest.raises(ValueError):
        fit_ols(np.ones((3, 2)), y, ["a", "b"])


def test_ols_noise_slopes_have_small_t():
    rng = np.random.default_rng(0)
    ts = []
    for _ in range(200):
        X = rng.normal(size=(50, 1))
        y = rng.normal(size=50)
        m = fit_ols(X, y, ["x"])
        se = math.sqrt(m.residual_variance / np.sum((X[:, 0] - X[:, 0].mean()) ** 2))
        ts.append(m.coefficients[0] / se)
    assert abs(np.mean(ts)) < 0.3
    assert np.mean(np.abs(ts) > 1.96) < 0.1


def test_forward_bic_selection():
    rng = np.random.default_rng(1)
    noise_only = hits = 0
    for _ in range(100):
        X = rng.normal(size=(100, 3))
        if forward_bic(X, rng.normal(size=100), ["a", "b", "c"]).selected_variables == ():
            noise_only += 1
        x1 = rng.random(100)
        Xs = np.column_stack([x1, rng.normal(size=100)])
        sel = forward_bic(Xs, 2 + 3 * x1 + 0.3 * rng.normal(size=100), ["x1", "noise"]).selected_variables
        hits += sel == ("x1",)
    assert noise_only >= 80
    assert hits > 95
    m = forward_bic(np.empty((10, 0)), np.arange(10.0), [])
    assert m.selected_variables == () and m.intercept == pytest.approx(4.5)


def test_forward_bic_duplicate_candidate_invariance():
    rng = np.random.default_rng(2)
    x1, x2 = rng.random(80), rng.random(80)
    y = 1 + 2 * x1 + 0.5 * x2 + 0.1 * rng.normal(size=80)
    a = forward_bic(np.column_stack([x1, x2]), y, ["x1", "x2"])
    b = forward_bic(np.column_stack([x1, x2, x1]), y, ["x1", "x2", "x1_copy"])
    assert a.selected_variables == b.selected_variables


# -- semivariogram -----------------------------------------------------------

def test_cressie_constant_residuals():
    rng = np.random.default_rng(3)
    emp = cressie_semivariogram(np.full(30, 2.5), rng.random((30, 2)))
    np.testing.assert_array_equal(emp.gamma, 0.0)


def test_cressie_formula_on_single_bin():
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]] + [[5 + i, 5.0] for i in range(7)])
    r = np.random.default_rng(4).normal(size=10)
    emp = cressie_semivariogram(r, coords, max_lag=100.0, n_bins=1)
    D = distance_matrix(coords)
    i, j = np.triu_indices(10, 1)
    N = i.size
    expected = 0.5 * np.mean(np.abs(r[i] - r[j]) ** 0.5) ** 4 / (0.457 + 0.494 / N)
    assert emp.gamma[0] == pytest.approx(expected, rel=1e-12)
    assert emp.counts[0] == N
    assert emp.lags[0] == pytest.approx(D[i, j].mean())


def test_cressie_white_noise_and_grf():
    rng = np.random.default_rng(5)
    coords = rng.random((150, 2))
    g_white = np.mean([cressie_semivariogram(rng.normal(size=150), coords).gamma for _ in range(40)], axis=0)
    assert np.all(np.abs(g_white - 1) < 0.2)
    spec = CovarianceSpec(0.1)
    g_grf = np.mean([cressie_semivariogram(simulate_grf(coords, spec, rng), coords).gamma
                     for _ in range(40)], axis=0)
    assert g_grf[-1] > g_grf[0]
    assert np.corrcoef(np.arange(g_grf.size), g_grf)[0, 1] > 0.6


def test_cressie_no_pairs():
    with pytest.raises(ValueError):
        cressie_semivariogram(np.arange(10.0), np.arange(20.0).reshape(10, 2) * 10, max_lag=1e-3)


def test_fit_exponential_self_consistency():
    truth = SemivariogramModel(0.2, 0.8, 0.1)
    h = np.linspace(0.02, 0.5, 15)
    emp = EmpiricalSemivariogram(h, truth.gamma(h), np.full(15, 100), 0.5, 1.0)
    fit = fit_exponential_svgm(emp)
    assert fit.nugget == pytest.approx(0.2, abs=1e-4)
    assert fit.partial_sill == pytest.approx(0.8, abs=1e-4)
    assert fit.range == pytest.approx(0.1, abs=1e-4)
    assert fit.converged


def test_fit_exponential_flat():
    h = np.linspace(0.02, 0.5, 15)
    emp = EmpiricalSemivariogram(h, np.full(15, 0.7), np.full(15, 50), 0.5, 0.7)
    fit = fit_exponential_svgm(emp)
    assert fit.partial_sill < 1e-3
    assert not fit.identified


def test_svgm_model_shape():
    m = SemivariogramModel(0.3, 0.7, 0.2)
    h = np.linspace(1e-9, 2, 200)
    g = m.gamma(h)
    assert g[0] == pytest.approx(0.3, abs=1e-6)
    assert np.all(np.diff(g) >= 0)


@pytest.mark.slow
def test_fitted_range_reference_scale():
    rng = np.random.default_rng(6)
    coords = rng.random((400, 2))
    spec = CovarianceSpec(0.1)
    ok = 0
    for _ in range(30):
        fit = fit_exponential_svgm(cressie_semivariogram(simulate_grf(coords, spec, rng), coords))
        ok += 0.05 <= fit.range <= 0.2
    assert ok >= 0.8 * 30


# -- kriging -----------------------------------------------------------------

def _toy(n=30, seed=7, noise=True):
    rng = np.random.default_rng(seed)
    coords = rng.random((n, 2))
    x = rng.random(n)
    z = 1 + 2 * x + simulate_grf(coords, CovarianceSpec(0.2), rng) + (0.2 * rng.normal(size=n) if noise else 0)
    return Dataset(coords, x[:, None], ("x1",), z)


def test_kriging_exact_interpolation_without_nugget():
    data = _toy()
    trend = fit_ols(data.covariates, data.response, ["x1"])
    resid = data.response - trend.predict(data.covariates)
    km = krige_from_residuals(trend, SemivariogramModel(0.0, 1.0, 0.2), data.coords, resid)
    mean, var = km.predict(data.coords, data.covariates)
    np.testing.assert_allclose(mean, data.response, atol=1e-6)
    assert var.max() <= 1e-6


def test_kriging_far_field_limit():
    data = _toy()
    km = fit_rk(data, ["x1"])
    m, v = krige_predict(km, (50.0, 50.0), [0.5])
    assert m == pytest.approx(km.trend.predict([[0.5]])[0], abs=1e-10)
    assert v == pytest.approx(km.svgm.nugget + km.svgm.partial_sill, rel=1e-10)


def test_kriging_two_point_hand_solution():
    coords = np.array([[0.0, 0.0], [0.3, 0.4]])
    data = Dataset(coords, np.zeros((2, 0)), (), np.array([1.0, -0.5]))
    trend = fit_ols(np.empty((2, 0)), np.zeros(2), [])  # zero trend
    svgm = SemivariogramModel(0.1, 0.9, 0.25)
    km = krige_from_residuals(trend, svgm, coords, data.response)
    u = np.array([[0.1, 0.1]])
    m, v = km.predict(u, np.empty((1, 0)), new_observation=False)
    c01 = 0.9 * math.exp(-0.5 / 0.25)
    K = np.array([[1.0, c01], [c01, 1.0]])
    k = 0.9 * np.exp(-np.hypot(*(coords - u).T) / 0.25)
    lam = np.linalg.solve(K, k)
    assert m[0] == pytest.approx(lam @ data.response, abs=1e-10)
    assert v[0] == pytest.approx(0.9 - lam @ k, abs=1e-10)


def test_hrk_variance_slope_positive():
    rng = np.random.default_rng(8)
    cfg = ScenarioConfig(grid_side=30)
    pos = 0
    for _ in range(20):
        w = make_world(cfg, rng)
        d = draw_sample(w, cfg, rng)
        km = fit_rk(d, ["x1", "x2"], heteroskedastic=True, variance_covariate="x1")
        pos += km.variance_model.b > 0
    assert pos >= 18
    assert fit_rk(d, ["x1", "x2"]).variance_model is None


def test_rk_constant_response():
    data = _toy()
    const = Dataset(data.coords, data.covariates, data.covariate_names, np.full(data.n, 3.0))
    km = fit_rk(const, ["x1"])
    assert abs(km.trend.coefficients[0]) < 1e-10
    assert km.svgm.sill < 1e-10
    m, _ = km.predict(data.coords[:3], data.covariates[:3])
    np.testing.assert_allclose(m, 3.0)


# -- random forest -----------------------------------------------------------

def test_rf_constant_response():
    rng = np.random.default_rng(9)
    X = rng.random((50, 2))
    m = fit_rf(X, np.full(50, 4.2), n_trees=20, rng=1)
    np.testing.assert_allclose(m.predict(rng.random((10, 2))), 4.2)
    assert rf_oob_mse(m)[0] == pytest.approx(0.0, abs=1e-24)


def test_rf_single_leaf_is_bootstrap_mean():
    rng = np.random.default_rng(10)
    X, y = rng.random((30, 2)), rng.normal(size=30)
    m = fit_rf(X, y, n_trees=1, min_node_size=30, rng=3)
    w = m.inbag[0]
    assert rf_predict(m, X[0]) == pytest.approx(np.sum(w * y) / w.sum())
    # the bootstrap average matches mean(y) in expectation
    preds = [fit_rf(X, y, n_trees=1, min_node_size=30, rng=s).predict(X[:1])[0] for s in range(400)]
    assert np.mean(preds) == pytest.approx(y.mean(), abs=3 * y.std() / math.sqrt(30 * 400) * 2)


def test_rf_step_function_fit():
    rng = np.random.default_rng(11)
    X = rng.random((200, 2))
    y = (X[:, 0] > 0.5).astype(float) + 0.05 * rng.normal(size=200)
    m = fit_rf(X, y, n_trees=100, rng=2)
    assert np.mean((m.predict(X) - y) ** 2) < 0.05 * np.var(y)
    grid = np.column_stack([np.linspace(0, 1, 21), np.full(21, 0.5)])
    p = m.predict(grid)
    assert p[-1] > p[0]
    assert p.min() >= y.min() and p.max() <= y.max()


def test_rf_determinism_and_oob():
    rng = np.random.default_rng(12)
    X, y = rng.random((200, 3)), rng.normal(size=200)
    a = fit_rf(X, y, rng=5)
    b = fit_rf(X, y, rng=5)
    np.testing.assert_array_equal(a.predict(X), b.predict(X))
    mse, skipped = rf_oob_mse(a)
    assert skipped == 0 and mse > 0
    assert a.mtry == 1
    with pytest.raises(ValueError):
        fit_rf(X[:3], y[:3])


def test_fit_model_dispatch():
    data = _toy(60)
    rf = fit_model(ModelSpec("rf", predictors=("x1",), n_trees=20), data, 1)
    mean, var = rf.predict_with_variance(data.coords, data.covariates, data.covariate_names)
    assert var is None and mean.shape == (60,)
    hrk = fit_model(ModelSpec("hrk", predictors=("x1",), variance_covariate="x1"), data)
    mean, var = hrk.predict_with_variance(data.coords, data.covariates, data.covariate_names)
    assert np.all(var >= 0)
    with pytest.raises(ValueError, match="rf, rk, hrk"):
        ModelSpec("gbm")
    assert ModelSpec.from_dict(ModelSpec("rk").to_dict()) == ModelSpec("rk")
