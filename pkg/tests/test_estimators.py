import numpy as np
import pytest
from sklearn.base import clone

from fgee import FoSR, OneStepFGEE, PenalizedGLS
from fgee.simgen import generate, get_design, true_betas

FAST = dict(n_knots=5, n_folds=5, n_band_draws=200, stage_grids=((0.1, 1, 10), (0.3, 1, 3), (0.5, 1, 2)))


@pytest.fixture(scope="module")
def sim1():
    return generate(get_design("gaussian-exch", N=20, n=6, L=30), 0)


def test_params_roundtrip_and_clone():
    est = OneStepFGEE(corr="ar1", n_knots=7)
    assert est.get_params()["corr"] == "ar1"
    c = clone(est).set_params(n_knots=4)
    assert c.n_knots == 4 and est.n_knots == 7


def test_fit_from_arrays_matches_dataset(sim1):
    X = np.concatenate([Z[:, 1:] for Z in sim1.Z])
    Y = np.concatenate(sim1.Y)
    groups = np.repeat(np.arange(sim1.N), sim1.n_obs)
    a = OneStepFGEE(**FAST).fit(sim1)
    b = OneStepFGEE(**FAST).fit(X, Y, groups, grid=sim1.grid)
    np.testing.assert_allclose(a.coef_, b.coef_, rtol=1e-10)


def test_fitted_attributes(sim1):
    est = OneStepFGEE(**FAST).fit(sim1)
    assert est.coef_.shape == (3, 30)
    assert set(est.rho_) == {"pass1", "pass2"}
    assert {"initial_fit", "rho_estimation", "tuning", "update", "variance"} <= set(est.timing_)
    assert np.all(est.bands_.joint_lo <= est.bands_.pw_lo + 1e-12)
    assert len(est.tuning_.trace) == 3 + 27 + 27
    truth = true_betas(get_design("gaussian-exch", L=30))
    assert np.sqrt(np.mean((est.coef_ - truth) ** 2)) < 1.5


def test_predict(sim1):
    est = OneStepFGEE(**FAST).fit(sim1)
    pred = est.predict(np.array([[0.0, 0.0], [1.0, 2.0]]))
    np.testing.assert_allclose(pred[0], est.coef_[0])
    np.testing.assert_allclose(pred[1], est.coef_[0] + est.coef_[1] + 2 * est.coef_[2])
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 3)))


def test_binomial_predict_in_unit_interval():
    ds = generate(get_design("binary-ar1", N=15, n=5, L=20), 1)
    est = OneStepFGEE(family="binomial", corr="ar1", **FAST).fit(ds)
    p = est.predict(np.array([[0.5, 3.0]]))
    assert np.all((p > 0) & (p < 1))


def test_independence_gaussian_equals_gls(sim1):
    est = OneStepFGEE(corr="independence", **FAST).fit(sim1)
    gls = PenalizedGLS(corr="independence", lambda1=est.lambda1_, n_knots=5, n_band_draws=200).fit(sim1)
    np.testing.assert_allclose(est.theta_, gls.theta_, rtol=1e-8, atol=1e-10)


def test_fosr_and_bootstrap_bands(sim1):
    f = FoSR(n_knots=5, n_band_draws=200).fit(sim1)
    assert set(f.rho_) == {"pass1"}
    b = OneStepFGEE(variance="bootstrap", band="nonparametric", n_boot=150, **FAST).fit(sim1)
    assert b.theta_cov_.source == "fast_bootstrap" and b.bands_.method == "nonparametric"


def test_validation_errors(sim1):
    with pytest.raises(ValueError):
        OneStepFGEE(band="nonparametric").fit(sim1)
    with pytest.raises(ValueError):
        OneStepFGEE(corr="toeplitz", **FAST).fit(sim1)
    with pytest.raises(ValueError):
        PenalizedGLS(corr="banded").fit(sim1)


def test_fit_is_deterministic(sim1):
    a = OneStepFGEE(variance="bootstrap", n_boot=100, **FAST).fit(sim1)
    b = OneStepFGEE(variance="bootstrap", n_boot=100, **FAST).fit(sim1)
    assert np.array_equal(a.theta_, b.theta_)
    assert np.array_equal(a.bands_.joint_hi, b.bands_.joint_hi)
