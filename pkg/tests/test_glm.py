import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fgee.glm import (
    ETA_BOUND,
    estimate_dispersion,
    get_family,
    mean_and_derivative,
    pearson_residuals,
)


def test_gaussian_identity():
    X = np.array([[1.0, 2.0], [1.0, -1.0]])
    st_ = mean_and_derivative("gaussian", X, np.array([0.5, 1.0]), dispersion=2.0)
    np.testing.assert_allclose(st_.mu, X @ [0.5, 1.0])
    np.testing.assert_array_equal(st_.deriv, 1.0)
    np.testing.assert_array_equal(st_.var, 2.0)


def test_logit_at_zero():
    st_ = mean_and_derivative("binomial", np.ones((1, 1)), np.zeros(1))
    assert st_.mu[0] == 0.5 and st_.deriv[0] == 0.25 and st_.var[0] == 0.25


def test_log_link_at_one():
    st_ = mean_and_derivative("poisson", np.ones((1, 1)), np.ones(1))
    assert st_.mu[0] == pytest.approx(np.e, rel=1e-12)
    assert st_.deriv[0] == pytest.approx(2.718281828459045, rel=1e-12)


def test_eta_clamp_is_counted():
    fam = get_family("poisson")
    st_ = mean_and_derivative(fam, np.ones((2, 1)), np.array([100.0]))
    assert np.isfinite(st_.mu).all()
    assert st_.mu[0] == pytest.approx(np.exp(ETA_BOUND))
    assert st_.clamped == 2 and fam.clamps.count == 2


def test_non_finite_theta_rejected():
    with pytest.raises(ValueError):
        mean_and_derivative("gaussian", np.ones((1, 1)), np.array([np.nan]))


def test_unknown_family():
    with pytest.raises(ValueError, match="unknown family"):
        get_family("gamma")


def test_pearson_residuals_exclude_dispersion():
    e = pearson_residuals("binomial", np.array([1.0, 0.0]), np.array([0.5, 0.2]))
    np.testing.assert_allclose(e, [1.0, -0.5])


def test_pearson_residual_variance_floor():
    e = pearson_residuals("binomial", np.array([1.0]), np.array([1.0]))
    assert np.isfinite(e).all()


def test_dispersion_floor_and_fixed():
    assert estimate_dispersion("gaussian", np.zeros(10), 2) == pytest.approx(1e-10)
    assert estimate_dispersion("binomial", np.full(10, 3.0), 2) == 1.0
    assert estimate_dispersion("poisson", np.full(10, 3.0), 2) == 1.0


def test_dispersion_consistent():
    e = np.random.default_rng(0).normal(scale=1.7, size=100_000)
    assert estimate_dispersion("gaussian", e, 5) == pytest.approx(1.7**2, rel=0.05)


def test_nll_kernels():
    y = np.array([1.0, 0.0, 1.0])
    mu = np.array([0.8, 0.3, 0.5])
    expected = -(np.log(0.8) + np.log(0.7) + np.log(0.5))
    assert get_family("binomial").nll(y, mu) == pytest.approx(expected, rel=1e-12)
    assert get_family("binomial").nll(np.ones(4), np.full(4, 0.5)) == pytest.approx(4 * np.log(2))
    assert get_family("gaussian").nll(y, y) == 0.0
    assert get_family("gaussian").nll(np.array([2.0]), np.array([0.0]), 2.0) == pytest.approx(1.0)
    assert get_family("poisson").nll(np.array([2.0]), np.array([3.0])) == pytest.approx(3 - 2 * np.log(3))


@pytest.mark.parametrize("name", ["gaussian", "binomial", "poisson"])
def test_derivative_matches_finite_differences(name):
    fam = get_family(name)
    eta = np.linspace(-10, 10, 201)
    h = 1e-5
    fd = (fam.linkinv(eta + h) - fam.linkinv(eta - h)) / (2 * h)
    np.testing.assert_allclose(fam.mu_eta(eta), fd, rtol=1e-6)


@pytest.mark.parametrize("name", ["gaussian", "binomial", "poisson"])
def test_link_roundtrip(name):
    fam = get_family(name)
    eta = np.linspace(-5, 5, 11)
    np.testing.assert_allclose(fam.link(fam.linkinv(eta)), eta, atol=1e-10)


@given(st.sampled_from(["gaussian", "binomial", "poisson"]), st.floats(-20, 20), st.floats(1e-3, 5))
def test_inverse_links_strictly_increasing(name, eta, step):
    fam = get_family(name)
    assert fam.linkinv(np.array([eta + step]))[0] > fam.linkinv(np.array([eta]))[0]


def test_binomial_deviance_matches_definition():
    y = np.array([0.0, 1.0, 0.3, 1.0, 0.75])
    mu = np.array([0.2, 0.9, 0.5, 0.4, 0.75])
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(y > 0, y * np.log(y / mu), 0.0)
        t2 = np.where(y < 1, (1 - y) * np.log((1 - y) / (1 - mu)), 0.0)
    expected = 2 * np.sum(t1 + t2)
    assert get_family("binomial").deviance(y, mu) == pytest.approx(expected, rel=1e-12)
    assert get_family("binomial").deviance(np.array([0.0, 1.0]), np.array([0.5, 0.5])) == pytest.approx(4 * np.log(2))
