import numpy as np
import pytest

from fgee._linalg import coef_curves, expand_lambda
from fgee.basis import BasisSpec, build_basis, build_penalty
from fgee.data import FunctionalDataset
from fgee.glm import get_family
from fgee.initial_fit import SingularDesignError, pirls_fit, select_lambda0

from conftest import dense_design, random_dataset


def _setup(ds, knots=2):
    spec = BasisSpec(degree=3, num_knots=knots)
    B = build_basis(spec, ds.grid)
    return B, build_penalty(spec, ds.q)


def test_gaussian_matches_dense_ridge(rng):
    ds = random_dataset(rng, N=5, q=2)
    B, S = _setup(ds)
    lam = np.array([0.3, 1.0, 2.0])
    theta, conv, _ = pirls_fit(ds, B, S, "gaussian", lam)
    X = np.vstack([dense_design(ds, B, i) for i in range(ds.N)])
    y = np.concatenate([ds.Y[i].T.ravel() for i in range(ds.N)])
    pen = expand_lambda(lam, B.shape[1])[:, None] * S
    np.testing.assert_allclose(theta, np.linalg.solve(X.T @ X + pen, X.T @ y), rtol=1e-9, atol=1e-10)
    assert conv


def test_functional_covariates_match_dense(rng):
    ds = random_dataset(rng, N=4, functional=True)
    B, S = _setup(ds)
    lam = np.array([0.5, 0.5])
    theta, _, _ = pirls_fit(ds, B, S, "gaussian", lam)
    X = np.vstack([dense_design(ds, B, i) for i in range(ds.N)])
    y = np.concatenate([ds.Y[i].T.ravel() for i in range(ds.N)])
    pen = expand_lambda(lam, B.shape[1])[:, None] * S
    np.testing.assert_allclose(theta, np.linalg.solve(X.T @ X + pen, X.T @ y), rtol=1e-9, atol=1e-10)


def test_constant_response_recovers_constant():
    grid = np.linspace(0, 1, 9)
    ds = FunctionalDataset([np.full((3, 9), 2.5)] * 4, [np.ones((3, 1))] * 4, grid)
    B, S = _setup(ds)
    fit = select_lambda0(ds, B, S, "gaussian")
    np.testing.assert_allclose(coef_curves(fit.theta0, B), 2.5, atol=1e-8)


def test_all_ones_binary_stays_finite():
    grid = np.linspace(0, 1, 8)
    ds = FunctionalDataset([np.ones((3, 8))] * 5, [np.ones((3, 1))] * 5, grid)
    B, S = _setup(ds)
    fit = select_lambda0(ds, B, S, "binomial")
    assert np.all(np.isfinite(fit.theta0))
    assert np.all(coef_curves(fit.theta0, B) > 3)


def test_gcv_smooths_noise_more_than_signal():
    rng = np.random.default_rng(3)
    grid = np.linspace(0, 1, 40)
    truth = np.sin(6 * grid)
    Z = [np.ones((4, 1))] * 10
    noisy = FunctionalDataset([rng.normal(scale=3, size=(4, 40)) for _ in range(10)], Z, grid)
    clean = FunctionalDataset([np.tile(truth, (4, 1)) + 1e-3 * rng.normal(size=(4, 40)) for _ in range(10)], Z, grid)
    B, S = _setup(noisy, knots=10)
    assert select_lambda0(noisy, B, S, "gaussian").lambda0[0] > 100 * select_lambda0(clean, B, S, "gaussian").lambda0[0]


def test_singular_design_raises():
    grid = np.linspace(0, 1, 6)
    # second covariate duplicates the intercept and carries no penalty on its null space
    Z = [np.ones((2, 2))] * 3
    ds = FunctionalDataset([np.zeros((2, 6))] * 3, Z, grid)
    B, S = _setup(ds)
    with pytest.raises(SingularDesignError, match="block"):
        pirls_fit(ds, B, S, "gaussian", np.zeros(2))


def test_grid_validation(rng):
    ds = random_dataset(rng)
    B, S = _setup(ds)
    with pytest.raises(ValueError):
        select_lambda0(ds, B, S, "gaussian", grid=[])
    with pytest.raises(ValueError):
        select_lambda0(ds, B, S, "gaussian", grid=[1.0, -1.0])


@pytest.mark.parametrize("family", ["binomial", "poisson"])
def test_penalized_score_vanishes_at_convergence(rng, family):
    ds = random_dataset(rng, N=8, family=family)
    B, S = _setup(ds)
    lam = np.array([0.5, 0.5])
    theta, conv, _ = pirls_fit(ds, B, S, family, lam, tol=1e-12, max_iter=100)
    assert conv
    fam = get_family(family)
    score = np.zeros_like(theta)
    for i in range(ds.N):
        X = dense_design(ds, B, i)
        y = ds.Y[i].T.ravel()
        score += X.T @ (y - fam.linkinv(X @ theta))
    pen = expand_lambda(lam, B.shape[1])[:, None] * S
    np.testing.assert_allclose(score - pen @ theta, 0.0, atol=1e-7)


def test_refine_blocks_never_worsens_gcv(rng):
    ds = random_dataset(rng, N=8, q=2)
    B, S = _setup(ds)
    base = select_lambda0(ds, B, S, "gaussian")
    refined = select_lambda0(ds, B, S, "gaussian", refine_blocks=True)
    best = min(s for _, s in base.gcv_trace)
    assert min(s for _, s in refined.gcv_trace) <= best + 1e-12
