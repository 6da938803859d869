import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fgee._linalg import SPDFactor, coef_curves, expand_lambda
from fgee.basis import BasisSpec, build_basis, build_penalty
from fgee.initial_fit import pirls_fit
from fgee.onestep import (
    DEFAULT_STAGE_GRIDS,
    FoldCache,
    HeldOutScorer,
    OneStepInputs,
    build_inputs,
    cv_score,
    estimate_working_cov,
    fast_fold_estimate,
    gls_fit,
    make_cv_objective,
    make_folds,
    onestep_update,
    sequential_tune,
    standard_fold_estimate,
)
from fgee.workcov import WorkingCovModel

from conftest import dense_design, dense_V, random_dataset


def _problem(rng, family="gaussian", N=8, q=1, structure="exchangeable", functional=False, knots=2):
    ds = random_dataset(rng, N=N, q=q, family=family, functional=functional)
    spec = BasisSpec(degree=3, num_knots=knots)
    B = build_basis(spec, ds.grid)
    S = build_penalty(spec, ds.q)
    lam0 = np.full(q + 1, 0.5)
    theta0, _, _ = pirls_fit(ds, B, S, family, lam0)
    cov = estimate_working_cov(ds, B, family, theta0, structure)
    return ds, B, S, theta0, cov


def _dense_gls(ds, B, S, cov, lam):
    p = S.shape[0]
    H = ds.N * expand_lambda(lam, B.shape[1])[:, None] * S
    g = np.zeros(p)
    for i in range(ds.N):
        X = dense_design(ds, B, i)
        V = dense_V(cov.structure, cov.rho_at(ds.L), np.ones_like(ds.Y[i]))
        Vi = np.linalg.inv(V)
        H += X.T @ Vi @ X
        g += X.T @ Vi @ ds.Y[i].T.ravel()
    return np.linalg.solve(H, g)


@pytest.mark.parametrize("structure", ["independence", "exchangeable", "ar1"])
def test_gls_matches_dense(rng, structure):
    ds, B, S, _, cov = _problem(rng, structure=structure)
    lam = np.array([0.2, 0.7])
    np.testing.assert_allclose(gls_fit(ds, B, S, cov, lam), _dense_gls(ds, B, S, cov, lam), rtol=1e-9, atol=1e-10)


def test_gls_unpenalized_independence_is_ols(rng):
    ds, B, S, _, _ = _problem(rng, N=10)
    theta = gls_fit(ds, B, S, WorkingCovModel("independence"), np.zeros(2), dispersion=2.0)
    X = np.vstack([dense_design(ds, B, i) for i in range(ds.N)])
    y = np.concatenate([ds.Y[i].T.ravel() for i in range(ds.N)])
    np.testing.assert_allclose(theta, np.linalg.lstsq(X, y, rcond=None)[0], rtol=1e-8, atol=1e-9)


def test_gls_structure_collapse(rng):
    ds, B, S, _, _ = _problem(rng)
    lam = np.ones(2)
    ex = gls_fit(ds, B, S, WorkingCovModel("exchangeable", np.zeros(ds.L)), lam)
    ind = gls_fit(ds, B, S, WorkingCovModel("independence"), lam)
    np.testing.assert_allclose(ex, ind, rtol=1e-12, atol=1e-12)


def test_gls_rejects_non_gaussian(rng):
    ds, B, S, _, cov = _problem(rng)
    with pytest.raises(ValueError):
        gls_fit(ds, B, S, cov, np.ones(2), family="binomial")


@pytest.mark.parametrize("structure", ["exchangeable", "ar1"])
def test_gaussian_one_step_is_exact_for_any_start(rng, structure):
    ds, B, S, theta0, cov = _problem(rng, structure=structure, functional=True)
    lam = np.array([0.3, 3.0])
    a = onestep_update(build_inputs(ds, B, S, "gaussian", theta0, cov), lam)
    b = onestep_update(build_inputs(ds, B, S, "gaussian", rng.normal(size=theta0.size) * 5, cov), lam)
    ref = gls_fit(ds, B, S, cov, lam)
    np.testing.assert_allclose(a, ref, rtol=1e-8, atol=1e-9)
    np.testing.assert_allclose(b, ref, rtol=1e-8, atol=1e-9)


def test_fixed_point(rng):
    ds, B, S, _, cov = _problem(rng, family="binomial")
    lam = np.array([0.4, 0.4])
    inp = build_inputs(ds, B, S, "binomial", np.zeros(S.shape[0]), cov)
    theta = inp.theta0
    for _ in range(30):
        theta = onestep_update(build_inputs(ds, B, S, "binomial", theta, cov), lam)
    fixed = build_inputs(ds, B, S, "binomial", theta, cov)
    np.testing.assert_allclose(onestep_update(fixed, lam), theta, atol=1e-10)


def test_singular_update_names_eigenvalue():
    p = 4
    inp = OneStepInputs(np.zeros(p), np.zeros((2, p, p)), np.zeros((2, p)), np.zeros((p, p)), [1, 1])
    with pytest.raises(np.linalg.LinAlgError, match="smallest eigenvalue"):
        onestep_update(inp, np.zeros(1))


def test_inputs_length_mismatch():
    with pytest.raises(ValueError):
        OneStepInputs(np.zeros(2), np.zeros((3, 2, 2)), np.zeros((2, 2)), np.eye(2), [1, 1, 1])


def _toy_inputs(rng, n):
    N, p = len(n), 6
    W = np.stack([(lambda M: M @ M.T + np.eye(p))(rng.normal(size=(p, p))) for _ in range(N)])
    S = build_penalty(BasisSpec(degree=1, num_knots=1), 1)
    return OneStepInputs(rng.normal(size=p), W, rng.normal(size=(N, p)), S, np.asarray(n))


class TestFolds:
    def test_n_tilde_example(self, rng):
        inp = _toy_inputs(rng, [2, 3, 4, 2, 3, 4])
        cache = FoldCache(inp, [np.array([0, 1]), np.arange(2, 6)])
        assert cache.n_tilde[0] == pytest.approx(18 / 13)

    def test_n_tilde_half_held_out(self, rng):
        inp = _toy_inputs(rng, [3] * 6)
        assert FoldCache(inp, [np.arange(3), np.arange(3, 6)]).n_tilde[0] == pytest.approx(2.0)

    def test_n_star_equal_folds(self, rng):
        inp = _toy_inputs(rng, [5] * 10)
        cache = FoldCache(inp, make_folds(10, 5, seed=1), "standard")
        np.testing.assert_allclose(cache.n_star, 1 - 1 / 5)

    def test_empty_fold_collapses_to_full_update(self, rng):
        inp = _toy_inputs(rng, [2, 3, 4, 5])
        lam = np.array([0.3, 0.9])
        full = onestep_update(inp, lam)
        np.testing.assert_allclose(fast_fold_estimate(inp, lam, []), full, rtol=1e-12)
        np.testing.assert_allclose(standard_fold_estimate(inp, lam, []), full, rtol=1e-12)

    def test_empty_training_set(self, rng):
        inp = _toy_inputs(rng, [2, 2])
        with pytest.raises(ValueError, match="no training"):
            fast_fold_estimate(inp, np.ones(2), [0, 1])

    def test_cache_matches_direct(self, rng):
        inp = _toy_inputs(rng, [2, 3, 4, 2, 3, 4, 5])
        folds = make_folds(7, 3, seed=2)
        lam = np.array([0.5, 2.0])
        for method, f in (("fast", fast_fold_estimate), ("standard", standard_fold_estimate)):
            est = FoldCache(inp, folds, method).estimates(lam)
            for k, fold in enumerate(folds):
                np.testing.assert_allclose(est[k], f(inp, lam, fold), rtol=1e-10)

    def test_fold_average_identity(self, rng):
        inp = _toy_inputs(rng, [4] * 12)
        folds = make_folds(12, 4, seed=3)
        lam = np.array([0.7, 0.2])
        avg = np.mean([fast_fold_estimate(inp, lam, f) for f in folds], axis=0)
        pen = inp.penalty(lam)
        H = SPDFactor(inp.W.mean(axis=0) + pen)
        # each training set drops one K-th of the penalty bookkeeping
        np.testing.assert_allclose(avg, onestep_update(inp, lam) + H.solve(pen @ inp.theta0) / 4, rtol=1e-10)

    def test_fast_and_standard_agree(self):
        rng = np.random.default_rng(9)
        ds, B, S, theta0, cov = _problem(rng, N=80)
        inp = build_inputs(ds, B, S, "gaussian", theta0, cov)
        folds = make_folds(ds.N, 10, seed=0)
        lam = np.array([0.5, 0.5])
        fast = FoldCache(inp, folds, "fast").estimates(lam)
        std = FoldCache(inp, folds, "standard").estimates(lam)
        rel = np.linalg.norm(fast - std, axis=1) / np.linalg.norm(std, axis=1)
        assert rel.max() < 0.10

    @given(st.integers(2, 40), st.integers(2, 10), st.integers(0, 1000))
    def test_folds_partition(self, N, K, seed):
        if K > N:
            with pytest.raises(ValueError):
                make_folds(N, K, seed)
            return
        folds = make_folds(N, K, seed)
        allidx = np.concatenate(folds)
        assert sorted(allidx.tolist()) == list(range(N))
        sizes = [len(f) for f in folds]
        assert max(sizes) - min(sizes) <= 1

    def test_single_fold_rejected(self):
        with pytest.raises(ValueError):
            make_folds(5, 1)


class TestScores:
    def test_perfect_gaussian(self):
        B = np.ones((3, 1))
        Y = np.tile([2.0, 2.0, 2.0], (2, 1))
        assert cv_score([np.array([2.0])], [(Y, np.ones((2, 1)))], "gaussian", B=B) == 0.0

    def test_binomial_half(self):
        B = np.ones((4, 1))
        Y = np.array([[1.0, 0.0, 1.0, 1.0]])
        score = cv_score([np.zeros(1)], [(Y, np.ones((1, 1)))], "binomial", B=B)
        assert score == pytest.approx(4 * np.log(2))

    def test_binomial_hand_case(self):
        B = np.ones((3, 1))
        Y = np.array([[1.0, 0.0, 1.0]])
        theta = np.array([np.log(3.0)])  # mu = 0.75
        expected = -(np.log(0.75) + np.log(0.25) + np.log(0.75))
        assert cv_score([theta], [(Y, np.ones((1, 1)))], "binomial", B=B) == pytest.approx(expected, rel=1e-12)

    def test_mse(self):
        B = np.ones((2, 1))
        Y = np.array([[1.0, 3.0]])
        assert cv_score([np.array([1.0])], [(Y, np.ones((1, 1)))], "gaussian", "mse", B=B) == pytest.approx(4.0)

    def test_scorer_matches_cv_score(self, rng):
        ds, B, S, theta0, cov = _problem(rng, family="poisson")
        folds = make_folds(ds.N, 3, seed=0)
        thetas = np.stack([theta0 + 0.01 * k for k in range(3)])
        held = [ds.subset(f).stacked()[:2] for f in folds]
        a = HeldOutScorer(ds, B, "poisson", folds)(thetas)
        assert a == pytest.approx(cv_score(thetas, held, "poisson", B=B), rel=1e-12)

    def test_bad_criterion(self, rng):
        ds, B, *_ = _problem(rng)
        with pytest.raises(ValueError):
            HeldOutScorer(ds, B, "gaussian", [np.arange(2)], criterion="auc")


class TestSequentialTune:
    def test_stage_two_combinations(self):
        res = sequential_tune(lambda lam: float(np.sum(np.log(lam) ** 2)), np.ones(3))
        stages = [t["stage"] for t in res.trace]
        assert stages.count(1) == 7 and stages.count(2) == 343 and stages.count(3) == 125

    def test_flat_score_prefers_largest(self):
        res = sequential_tune(lambda lam: 1.0, np.array([1.0, 2.0]))
        top = 1e3 * 1e3 * 4.0
        np.testing.assert_allclose(res.lam, [top, 2 * top])

    def test_finds_separable_minimum(self):
        target = np.array([10.0, 0.01])
        res = sequential_tune(lambda lam: float(np.sum((np.log10(lam / target)) ** 2)), np.ones(2))
        np.testing.assert_allclose(res.lam, target, rtol=1e-12)

    def test_penalty_flattens_curves(self, rng):
        ds, B, S, theta0, cov = _problem(rng, family="binomial", knots=4)
        inp = build_inputs(ds, B, S, "binomial", theta0, cov)
        spread = []
        for lam in (1e-2, 1e2, 1e6):
            coef = coef_curves(onestep_update(inp, np.full(2, lam)), B)
            spread.append(np.ptp(coef, axis=1).max())
        assert spread[0] > spread[1] > spread[2] and spread[2] < 1e-4

    def test_cluster_permutation_invariance(self, rng):
        ds, B, S, theta0, cov = _problem(rng, family="binomial")
        inp = build_inputs(ds, B, S, "binomial", theta0, cov)
        perm = rng.permutation(ds.N)
        lam = np.array([0.2, 0.3])
        np.testing.assert_allclose(onestep_update(inp.subset(perm), lam), onestep_update(inp, lam), rtol=1e-10)

    def test_cv_objective_is_deterministic(self, rng):
        ds, B, S, theta0, cov = _problem(rng, N=12)
        inp = build_inputs(ds, B, S, "gaussian", theta0, cov)
        folds = make_folds(ds.N, 4, seed=5)
        f = make_cv_objective(inp, ds, B, "gaussian", folds)
        g = make_cv_objective(inp, ds, B, "gaussian", folds, method="standard")
        lam = np.array([0.5, 0.5])
        assert f(lam) == f(lam)
        assert abs(f(lam) - g(lam)) < 0.1 * abs(g(lam))

    def test_default_grids(self):
        assert DEFAULT_STAGE_GRIDS[0] == (1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3)
        assert min(DEFAULT_STAGE_GRIDS[2]) >= 0.1 and max(DEFAULT_STAGE_GRIDS[2]) <= 10
