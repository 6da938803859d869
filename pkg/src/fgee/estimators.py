"""Scikit-learn style estimators for longitudinal functional regression.

:class:`OneStepFGEE` runs the full pipeline: a working-independence
penalized fit, correlation estimation, cross-validated tuning of the one-step
smoothing parameters, the one-step update, re-estimation of the working
covariance at the update, and sandwich or bootstrap inference with bands.
:class:`FoSR` stops after the initial fit; :class:`PenalizedGLS` solves the
Gaussian penalized GLS in closed form.
"""

import time
import warnings

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from fgee._linalg import coef_curves
from fgee.basis import BasisSpec, build_basis, build_penalty
from fgee.data import FunctionalDataset, check_functional_data
from fgee.glm import estimate_dispersion, get_family, pearson_residuals
from fgee.inference import build_bands, fast_cluster_bootstrap, sandwich_variance
from fgee.initial_fit import select_lambda0
from fgee.onestep import (
    DEFAULT_STAGE_GRIDS,
    build_inputs,
    cluster_state,
    estimate_working_cov,
    gls_inputs,
    make_cv_objective,
    make_folds,
    onestep_update,
    sequential_tune,
)
from fgee.workcov import STRUCTURES, WorkingCovModel


def _as_dataset(X, Y, groups, grid):
    if isinstance(X, FunctionalDataset):
        if Y is not None or groups is not None:
            raise ValueError("pass either a FunctionalDataset or (X, Y, groups), not both")
        return X
    if Y is None or groups is None:
        raise ValueError("Y and groups are required unless X is a FunctionalDataset")
    return check_functional_data(X, Y, groups, grid)


def dispersion_at(dataset, B, family, theta):
    """Pearson dispersion ``sum e^2 / (n - p)`` over every observation and grid point."""
    family = get_family(family)
    if family.fixed_dispersion:
        return 1.0
    coef = coef_curves(theta, B)
    total = []
    for i in range(dataset.N):
        mu = family.linkinv(dataset.linear_predictor(coef, i))
        total.append(pearson_residuals(family, dataset.Y[i], mu).ravel())
    return estimate_dispersion(family, np.concatenate(total), theta.size)


class _FunctionalRegressor(BaseEstimator):
    """Shared basis handling, validation, prediction and band construction."""

    def _validate_params(self):
        if self.variance not in ("sandwich", "bootstrap"):
            raise ValueError("variance must be 'sandwich' or 'bootstrap'")
        if self.band not in ("parametric", "nonparametric"):
            raise ValueError("band must be 'parametric' or 'nonparametric'")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.band == "nonparametric" and self.variance != "bootstrap":
            raise ValueError("nonparametric bands need variance='bootstrap'")

    def _setup(self, X, Y, groups, grid):
        self._validate_params()
        data = _as_dataset(X, Y, groups, grid)
        lo, hi = float(data.grid[0]), float(data.grid[-1])
        self.basis_spec_ = BasisSpec(
            self.degree, self.n_knots, (lo, hi), self.penalty_order, self.knot_convention
        )
        self.grid_ = data.grid
        self.basis_ = build_basis(self.basis_spec_, data.grid)
        self.penalty_ = build_penalty(self.basis_spec_, data.q)
        self.family_ = get_family(self.family)
        self.n_features_in_ = data.q
        self.timing_ = {}
        self.warnings_ = []
        return data

    def _tick(self, key, start):
        self.timing_[key] = self.timing_.get(key, 0.0) + time.perf_counter() - start
        return time.perf_counter()

    def _initial(self, data):
        init = select_lambda0(data, self.basis_, self.penalty_, self.family_, self.gcv_grid, self.refine_lambda0)
        if not init.converged:
            self.warnings_.append("initial penalized IRLS did not converge")
        self.initial_fit_ = init
        self.lambda0_ = init.lambda0
        return init

    def _bands(self, theta, theta_cov):
        self.theta_cov_ = theta_cov
        if theta_cov.flags.get("jitter"):
            self.warnings_.append("variance Hessian needed a jitter fallback")
        if theta_cov.flags.get("degenerate"):
            self.warnings_.append("bootstrap replicates are degenerate")
        self.bands_ = build_bands(
            theta, theta_cov, self.basis_, self.alpha, self.band, self.n_band_draws, self.random_state + 2
        )
        self.se_ = self.bands_.se

    def _finish(self):
        if self.family_.clamps.count:
            self.warnings_.append(f"linear predictor clamped at {self.family_.clamps.count} entries")
        self.timing_["total"] = sum(v for k, v in self.timing_.items() if k != "total")

    def _variance(self, inputs_at_estimate, inputs_for_boot, lam):
        if self.variance == "sandwich":
            return sandwich_variance(inputs_at_estimate, lam)
        return fast_cluster_bootstrap(inputs_for_boot, lam, self.n_boot, self.random_state + 1)

    def predict(self, X):
        """Mean curves ``g^{-1}(sum_r x_r beta_r(s))`` for each covariate row.

        Parameters
        ----------
        X : array-like of shape (n, q) or (n, L, q), or None for intercept-only fits

        Returns
        -------
        ndarray of shape (n, L)
        """
        check_is_fitted(self, "coef_")
        if X is None:
            X = np.zeros((1, 0))
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, self.n_features_in_) if self.n_features_in_ else X.reshape(-1, 0)
        if X.shape[-1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[-1]} covariates; the model was fit with {self.n_features_in_}")
        if X.ndim == 2:
            eta = self.coef_[0][None] + X @ self.coef_[1:]
        elif X.ndim == 3:
            if X.shape[1] != self.grid_.size:
                raise ValueError("functional covariates must be on the fitted grid")
            eta = self.coef_[0][None] + np.einsum("nlq,ql->nl", X, self.coef_[1:])
        else:
            raise ValueError("X must be 2-d or 3-d")
        return self.family_.linkinv(eta)


class OneStepFGEE(_FunctionalRegressor):
    """One-step penalized functional GEE.

    Parameters
    ----------
    family : {'gaussian', 'binomial', 'poisson'}, default='gaussian'
    corr : {'independence', 'exchangeable', 'ar1'}, default='exchangeable'
        Pointwise working correlation across longitudinal observations.
    n_knots : int, default=10
        Interior knots per coefficient (see ``knot_convention``).
    degree : int, default=3
    penalty_order : int, default=1
    knot_convention : {'interior', 'basis'}, default='interior'
    cv : {'fast', 'standard'}, default='fast'
        Fold estimator used when tuning the one-step smoothing parameters.
    n_folds : int, default=10
    criterion : {'nll', 'mse'}, default='nll'
    stage_grids : tuple of three sequences, optional
        Multipliers for the three tuning stages.
    gcv_grid : sequence, optional
        Multipliers for the initial-fit GCV search.
    refine_lambda0 : bool, default=False
        Refine the initial smoothing parameters one block at a time.
    lambda1 : array-like of shape (q + 1,), optional
        Fixed one-step smoothing parameters; skips tuning.
    variance : {'sandwich', 'bootstrap'}, default='sandwich'
    band : {'parametric', 'nonparametric'}, default='parametric'
    n_boot : int, default=1000
    n_band_draws : int, default=1000
    alpha : float, default=0.05
    smooth_rho : bool, default=False
        Moving-average smoothing of the correlation estimates across the grid.
    rho_window : int, default=5
    rho_eps : float, default=1e-3
    random_state : int, default=0

    Attributes
    ----------
    coef_ : ndarray of shape (q + 1, L)
    theta_ : ndarray of shape (p,)
    bands_ : BandSet
    rho_ : dict
        ``'pass1'`` and ``'pass2'`` correlation curves.
    lambda0_, lambda1_ : ndarray of shape (q + 1,)
    tuning_ : TuningResult or None
    timing_ : dict
    warnings_ : list of str
    """

    def __init__(
        self,
        family="gaussian",
        corr="exchangeable",
        n_knots=10,
        degree=3,
        penalty_order=1,
        knot_convention="interior",
        cv="fast",
        n_folds=10,
        criterion="nll",
        stage_grids=None,
        gcv_grid=None,
        refine_lambda0=False,
        lambda1=None,
        variance="sandwich",
        band="parametric",
        n_boot=1000,
        n_band_draws=1000,
        alpha=0.05,
        smooth_rho=False,
        rho_window=5,
        rho_eps=1e-3,
        random_state=0,
    ):
        self.family = family
        self.corr = corr
        self.n_knots = n_knots
        self.degree = degree
        self.penalty_order = penalty_order
        self.knot_convention = knot_convention
        self.cv = cv
        self.n_folds = n_folds
        self.criterion = criterion
        self.stage_grids = stage_grids
        self.gcv_grid = gcv_grid
        self.refine_lambda0 = refine_lambda0
        self.lambda1 = lambda1
        self.variance = variance
        self.band = band
        self.n_boot = n_boot
        self.n_band_draws = n_band_draws
        self.alpha = alpha
        self.smooth_rho = smooth_rho
        self.rho_window = rho_window
        self.rho_eps = rho_eps
        self.random_state = random_state

    def _workcov(self, data, theta, phi):
        cov = estimate_working_cov(
            data, self.basis_, self.family_, theta, self.corr, phi,
            eps=self.rho_eps, smooth=self.smooth_rho, window=self.rho_window,
        )
        if cov.flags.get("truncated_points"):
            self.warnings_.append(
                f"correlation truncated at {cov.flags['truncated_points']} grid points"
            )
        return cov

    def anchor_lambda(self, data, lambda0, phi):
        """Initial-fit smoothing parameters on the averaged one-step scale."""
        return np.asarray(lambda0, dtype=float) / (data.N * phi)

    def fit(self, X, Y=None, groups=None, grid=None):
        """Fit on ``(X, Y, groups)`` arrays or on a :class:`FunctionalDataset` passed as ``X``."""
        if self.corr not in STRUCTURES:
            raise ValueError(f"corr must be one of {STRUCTURES}")
        data = self._setup(X, Y, groups, grid)
        t = time.perf_counter()
        init = self._initial(data)
        theta0 = init.theta0
        t = self._tick("initial_fit", t)

        phi0 = dispersion_at(data, self.basis_, self.family_, theta0)
        cov1 = self._workcov(data, theta0, phi0)
        t = self._tick("rho_estimation", t)
        # per-cluster summaries are the N-linear part of the one-step stage
        inputs = build_inputs(data, self.basis_, self.penalty_, self.family_, theta0, cov1, phi0)
        t = self._tick("update", t)

        self.tuning_ = None
        if self.lambda1 is None:
            folds = make_folds(data.N, self.n_folds, self.random_state)
            objective = make_cv_objective(
                inputs, data, self.basis_, self.family_, folds, self.cv, self.criterion, phi0
            )
            grids = DEFAULT_STAGE_GRIDS if self.stage_grids is None else self.stage_grids
            self.tuning_ = sequential_tune(objective, self.anchor_lambda(data, init.lambda0, phi0), grids)
            lam1 = self.tuning_.lam
        else:
            lam1 = np.broadcast_to(np.asarray(self.lambda1, dtype=float), (data.q + 1,)).copy()
        t = self._tick("tuning", t)

        theta1 = onestep_update(inputs, lam1)
        t = self._tick("update", t)

        phi1 = dispersion_at(data, self.basis_, self.family_, theta1)
        cov2 = self._workcov(data, theta1, phi1)
        t = self._tick("rho_estimation", t)
        inputs1 = None
        if self.variance == "sandwich":
            inputs1 = build_inputs(data, self.basis_, self.penalty_, self.family_, theta1, cov2, phi1)
        self._bands(theta1, self._variance(inputs1, inputs, lam1))
        t = self._tick("variance", t)

        self.theta0_ = theta0
        self.theta_ = theta1
        self.coef_ = coef_curves(theta1, self.basis_)
        self.lambda1_ = lam1
        self.dispersion_ = {"pass1": phi0, "pass2": phi1}
        self.rho_ = {"pass1": cov1.rho_at(data.L), "pass2": cov2.rho_at(data.L)}
        self.workcov_ = cov2
        self._finish()
        return self


class FoSR(_FunctionalRegressor):
    """Working-independence penalized fit with sandwich inference.

    The smoothing parameters are chosen by GCV; bands use the independence
    sandwich at the initial estimate. Parameters match :class:`OneStepFGEE`
    where they apply.
    """

    def __init__(
        self,
        family="gaussian",
        n_knots=10,
        degree=3,
        penalty_order=1,
        knot_convention="interior",
        gcv_grid=None,
        refine_lambda0=False,
        variance="sandwich",
        band="parametric",
        n_boot=1000,
        n_band_draws=1000,
        alpha=0.05,
        random_state=0,
    ):
        self.family = family
        self.n_knots = n_knots
        self.degree = degree
        self.penalty_order = penalty_order
        self.knot_convention = knot_convention
        self.gcv_grid = gcv_grid
        self.refine_lambda0 = refine_lambda0
        self.variance = variance
        self.band = band
        self.n_boot = n_boot
        self.n_band_draws = n_band_draws
        self.alpha = alpha
        self.random_state = random_state

    def fit(self, X, Y=None, groups=None, grid=None):
        data = self._setup(X, Y, groups, grid)
        t = time.perf_counter()
        init = self._initial(data)
        t = self._tick("initial_fit", t)
        phi = dispersion_at(data, self.basis_, self.family_, init.theta0)
        lam = init.lambda0 / (data.N * phi)
        cov = WorkingCovModel("independence", np.zeros(data.L))
        inputs = build_inputs(data, self.basis_, self.penalty_, self.family_, init.theta0, cov, phi)
        self._bands(init.theta0, self._variance(inputs, inputs, lam))
        t = self._tick("variance", t)
        self.theta_ = init.theta0
        self.coef_ = coef_curves(init.theta0, self.basis_)
        self.lambda1_ = lam
        self.dispersion_ = {"pass1": phi}
        self.rho_ = {"pass1": np.zeros(data.L)}
        self._finish()
        return self


class PenalizedGLS(_FunctionalRegressor):
    """Closed-form penalized GLS for Gaussian outcomes.

    The working correlation is estimated from the initial working-independence
    fit, the smoothing parameters are tuned by cluster cross-validation, and
    the correlation is re-estimated at the GLS solution before the sandwich.
    """

    def __init__(
        self,
        corr="exchangeable",
        n_knots=10,
        degree=3,
        penalty_order=1,
        knot_convention="interior",
        cv="fast",
        n_folds=10,
        criterion="nll",
        stage_grids=None,
        gcv_grid=None,
        refine_lambda0=False,
        lambda1=None,
        variance="sandwich",
        band="parametric",
        n_boot=1000,
        n_band_draws=1000,
        alpha=0.05,
        rho_eps=1e-3,
        random_state=0,
    ):
        self.corr = corr
        self.n_knots = n_knots
        self.degree = degree
        self.penalty_order = penalty_order
        self.knot_convention = knot_convention
        self.cv = cv
        self.n_folds = n_folds
        self.criterion = criterion
        self.stage_grids = stage_grids
        self.gcv_grid = gcv_grid
        self.refine_lambda0 = refine_lambda0
        self.lambda1 = lambda1
        self.variance = variance
        self.band = band
        self.n_boot = n_boot
        self.n_band_draws = n_band_draws
        self.alpha = alpha
        self.rho_eps = rho_eps
        self.random_state = random_state

    family = "gaussian"

    def fit(self, X, Y=None, groups=None, grid=None):
        if self.corr not in STRUCTURES:
            raise ValueError(f"corr must be one of {STRUCTURES}")
        data = self._setup(X, Y, groups, grid)
        t = time.perf_counter()
        init = self._initial(data)
        t = self._tick("initial_fit", t)
        B, S = self.basis_, self.penalty_
        phi0 = dispersion_at(data, B, "gaussian", init.theta0)
        cov1 = estimate_working_cov(data, B, "gaussian", init.theta0, self.corr, phi0, eps=self.rho_eps)
        inputs = gls_inputs(data, B, S, cov1, phi0)
        t = self._tick("rho_estimation", t)
        self.tuning_ = None
        if self.lambda1 is None:
            folds = make_folds(data.N, self.n_folds, self.random_state)
            objective = make_cv_objective(inputs, data, B, "gaussian", folds, self.cv, self.criterion, phi0)
            grids = DEFAULT_STAGE_GRIDS if self.stage_grids is None else self.stage_grids
            self.tuning_ = sequential_tune(objective, init.lambda0 / (data.N * phi0), grids)
            lam = self.tuning_.lam
        else:
            lam = np.broadcast_to(np.asarray(self.lambda1, dtype=float), (data.q + 1,)).copy()
        t = self._tick("tuning", t)
        theta = onestep_update(inputs, lam)
        t = self._tick("update", t)
        phi1 = dispersion_at(data, B, "gaussian", theta)
        cov2 = estimate_working_cov(data, B, "gaussian", theta, self.corr, phi1, eps=self.rho_eps)
        at_est = build_inputs(data, B, S, "gaussian", theta, cov2, phi1)
        self._bands(theta, self._variance(at_est, inputs, lam))
        t = self._tick("variance", t)
        self.theta_ = theta
        self.coef_ = coef_curves(theta, B)
        self.lambda1_ = lam
        self.dispersion_ = {"pass1": phi0, "pass2": phi1}
        self.rho_ = {"pass1": cov1.rho_at(data.L), "pass2": cov2.rho_at(data.L)}
        self._finish()
        return self
