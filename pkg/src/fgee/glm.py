"""Quasi-likelihood families: links, variance functions and residuals."""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, xlogy

ETA_BOUND = 35.0
VAR_FLOOR = 1e-10
DISPERSION_FLOOR = 1e-10


@dataclass
class ClampCounter:
    """Running count of linear-predictor entries clamped to ``[-35, 35]``."""

    count: int = 0


class Family:
    """Base class for the supported exponential-dispersion families."""

    name = None
    fixed_dispersion = True

    def __init__(self):
        self.clamps = ClampCounter()

    def __repr__(self):
        return f"{type(self).__name__}()"

    def __eq__(self, other):
        return type(self) is type(other)

    def __hash__(self):
        return hash(type(self))

    def _clamp(self, eta):
        eta = np.asarray(eta, dtype=float)
        out = np.clip(eta, -ETA_BOUND, ETA_BOUND)
        self.clamps.count += int(np.count_nonzero(out != eta))
        return out

    def linkinv(self, eta):
        raise NotImplementedError

    def mu_eta(self, eta):
        """Derivative of the inverse link with respect to ``eta``."""
        raise NotImplementedError

    def variance(self, mu):
        """Raw variance function ``v(mu)`` (dispersion excluded), floored."""
        raise NotImplementedError

    def link(self, mu):
        raise NotImplementedError

    def deviance(self, y, mu):
        """Total deviance ``sum of unit deviances``."""
        raise NotImplementedError

    def nll(self, y, mu, dispersion=1.0):
        """Negative quasi-log-likelihood kernel summed over observations."""
        raise NotImplementedError

    def clip_mu(self, mu):
        return mu


class Gaussian(Family):
    name = "gaussian"
    fixed_dispersion = False

    def linkinv(self, eta):
        return np.asarray(eta, dtype=float)

    def mu_eta(self, eta):
        return np.ones_like(np.asarray(eta, dtype=float))

    def variance(self, mu):
        return np.ones_like(np.asarray(mu, dtype=float))

    def link(self, mu):
        return np.asarray(mu, dtype=float)

    def deviance(self, y, mu):
        return float(np.sum((np.asarray(y) - mu) ** 2))

    def nll(self, y, mu, dispersion=1.0):
        return float(np.sum((np.asarray(y) - mu) ** 2) / (2.0 * dispersion))


class Binomial(Family):
    name = "binomial"

    def linkinv(self, eta):
        return expit(self._clamp(eta))

    def mu_eta(self, eta):
        mu = expit(self._clamp(eta))
        return mu * (1.0 - mu)

    def variance(self, mu):
        mu = np.asarray(mu, dtype=float)
        return np.maximum(mu * (1.0 - mu), VAR_FLOOR)

    def link(self, mu):
        mu = self.clip_mu(np.asarray(mu, dtype=float))
        return np.log(mu / (1.0 - mu))

    def clip_mu(self, mu):
        return np.clip(mu, 1e-15, 1.0 - 1e-15)

    def deviance(self, y, mu):
        y = np.asarray(y, dtype=float)
        # twice the nll excess over the saturated model, which is 0 for 0/1 data
        saturated = 0.0
        if not np.all((y == 0.0) | (y == 1.0)):
            saturated = -float(np.sum(xlogy(y, y) + xlogy(1.0 - y, 1.0 - y)))
        return 2.0 * (self.nll(y, mu) - saturated)

    def nll(self, y, mu, dispersion=1.0):
        y = np.asarray(y, dtype=float)
        mu = self.clip_mu(mu)
        return float(-np.sum(y * np.log(mu) + (1.0 - y) * np.log1p(-mu)))


class Poisson(Family):
    name = "poisson"

    def linkinv(self, eta):
        return np.exp(self._clamp(eta))

    def mu_eta(self, eta):
        return np.exp(self._clamp(eta))

    def variance(self, mu):
        return np.maximum(np.asarray(mu, dtype=float), VAR_FLOOR)

    def link(self, mu):
        return np.log(np.maximum(np.asarray(mu, dtype=float), 1e-15))

    def clip_mu(self, mu):
        return np.maximum(mu, 1e-15)

    def deviance(self, y, mu):
        y = np.asarray(y, dtype=float)
        mu = self.clip_mu(mu)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(y > 0, y * np.log(y / mu), 0.0)
        return float(2.0 * np.sum(t - (y - mu)))

    def nll(self, y, mu, dispersion=1.0):
        y = np.asarray(y, dtype=float)
        mu = self.clip_mu(mu)
        return float(np.sum(mu - y * np.log(mu)))


FAMILIES = {"gaussian": Gaussian, "binomial": Binomial, "poisson": Poisson}


def get_family(family) -> Family:
    if isinstance(family, Family):
        return family
    try:
        return FAMILIES[str(family).lower()]()
    except KeyError:
        raise ValueError(
            f"unknown family {family!r}; expected one of {sorted(FAMILIES)}"
        ) from None


@dataclass
class MeanState:
    """Linear predictor, mean, derivative weights and variance entries."""

    eta: np.ndarray
    mu: np.ndarray
    deriv: np.ndarray
    var: np.ndarray
    clamped: int = 0
    extra: dict = field(default_factory=dict)


def mean_and_derivative(family, X, theta, dispersion=1.0) -> MeanState:
    """Evaluate ``eta = X theta``, ``mu``, ``g^{-1}'(eta)`` and ``phi * v(mu)``.

    The derivative matrix is ``diag(deriv) @ X``; only the weight vector is
    returned so callers can apply it without materialising the product.
    """
    family = get_family(family)
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    before = family.clamps.count
    eta = np.asarray(X, dtype=float) @ theta
    mu = family.linkinv(eta)
    # second call sees already-clamped values, so each entry counts once
    deriv = family.mu_eta(np.clip(eta, -ETA_BOUND, ETA_BOUND))
    var = family.variance(mu) * dispersion
    return MeanState(eta, mu, deriv, var, clamped=family.clamps.count - before)


def pearson_residuals(family, y, mu) -> np.ndarray:
    """``(y - mu) / sqrt(v(mu))`` with the raw (dispersion-free) variance."""
    family = get_family(family)
    v = np.maximum(family.variance(mu), VAR_FLOOR)
    return (np.asarray(y, dtype=float) - mu) / np.sqrt(v)


def estimate_dispersion(family, residuals, dof: int) -> float:
    family = get_family(family)
    if family.fixed_dispersion:
        return 1.0
    residuals = np.asarray(residuals, dtype=float)
    n = residuals.size
    if n <= dof:
        raise ValueError(f"need more observations ({n}) than degrees of freedom ({dof})")
    phi = float(np.sum(residuals**2) / (n - dof))
    return max(phi, DISPERSION_FLOOR)
