"""Sandwich and fast-bootstrap variances, and pointwise / joint confidence bands."""

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import norm

from fgee._linalg import SPDFactor, coef_curves


@dataclass
class ThetaCovariance:
    matrix: np.ndarray
    source: str
    boot_reps: Optional[int] = None
    draws: Optional[np.ndarray] = None
    flags: dict = field(default_factory=dict)


@dataclass
class BandSet:
    """Per-coefficient curves and bands; arrays are ``(q + 1, L)``."""

    estimate: np.ndarray
    se: np.ndarray
    pw_lo: np.ndarray
    pw_hi: np.ndarray
    joint_lo: np.ndarray
    joint_hi: np.ndarray
    alpha: float
    q_joint: np.ndarray
    method: str = "parametric"


def _symmetrize(A):
    return 0.5 * (A + A.T)


def sandwich_variance(inputs, lam) -> ThetaCovariance:
    """``(1/N) H^{-1} M H^{-1}`` evaluated at ``inputs.theta0``.

    ``inputs`` must hold ``W_i`` and ``b_i`` computed at the estimate whose
    variance is wanted (with the working covariance re-estimated there).
    """
    pen = inputs.penalty(lam)
    N = inputs.N
    H = inputs.W.mean(axis=0) + pen
    U = inputs.b - (pen @ inputs.theta0)[None]
    M = U.T @ U / N
    factor = SPDFactor(H, "sandwich bread")
    Hinv_M = factor.solve(M)
    V = factor.solve(Hinv_M.T).T / N
    return ThetaCovariance(_symmetrize(V), "sandwich", flags={"jitter": factor.jittered})


def fast_cluster_bootstrap(inputs, lam, T=1000, seed=0) -> ThetaCovariance:
    """Cluster bootstrap of the one-step update with a fixed Hessian factor.

    Each replicate resamples ``N`` clusters with replacement and re-weights
    the score sum by ``n_tilde = sum n_i / sum_{resampled} n_i``.
    """
    if T < 2:
        raise ValueError("T must be at least 2")
    N = inputs.N
    pen = inputs.penalty(lam)
    factor = SPDFactor(inputs.W.mean(axis=0) + pen, "one-step Hessian")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, N, size=(T, N))
    counts = np.zeros((T, N))
    np.add.at(counts, (np.repeat(np.arange(T), N), idx.ravel()), 1.0)
    n = inputs.n_per_cluster
    n_tilde = n.sum() / (counts @ n)
    rhs = (n_tilde[:, None] * (counts @ inputs.b) - N * (pen @ inputs.theta0)[None]) / N
    draws = inputs.theta0[None] + factor.solve(rhs.T).T
    cov = _symmetrize(np.cov(draws, rowvar=False))
    flags = {"jitter": factor.jittered}
    if np.allclose(draws, draws[0]):
        flags["degenerate"] = True
    return ThetaCovariance(cov, "fast_bootstrap", T, draws, flags)


def beta_covariance(theta_cov, B, q):
    """Diagonal ``L x L`` blocks ``B Sigma_r B^T`` for each of the ``q + 1`` coefficients."""
    m = B.shape[1]
    theta_cov = np.asarray(theta_cov, dtype=float)
    if theta_cov.shape != ((q + 1) * m, (q + 1) * m):
        raise ValueError(f"theta_cov must be {(q + 1) * m} x {(q + 1) * m}")
    return [B @ theta_cov[r * m : (r + 1) * m, r * m : (r + 1) * m] @ B.T for r in range(q + 1)]


def beta_se(theta_cov, B, q):
    """Pointwise standard errors ``(q + 1, L)`` without forming ``L x L`` blocks."""
    m = B.shape[1]
    out = np.empty((q + 1, B.shape[0]))
    for r in range(q + 1):
        Sr = theta_cov[r * m : (r + 1) * m, r * m : (r + 1) * m]
        out[r] = np.sqrt(np.maximum(np.einsum("ld,de,le->l", B, Sr, B), 0.0))
    return out


def normal_quantile(alpha):
    return float(norm.ppf(1.0 - alpha / 2.0))


def pointwise_band(beta, se, alpha=0.05):
    se = np.asarray(se, dtype=float)
    if np.any(se < 0):
        raise ValueError("standard errors must be non-negative")
    z = normal_quantile(alpha)
    return beta - z * se, beta + z * se


def _max_stat_quantile(dev, sd, alpha):
    keep = sd > 0
    if not keep.any():
        return 0.0
    stats = np.max(np.abs(dev[:, keep]) / sd[keep], axis=1)
    return float(np.quantile(stats, 1.0 - alpha))


def joint_quantile_parametric(Sigma_r, alpha=0.05, T=1000, seed=0) -> float:
    """``1 - alpha`` quantile of ``max_d |theta_d| / sd_d`` under ``N(0, Sigma_r)``."""
    if T < 100:
        raise ValueError("T must be at least 100 for the parametric joint band")
    Sigma_r = _symmetrize(np.asarray(Sigma_r, dtype=float))
    evals, evecs = np.linalg.eigh(Sigma_r)
    if evals.min() < -1e-10 * max(evals.max(), 1e-300):
        warnings.warn("covariance block is not PSD; clipping negative eigenvalues")
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))
    rng = np.random.default_rng(seed)
    draws = rng.standard_normal((T, Sigma_r.shape[0])) @ root.T
    return _max_stat_quantile(draws, np.sqrt(np.clip(np.diag(Sigma_r), 0.0, None)), alpha)


def joint_quantile_nonparametric(draws_r, alpha=0.05) -> float:
    """Max-statistic quantile from bootstrap draws centred at their mean."""
    draws_r = np.asarray(draws_r, dtype=float)
    T = draws_r.shape[0]
    dev = draws_r - draws_r.mean(axis=0)
    sd = dev.std(axis=0, ddof=1)
    if T < 1.0 / alpha:
        warnings.warn(f"only {T} bootstrap draws for alpha={alpha}; returning the sample maximum")
        keep = sd > 0
        if not keep.any():
            return 0.0
        return float(np.max(np.abs(dev[:, keep]) / sd[keep]))
    return _max_stat_quantile(dev, sd, alpha)


def build_bands(theta, theta_cov: ThetaCovariance, B, alpha=0.05, method="parametric", T=1000, seed=0) -> BandSet:
    """Pointwise and joint bands for every coefficient curve."""
    m = B.shape[1]
    q1 = theta.size // m
    est = coef_curves(theta, B)
    se = beta_se(theta_cov.matrix, B, q1 - 1)
    pw_lo, pw_hi = pointwise_band(est, se, alpha)
    qj = np.empty(q1)
    for r in range(q1):
        sl = slice(r * m, (r + 1) * m)
        if method == "parametric":
            qj[r] = joint_quantile_parametric(theta_cov.matrix[sl, sl], alpha, T, seed + r)
        elif method == "nonparametric":
            if theta_cov.draws is None:
                raise ValueError("nonparametric joint bands need bootstrap draws")
            qj[r] = joint_quantile_nonparametric(theta_cov.draws[:, sl], alpha)
        else:
            raise ValueError("method must be 'parametric' or 'nonparametric'")
    # Monte Carlo noise can push the max statistic below z when m is tiny.
    qj = np.maximum(qj, normal_quantile(alpha))
    half = qj[:, None] * se
    return BandSet(est, se, pw_lo, pw_hi, est - half, est + half, alpha, qj, method)
