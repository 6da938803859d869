"""Seeded simulation designs for longitudinal functional regression and their metrics."""

import warnings
from dataclasses import dataclass, field, replace
from typing import Tuple

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from fgee.data import FunctionalDataset

BETA_TAGS = ("gaussian", "binary", "gaussian-ar1")


@dataclass(frozen=True)
class SimDesign:
    """Parameters of one simulation design.

    ``beta_tag`` selects the coefficient functions; ``structure`` selects the
    noise generator (``exchangeable`` for the random-effect surface model,
    ``ar1`` for longitudinal AR1 noise).
    """

    name: str = "gaussian-exch"
    family: str = "gaussian"
    N: int = 50
    n: int = 25
    L: int = 100
    structure: str = "exchangeable"
    rho: float = 0.0
    beta_tag: str = "gaussian"
    var_xi: Tuple[float, float] = (3.0, 2.0)
    var_zeta: Tuple[float, float] = (1.5, 1.0)
    var_eps: float = 1.5
    alpha_x2: float = 0.7

    def __post_init__(self):
        if self.beta_tag not in BETA_TAGS:
            raise ValueError(f"unknown coefficient tag {self.beta_tag!r}")
        if self.N < 1 or self.n < 1 or self.L < 2:
            raise ValueError("N and n must be positive and L at least 2")
        if self.var_eps < 0 or min(self.var_xi) < 0 or min(self.var_zeta) < 0:
            raise ValueError("variance components must be non-negative")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.L)


PRESETS = {
    "gaussian-exch": SimDesign(),
    "gaussian-exch-c2": SimDesign(name="gaussian-exch-c2", var_xi=(5.0, 2.0), var_zeta=(3.0, 1.0), var_eps=10.0),
    "gaussian-ar1": SimDesign(
        name="gaussian-ar1", structure="ar1", rho=0.5, beta_tag="gaussian-ar1", var_eps=10.0
    ),
    "binary-ar1": SimDesign(name="binary-ar1", family="binomial", structure="ar1", rho=0.75, beta_tag="binary"),
}


def get_design(name, **overrides) -> SimDesign:
    if name not in PRESETS:
        raise ValueError(f"unknown design {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides) if overrides else PRESETS[name]


def true_betas(design, grid=None) -> np.ndarray:
    """Coefficient curves ``(3, L)`` for ``design`` (a :class:`SimDesign` or tag)."""
    tag = design if isinstance(design, str) else design.beta_tag
    s = np.asarray(design.grid if grid is None else grid, dtype=float)
    phi = norm.pdf
    r2 = np.sqrt(2.0)
    if tag == "gaussian":
        b0 = 3 + np.sin(np.pi * s) + r2 * np.cos(3 * np.pi * s)
        b1 = 3 + np.cos(2 * np.pi * s) + r2 * np.cos(3 * np.pi * s)
        b2 = (
            (phi((s - 0.2) / 0.1**2) + phi((s - 0.1) / 0.07**2)) / 60
            - phi((s - 0.35) / 0.1**2) / 200
            - phi((s - 0.65) / 0.06**2) / 250
        )
    elif tag == "binary":
        b0 = 1 + np.sin(np.pi * s) / 3 + r2 / 3 * np.cos(3 * np.pi * s)
        b1 = 1 + np.cos(2 * np.pi * s) / 3 + r2 / 3 * np.cos(3 * np.pi * s)
        b2 = 5 / 3 * phi((s - 0.35) / 0.1) - 5 / 3 * phi((s - 0.65) / 0.2)
    elif tag == "gaussian-ar1":
        b0 = 3 + np.sin(np.pi * s) + r2 * np.cos(3 * np.pi * s)
        b1 = 3 + np.cos(2 * np.pi * s) + r2 * np.cos(3 * np.pi * s)
        b2 = 5 * phi((s - 0.35) / 0.1) - 5 * phi((s - 0.65) / 0.2)
    else:
        raise ValueError(f"unknown coefficient tag {tag!r}")
    return np.vstack([b0, b1, b2])


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def gen_covariates(design, seed=None):
    """``X1`` of shape ``(N,)`` and ``X2`` of shape ``(N, n)``.

    ``X2[i, j] = (j + 1) + e[i, j]`` with ``e`` an AR(``alpha_x2``) series
    started at zero and unit innovation variance.
    """
    rng = _rng(seed)
    x1 = rng.standard_normal(design.N)
    innov = rng.standard_normal((design.N, design.n))
    e = np.empty_like(innov)
    prev = np.zeros(design.N)
    for j in range(design.n):
        prev = design.alpha_x2 * prev + innov[:, j]
        e[:, j] = prev
    x2 = np.arange(1, design.n + 1)[None, :] + e
    return x1, x2


def _assemble(design, Y, x1, x2, meta=None):
    Z = [np.column_stack([np.ones(design.n), np.full(design.n, x1[i]), x2[i]]) for i in range(design.N)]
    info = {"design": design.name, "family": design.family}
    info.update(meta or {})
    return FunctionalDataset(list(Y), Z, design.grid, meta=info)


def _eta(design, x1, x2):
    beta = true_betas(design)
    return beta[0][None, None] + x1[:, None, None] * beta[1][None, None] + x2[:, :, None] * beta[2][None, None]


def _ar1_noise(rng, shape, rho, var):
    """AR1 along axis 1 of ``shape = (N, n, L)`` with stationary variance ``var``."""
    N, n, L = shape
    z = rng.standard_normal(shape)
    out = np.empty(shape)
    out[:, 0] = z[:, 0]
    scale = np.sqrt(1.0 - rho**2)
    for j in range(1, n):
        out[:, j] = rho * out[:, j - 1] + scale * z[:, j]
    return np.sqrt(var) * out


def gen_gaussian_exchangeable(design, seed=None) -> FunctionalDataset:
    """Random-effect surface model ``Y = eta + sum_k (xi_k + zeta_jk) psi_k + eps``."""
    rng = _rng(seed)
    x1, x2 = gen_covariates(design, rng)
    s = design.grid
    psi = np.vstack([np.ones_like(s), np.sqrt(2.0) * np.sin(2 * np.pi * s)])
    N, n, L = design.N, design.n, design.L
    xi = rng.standard_normal((N, 2)) * np.sqrt(design.var_xi)
    zeta = rng.standard_normal((N, n, 2)) * np.sqrt(design.var_zeta)
    eps = rng.standard_normal((N, n, L)) * np.sqrt(design.var_eps)
    W = (xi[:, None, :] + zeta) @ psi
    Y = _eta(design, x1, x2) + W + eps
    return _assemble(design, Y, x1, x2)


def gen_gaussian_ar1(design, seed=None) -> FunctionalDataset:
    """Mean surface plus pointwise AR1 noise across observations with variance ``var_eps``."""
    rng = _rng(seed)
    x1, x2 = gen_covariates(design, rng)
    shape = (design.N, design.n, design.L)
    Y = _eta(design, x1, x2) + _ar1_noise(rng, shape, design.rho, design.var_eps)
    return _assemble(design, Y, x1, x2)


DEGENERATE_VARIANCE = 1e-8
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(20)


def _orthant_excess(a1, a2, r):
    top = np.arcsin(np.clip(r, -1.0, 1.0))
    u = 0.5 * top[..., None] * (_GL_NODES + 1.0)
    su, cu2 = np.sin(u), np.cos(u) ** 2
    a1e, a2e = a1[..., None], a2[..., None]
    expo = -(a1e**2 - 2 * a1e * a2e * su + a2e**2) / (2 * np.maximum(cu2, 1e-300))
    return 0.5 * top * np.sum(_GL_WEIGHTS * np.exp(expo), axis=-1) / (2 * np.pi)


def bvn_upper_orthant(a1, a2, r):
    """``P(Z1 <= a1, Z2 <= a2)`` for standard bivariate normals with correlation ``r >= 0``.

    Uses ``Phi(a1) Phi(a2) + (1/2pi) int_0^{asin r} exp(-(a1^2 - 2 a1 a2 sin u + a2^2)
    / (2 cos^2 u)) du`` with Gauss-Legendre quadrature.
    """
    a1, a2, r = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (a1, a2, r)))
    return norm.cdf(a1) * norm.cdf(a2) + _orthant_excess(a1, a2, r)


def binary_correlation(p1, p2, r):
    """Correlation of ``1{Z1 <= Phi^-1(p1)}`` and ``1{Z2 <= Phi^-1(p2)}`` at latent correlation ``r``."""
    p1, p2, r = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (p1, p2, r)))
    excess = _orthant_excess(norm.ppf(p1), norm.ppf(p2), r)
    return excess / np.sqrt(p1 * (1 - p1) * p2 * (1 - p2))


def _bvn_density(a1, a2, r):
    det = 1.0 - r**2
    return np.exp(-(a1**2 - 2 * r * a1 * a2 + a2**2) / (2 * det)) / (2 * np.pi * np.sqrt(det))


def latent_correlation(p1, p2, target, iters=60, tol=1e-10):
    """Latent correlation giving binary correlation ``target`` for margins ``p1``, ``p2``.

    A bracketing root search: Newton steps on the orthant probability (whose
    derivative in ``r`` is the bivariate normal density) are taken when they
    stay inside the current bracket, otherwise the bracket is bisected.

    Returns ``(r, feasible)``; infeasible pairs (target above the attainable
    maximum ``min(p1, p2) - p1 p2``) get ``r = 1`` and ``feasible = False``.
    Pairs whose Bernoulli variances multiply to less than
    ``DEGENERATE_VARIANCE ** 2`` are effectively deterministic and keep
    ``r = target``.
    """
    p1, p2 = np.broadcast_arrays(np.asarray(p1, dtype=float), np.asarray(p2, dtype=float))
    shape = p1.shape
    p1, p2 = p1.ravel(), p2.ravel()
    a1, a2 = norm.ppf(p1), norm.ppf(p2)
    # the binary covariance is the orthant excess over independence
    scale = np.sqrt(p1 * (1 - p1) * p2 * (1 - p2))
    goal = target * scale
    feasible = np.minimum(p1, p2) - p1 * p2 >= goal * (1 + 1e-9)
    lo = np.zeros(p1.shape)
    hi = np.ones(p1.shape)
    r = np.full(p1.shape, float(target))
    # near-deterministic outcomes carry no usable correlation; keep r = target
    active = feasible & (scale > DEGENERATE_VARIANCE)
    for _ in range(iters):
        if not active.any():
            break
        ra, a1a, a2a = r[active], a1[active], a2[active]
        f = _orthant_excess(a1a, a2a, ra) - goal[active]
        lo_a = np.where(f < 0, ra, lo[active])
        hi_a = np.where(f > 0, ra, hi[active])
        step = ra - f / np.maximum(_bvn_density(a1a, a2a, ra), 1e-300)
        inside = (step > lo_a) & (step < hi_a)
        new = np.where(inside, step, 0.5 * (lo_a + hi_a))
        lo[active], hi[active], r[active] = lo_a, hi_a, new
        # tolerance on the binary correlation scale
        done = (np.abs(f) <= tol * scale[active]) | (hi_a - lo_a < 1e-13)
        idx = np.flatnonzero(active)
        active[idx[done]] = False
    if active.any():
        warnings.warn("latent correlation search did not converge for some pairs; using the target")
        r[active] = target
    r = np.where(feasible, r, 1.0)
    return r.reshape(shape), feasible.reshape(shape)


def binary_ar1_panel(mu, rho, rng):
    """Binary outcomes with marginal means ``mu`` (``(N, n, L)``) and lag-1 correlation ``rho``.

    A latent standard Gaussian Markov chain runs along axis 1; its lag-1
    correlation is matched per adjacent pair so the thresholded outcomes have
    binary-scale correlation ``rho``. Pairs where that is unattainable are
    matched at the cluster-mean probability instead.

    Returns ``(Y, counts)``; ``counts`` holds the number of adjacent pairs,
    how many were infeasible or near-deterministic, and the summed attained
    correlation over the non-degenerate pairs.
    """
    mu = np.clip(np.asarray(mu, dtype=float), 1e-12, 1 - 1e-12)
    N, n, L = mu.shape
    counts = {"pairs": N * max(n - 1, 0) * L, "infeasible": 0, "degenerate": 0, "attained_sum": 0.0}
    r = np.zeros((N, max(n - 1, 0), L))
    if n > 1 and rho > 0:
        p1, p2 = mu[:, :-1], mu[:, 1:]
        r, ok = latent_correlation(p1, p2, rho)
        if not ok.all():
            pbar = np.broadcast_to(mu.mean(axis=1, keepdims=True), p1.shape)[~ok]
            r[~ok] = latent_correlation(pbar, pbar, rho)[0]
        live = np.sqrt(p1 * (1 - p1) * p2 * (1 - p2)) > DEGENERATE_VARIANCE
        counts["infeasible"] = int(np.sum(~ok))
        counts["degenerate"] = int(np.sum(~live))
        counts["attained_sum"] = float(np.sum(binary_correlation(p1[live], p2[live], r[live])))
    z = rng.standard_normal((N, n, L))
    latent = np.empty_like(z)
    latent[:, 0] = z[:, 0]
    for j in range(1, n):
        rj = r[:, j - 1]
        latent[:, j] = rj * latent[:, j - 1] + np.sqrt(np.maximum(1 - rj**2, 0.0)) * z[:, j]
    return (latent <= norm.ppf(mu)).astype(float), counts


def correlation_summary(counts, rho):
    """Fractions of infeasible and near-deterministic pairs and the mean attained correlation."""
    pairs = counts["pairs"]
    live = pairs - counts["degenerate"]
    return {
        "target_rho": float(rho),
        "infeasible_fraction": counts["infeasible"] / pairs if pairs else 0.0,
        "degenerate_fraction": counts["degenerate"] / pairs if pairs else 0.0,
        "attained_rho_mean": counts["attained_sum"] / live if live else 0.0,
    }


def gen_binary_ar1(design, seed=None, chunk=50) -> FunctionalDataset:
    """Correlated binary outcomes with a logit mean model; see :func:`binary_ar1_panel`.

    Clusters are processed ``chunk`` at a time to bound memory; the draws do
    not depend on ``chunk``.
    """
    rng = _rng(seed)
    x1, x2 = gen_covariates(design, rng)
    beta = true_betas(design)
    Ys = []
    total = {"pairs": 0, "infeasible": 0, "degenerate": 0, "attained_sum": 0.0}
    for lo in range(0, design.N, chunk):
        sl = slice(lo, lo + chunk)
        eta = beta[0][None, None] + x1[sl, None, None] * beta[1][None, None] + x2[sl, :, None] * beta[2][None, None]
        Y, counts = binary_ar1_panel(expit(eta), design.rho, rng)
        for k in total:
            total[k] += counts[k]
        Ys.append(Y)
    return _assemble(design, np.concatenate(Ys), x1, x2, correlation_summary(total, design.rho))


def generate(design, seed=None) -> FunctionalDataset:
    """Dispatch to the generator matching the design's family and structure."""
    if design.family == "binomial":
        return gen_binary_ar1(design, seed)
    if design.structure == "ar1":
        return gen_gaussian_ar1(design, seed)
    return gen_gaussian_exchangeable(design, seed)


def replicate_seeds(seed, replicates):
    """Independent per-replicate generators derived from one master seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(replicates)]


@dataclass
class MetricReport:
    rmse: float
    pointwise_coverage: float
    joint_coverage: float
    fit_time: float = float("nan")
    extra: dict = field(default_factory=dict)


def score_fit(truth, bands, fit_time=float("nan")) -> MetricReport:
    """RMSE over all coefficients and points, mean pointwise coverage, joint indicator rate.

    ``bands`` needs ``estimate``, ``pw_lo``/``pw_hi`` and ``joint_lo``/``joint_hi``
    arrays shaped like ``truth``.
    """
    truth = np.asarray(truth, dtype=float)
    est = np.asarray(bands.estimate, dtype=float)
    if truth.shape != est.shape:
        raise ValueError(f"truth shape {truth.shape} does not match estimate shape {est.shape}")
    rmse = float(np.sqrt(np.mean((truth - est) ** 2)))
    pw = (truth >= bands.pw_lo) & (truth <= bands.pw_hi)
    joint = ((truth >= bands.joint_lo) & (truth <= bands.joint_hi)).all(axis=1)
    return MetricReport(rmse, float(pw.mean()), float(joint.mean()), fit_time)
