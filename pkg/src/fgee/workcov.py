"""Pointwise working correlations and structured inverse applications.

The working covariance of cluster ``i`` is block diagonal over the grid,
``V_i = bdiag[V_i(s_1), ..., V_i(s_L)]`` with
``V_i(s) = A_i(s)^{1/2} R(s) A_i(s)^{1/2}``. Every routine here works on
arrays whose first axis indexes the ``n_i`` longitudinal observations and
whose second axis indexes grid points, so a whole cluster is handled in one
vectorised call and no ``n_i x n_i`` matrix is ever formed.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from fgee._linalg import kron_gram, kron_vec

STRUCTURES = ("independence", "exchangeable", "ar1")
DEFAULT_EPS = 1e-3


class PositiveDefinitenessError(ValueError):
    pass


def exchangeable_bounds(n_max, eps=DEFAULT_EPS):
    lower = -1.0 + eps
    if n_max > 1:
        lower = max(lower, -1.0 / (n_max - 1) + eps)
    return lower, 1.0 - eps


def truncate(rho, structure, n_max=2, eps=DEFAULT_EPS):
    """Clip correlation parameters into the valid range of ``structure``."""
    rho = np.asarray(rho, dtype=float)
    if structure == "independence":
        return np.zeros_like(rho)
    if structure == "exchangeable":
        lo, hi = exchangeable_bounds(n_max, eps)
    elif structure == "ar1":
        lo, hi = 0.0, 1.0 - eps
    else:
        raise ValueError(f"unknown structure {structure!r}")
    return np.clip(rho, lo, hi)


@dataclass
class WorkingCovModel:
    """Structure tag plus per-grid-point correlation parameters."""

    structure: str = "independence"
    rho: np.ndarray = None
    eps: float = DEFAULT_EPS
    smoothed: bool = False
    raw_rho: np.ndarray = None
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ValueError(f"structure must be one of {STRUCTURES}, got {self.structure!r}")

    def rho_at(self, L):
        if self.structure == "independence" or self.rho is None:
            return np.zeros(L)
        return np.asarray(self.rho, dtype=float)

    def apply_inverse(self, a, r):
        """``V(s)^{-1} r`` for all grid points of one cluster.

        ``a`` holds the variance entries, shape ``(n, L)``; ``r`` has shape
        ``(n, L)`` or ``(n, L, k)``.
        """
        rho = self.rho_at(a.shape[1])
        if self.structure == "exchangeable":
            return apply_exchangeable_inverse(rho, a, r)
        if self.structure == "ar1":
            return solve_ar1_toeplitz(rho, a, r)
        return _expand(1.0 / a, r) * r


def _expand(x, like):
    while x.ndim < like.ndim:
        x = x[..., None]
    return x


def apply_exchangeable_inverse(rho, a, r):
    """Closed-form exchangeable inverse applied along the first axis.

    ``V^{-1} = A^{-1}/(1-rho) - c (A^{-1/2} 1)(A^{-1/2} 1)^T`` with
    ``c = rho / ((1-rho)((1-rho) + n rho))``.
    """
    a = np.asarray(a, dtype=float)
    r = np.asarray(r, dtype=float)
    vector = a.ndim == 1
    if vector:
        a, r = a[:, None], r.reshape((r.shape[0], 1) + r.shape[1:])
    n = a.shape[0]
    rho = np.broadcast_to(np.asarray(rho, dtype=float), a.shape[1:])
    denom = (1.0 - rho) + n * rho
    if np.any(denom <= 0) or np.any(rho >= 1):
        raise PositiveDefinitenessError(
            f"exchangeable correlation outside the positive-definite range for n={n}"
        )
    c = rho / ((1.0 - rho) * denom)
    isd = 1.0 / np.sqrt(a)
    u = _expand(isd, r) * r
    total = u.sum(axis=0)
    out = _expand(1.0 / a, r) * r / _expand(1.0 - rho, r[0])
    out = out - _expand(isd, r) * (_expand(c, total) * total)
    if vector:
        out = out[:, 0]
    return out


def solve_ar1_toeplitz(rho, a, r):
    """AR1 solve via the exact tridiagonal inverse of the correlation matrix."""
    a = np.asarray(a, dtype=float)
    r = np.asarray(r, dtype=float)
    vector = a.ndim == 1
    if vector:
        a, r = a[:, None], r.reshape((r.shape[0], 1) + r.shape[1:])
    rho = np.broadcast_to(np.asarray(rho, dtype=float), a.shape[1:])
    if np.any(rho >= 1) or np.any(rho < 0):
        raise ValueError("AR1 correlation must satisfy 0 <= rho < 1")
    isd = _expand(1.0 / np.sqrt(a), r)
    u = isd * r
    n = a.shape[0]
    rr = _expand(rho, u[0])
    if n == 1:
        return (isd * u)[:, 0] if vector else isd * u
    out = (1.0 + rr**2) * u
    out[1:] -= rr * u[:-1]
    out[:-1] -= rr * u[1:]
    out[0] -= rr**2 * u[0]
    out[-1] -= rr**2 * u[-1]
    out = isd * out / (1.0 - rr**2)
    if vector:
        out = out[:, 0]
    return out


def estimate_rho_exchangeable(panel, eps=DEFAULT_EPS, n_max=None):
    """Method-of-moments exchangeable correlation at every grid point.

    Each cluster contributes the mean of its distinct-pair products
    ``e_j e_k`` (``j < k``); clusters with a single observation are skipped.

    Returns
    -------
    rho : ndarray of shape (L,)
        Truncated estimate.
    raw : ndarray of shape (L,)
        Estimate before truncation.
    """
    sizes = [e.shape[0] for e in panel]
    n_max = max(sizes) if n_max is None else n_max
    L = panel[0].shape[1]
    total = np.zeros(L)
    used = 0
    for e in panel:
        n = e.shape[0]
        if n < 2:
            continue
        s = e.sum(axis=0)
        pairs = 0.5 * (s**2 - (e**2).sum(axis=0))
        total += pairs / (0.5 * n * (n - 1))
        used += 1
    if used == 0:
        warnings.warn("all clusters are singletons; exchangeable correlation set to 0")
        return np.zeros(L), np.zeros(L)
    raw = total / used
    return truncate(raw, "exchangeable", n_max, eps), raw


def estimate_rho_ar1(panel, eps=DEFAULT_EPS):
    """Average of per-cluster lag-1 Yule-Walker estimates, truncated to ``[0, 1-eps]``.

    Returns ``(rho, raw, n_zero_denominator)``.
    """
    L = panel[0].shape[1]
    total = np.zeros(L)
    zero_den = 0
    for e in panel:
        den = (e**2).sum(axis=0)
        num = (e[:-1] * e[1:]).sum(axis=0) if e.shape[0] > 1 else np.zeros(L)
        bad = den <= 0
        zero_den += int(bad.sum())
        total += np.where(bad, 0.0, num / np.where(bad, 1.0, den))
    raw = total / len(panel)
    return truncate(raw, "ar1", eps=eps), raw, zero_den


def smooth_rho(rho, window=5, structure="exchangeable", n_max=2, eps=DEFAULT_EPS):
    """Centred moving average; the window shrinks symmetrically near the edges."""
    rho = np.asarray(rho, dtype=float)
    L = rho.size
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    if window > L:
        raise ValueError(f"window {window} exceeds grid size {L}")
    half = window // 2
    out = np.empty(L)
    for l in range(L):
        h = min(half, l, L - 1 - l)
        out[l] = rho[l - h : l + h + 1].mean()
    if structure == "independence":
        return out
    return truncate(out, structure, n_max, eps)


def fit_working_cov(structure, panel, eps=DEFAULT_EPS, smooth=False, window=5, n_max=None):
    """Estimate a :class:`WorkingCovModel` from scaled residuals."""
    L = panel[0].shape[1]
    n_max = max(e.shape[0] for e in panel) if n_max is None else n_max
    flags = {}
    if structure == "independence":
        return WorkingCovModel(structure, np.zeros(L), eps)
    if structure == "exchangeable":
        rho, raw = estimate_rho_exchangeable(panel, eps, n_max)
    elif structure == "ar1":
        rho, raw, zero_den = estimate_rho_ar1(panel, eps)
        flags["zero_denominators"] = zero_den
    else:
        raise ValueError(f"structure must be one of {STRUCTURES}, got {structure!r}")
    flags["truncated_points"] = int(np.sum(rho != raw))
    if smooth:
        rho = smooth_rho(rho, window, structure, n_max, eps)
    return WorkingCovModel(structure, rho, eps, bool(smooth), raw, flags)


def cluster_summaries(cov, a, deriv, Z, resid):
    """Compact per-cluster pieces of ``W_i`` and ``b_i``.

    Parameters
    ----------
    cov : WorkingCovModel
    a : ndarray of shape (n, L)
        Variance entries ``phi * v(mu)``.
    deriv : ndarray of shape (n, L)
        Inverse-link derivatives.
    Z : ndarray of shape (n, q + 1) or (n, L, q + 1)
    resid : ndarray of shape (n, L)
        ``Y - mu``.

    Returns
    -------
    C : ndarray of shape (L, q + 1, q + 1)
        ``W_i = sum_l kron(C[l], B_l B_l^T)``.
    c : ndarray of shape (L, q + 1)
        ``b_i = sum_l kron(c[l], B_l)``.
    """
    if Z.ndim == 2:
        M = deriv[:, :, None] * Z[:, None, :]
    else:
        M = deriv[:, :, None] * Z
    VM = cov.apply_inverse(a, M)
    C = np.einsum("nla,nlb->lab", M, VM, optimize=True)
    c = np.einsum("nla,nl->la", VM, resid, optimize=True)
    return C, c


def quadratic_forms(cov, a, deriv, Z, resid, B):
    """``(W_i, b_i) = (D_i^T V_i^{-1} D_i, D_i^T V_i^{-1} (Y_i - mu_i))``."""
    C, c = cluster_summaries(cov, a, deriv, Z, resid)
    return kron_gram(C, B), kron_vec(c, B)
