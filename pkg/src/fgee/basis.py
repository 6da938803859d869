"""B-spline bases, difference penalties and per-observation design rows."""

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.linalg import block_diag


@dataclass(frozen=True)
class BasisSpec:
    """Open-uniform B-spline basis for one functional coefficient.

    Parameters
    ----------
    degree : int, default=3
        Polynomial degree of the pieces.
    num_knots : int, default=10
        Knot count. Read as the number of interior knots when
        ``knot_convention='interior'`` (so ``m = num_knots + degree + 1``), or
        as the number of basis functions when ``knot_convention='basis'``.
    domain : tuple of float, default=(0.0, 1.0)
        Closed interval the basis lives on.
    penalty_order : int, default=1
        Order of the difference penalty.
    knot_convention : {'interior', 'basis'}, default='interior'
    """

    degree: int = 3
    num_knots: int = 10
    domain: Tuple[float, float] = (0.0, 1.0)
    penalty_order: int = 1
    knot_convention: str = "interior"

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError(f"degree must be non-negative, got {self.degree}")
        if self.knot_convention not in ("interior", "basis"):
            raise ValueError("knot_convention must be 'interior' or 'basis'")
        if self.knot_convention == "interior" and self.num_knots < 0:
            raise ValueError("num_knots must be non-negative")
        if self.n_interior < 0:
            raise ValueError(
                f"num_knots={self.num_knots} basis functions is fewer than degree+1={self.degree + 1}"
            )
        lo, hi = self.domain
        if not hi > lo:
            raise ValueError(f"domain must satisfy s_min < s_max, got {self.domain}")
        if self.penalty_order < 0:
            raise ValueError("penalty_order must be non-negative")
        if self.n_basis <= self.penalty_order:
            raise ValueError(
                f"penalty_order={self.penalty_order} must be smaller than the number "
                f"of basis functions m={self.n_basis}"
            )

    @property
    def n_interior(self) -> int:
        if self.knot_convention == "interior":
            return self.num_knots
        return self.num_knots - self.degree - 1

    @property
    def n_basis(self) -> int:
        return self.n_interior + self.degree + 1

    def knots(self) -> np.ndarray:
        """Full clamped knot vector (boundary knots repeated ``degree + 1`` times)."""
        lo, hi = self.domain
        interior = np.linspace(lo, hi, self.n_interior + 2)[1:-1]
        return np.concatenate(
            [np.full(self.degree + 1, lo), interior, np.full(self.degree + 1, hi)]
        )


def _cox_de_boor(x: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    n_basis = len(knots) - degree - 1
    # degree-0 indicators on the non-degenerate spans; the right end of the
    # domain belongs to the last non-empty span.
    n_spans = len(knots) - 1
    basis = np.zeros((len(x), n_spans))
    for d in range(n_spans):
        lo, hi = knots[d], knots[d + 1]
        if hi > lo:
            basis[:, d] = (x >= lo) & (x < hi)
    last = np.max(np.nonzero(knots[1:] > knots[:-1])[0])
    basis[x == knots[-1], last] = 1.0

    for k in range(1, degree + 1):
        new = np.zeros((len(x), n_spans - k))
        for d in range(n_spans - k):
            left_den = knots[d + k] - knots[d]
            right_den = knots[d + k + 1] - knots[d + 1]
            term = np.zeros(len(x))
            if left_den > 0:
                term += (x - knots[d]) / left_den * basis[:, d]
            if right_den > 0:
                term += (knots[d + k + 1] - x) / right_den * basis[:, d + 1]
            new[:, d] = term
        basis = new
    return basis[:, :n_basis]


def build_basis(spec: BasisSpec, grid: Sequence[float]) -> np.ndarray:
    """Evaluate the B-spline basis on a grid.

    Returns an ``L x m`` matrix whose entry ``[l, d]`` is ``B_d(s_l)``.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("grid must be a non-empty 1-d sequence")
    if grid.size > 1 and np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    lo, hi = spec.domain
    tol = 1e-12 * (hi - lo)
    if grid[0] < lo - tol or grid[-1] > hi + tol:
        raise ValueError(f"grid points must lie in the domain [{lo}, {hi}]")
    grid = np.clip(grid, lo, hi)
    return _cox_de_boor(grid, spec.knots(), spec.degree)


def difference_matrix(m: int, order: int) -> np.ndarray:
    """``(m - order) x m`` forward-difference operator of the given order."""
    if order >= m:
        raise ValueError(f"difference order {order} must be smaller than m={m}")
    return np.diff(np.eye(m), n=order, axis=0)


def build_penalty(spec: BasisSpec, q: int) -> np.ndarray:
    """Block-diagonal penalty with ``q + 1`` copies of ``D_k^T D_k``."""
    if q < 0:
        raise ValueError("q must be non-negative")
    D = difference_matrix(spec.n_basis, spec.penalty_order)
    block = D.T @ D
    return block_diag(*([block] * (q + 1)))


def design_rows(basis: np.ndarray, covariates) -> np.ndarray:
    """Design matrix ``[B, x_1 B, ..., x_q B]`` for one functional observation.

    ``covariates`` is either a length-``q`` vector of scalars or an ``L x q``
    array of functional covariates evaluated on the basis grid (row ``l`` of
    ``B`` is then scaled by ``x_r(s_l)``).
    """
    basis = np.asarray(basis, dtype=float)
    L = basis.shape[0]
    x = np.asarray(covariates, dtype=float)
    if x.ndim <= 1:
        x = np.broadcast_to(x.reshape(1, -1), (L, x.size))
    elif x.ndim != 2 or x.shape[0] != L:
        raise ValueError(
            f"functional covariates must have shape (L, q) with L={L}, got {x.shape}"
        )
    blocks = [basis] + [basis * x[:, [r]] for r in range(x.shape[1])]
    return np.hstack(blocks)
