"""Small dense linear-algebra helpers shared across modules."""

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve


RANK_TOL = 1e-13


class SingularSystemError(np.linalg.LinAlgError):
    """A ``p x p`` system could not be factorised even after jitter."""


class SPDFactor:
    """Cholesky factor of a symmetric positive-definite matrix.

    Falls back once to ``A + 1e-10 * trace(A) / p * I`` when the plain
    factorisation fails on a numerically full-rank matrix; ``jittered``
    records whether that happened. With ``check_rank`` a rank-deficient
    matrix (smallest eigenvalue below ``RANK_TOL`` times the largest)
    raises instead of being jittered.
    """

    def __init__(self, A, what="system", check_rank=False):
        A = np.asarray(A, dtype=float)
        A = 0.5 * (A + A.T)
        self.jittered = False
        try:
            self._cf = cho_factor(A, lower=True, check_finite=True)
        except (LinAlgError, ValueError):
            if check_rank:
                self._raise_if_rank_deficient(A, what)
            p = A.shape[0]
            jitter = 1e-10 * max(np.trace(A), 1e-300) / p
            try:
                self._cf = cho_factor(A + jitter * np.eye(p), lower=True)
            except (LinAlgError, ValueError):
                self._raise_if_rank_deficient(A, what, force=True)
            self.jittered = True
            return
        d = np.abs(np.diag(self._cf[0]))
        # squared pivot ratio tracks the condition number; rounding noise lives below 1e-13
        if check_rank and d.min() ** 2 <= RANK_TOL * d.max() ** 2:
            self._raise_if_rank_deficient(A, what)

    @staticmethod
    def _raise_if_rank_deficient(A, what, force=False):
        eig = np.linalg.eigvalsh(A) if np.all(np.isfinite(A)) else np.array([np.nan])
        if force or not np.all(np.isfinite(eig)) or eig.min() <= RANK_TOL * np.abs(eig).max():
            raise SingularSystemError(
                f"{what} is singular or indefinite (smallest eigenvalue "
                f"{eig.min():.3e}); try larger smoothing parameters"
            )

    def solve(self, b):
        return cho_solve(self._cf, b, check_finite=False)

    def inverse(self):
        return self.solve(np.eye(self._cf[0].shape[0]))


def kron_gram(G, B):
    """``sum_l kron(G[l], outer(B[l], B[l]))`` for ``G`` of shape (L, a, a)."""
    a = G.shape[1]
    m = B.shape[1]
    out = np.einsum("lab,ld,le->adbe", G, B, B, optimize=True)
    return out.reshape(a * m, a * m)


def kron_vec(c, B):
    """``sum_l kron(c[l], B[l])`` for ``c`` of shape (..., L, a)."""
    out = np.einsum("...la,ld->...ad", c, B, optimize=True)
    return out.reshape(out.shape[:-2] + (-1,))


def coef_curves(theta, B):
    """Coefficient curves ``(q + 1, L)`` from a stacked spline vector."""
    m = B.shape[1]
    theta = np.asarray(theta, dtype=float)
    return theta.reshape(theta.shape[:-1] + (-1, m)) @ B.T


def expand_lambda(lam, m):
    return np.repeat(np.asarray(lam, dtype=float), m)
