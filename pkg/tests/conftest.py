import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.linalg import block_diag

from fgee.basis import BasisSpec, build_basis, build_penalty, design_rows
from fgee.data import FunctionalDataset

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_dataset(rng, N=6, n_range=(2, 5), L=7, q=1, functional=False, family="gaussian"):
    """Small clustered dataset with random covariates and a smooth signal."""
    grid = np.linspace(0, 1, L)
    Ys, Zs = [], []
    for _ in range(N):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        if functional:
            Z = np.concatenate([np.ones((n, L, 1)), rng.normal(size=(n, L, q))], axis=2)
            eta = Z[..., 0] * np.sin(2 * grid) + (Z[..., 1:] * 0.5).sum(-1)
        else:
            Z = np.column_stack([np.ones(n), rng.normal(size=(n, q))])
            eta = np.sin(2 * grid)[None] + Z[:, 1:] @ np.full((q, L), 0.5)
        if family == "gaussian":
            Y = eta + rng.normal(size=(n, L))
        elif family == "binomial":
            Y = (rng.random((n, L)) < 1 / (1 + np.exp(-eta))).astype(float)
        else:
            Y = rng.poisson(np.exp(0.3 * eta)).astype(float)
        Ys.append(Y)
        Zs.append(Z)
    return FunctionalDataset(Ys, Zs, grid)


def dense_design(dataset, B, i):
    """``(n_i L) x p`` design for cluster ``i`` with rows ordered by (grid point, observation)."""
    Z = dataset.Z[i]
    n = Z.shape[0]
    rows = []
    for j in range(n):
        x = Z[j, 1:] if Z.ndim == 2 else Z[j, :, 1:]
        rows.append(design_rows(B, x))
    X = np.stack(rows)  # (n, L, p)
    return X.transpose(1, 0, 2).reshape(-1, X.shape[-1])


def dense_corr(structure, rho, n):
    if structure == "independence" or n == 1:
        return np.eye(n)
    if structure == "exchangeable":
        return (1 - rho) * np.eye(n) + rho * np.ones((n, n))
    idx = np.arange(n)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def dense_V(structure, rho_vec, a):
    """Block covariance over grid points; ``a`` is ``(n, L)``, blocks ordered by grid point."""
    n, L = a.shape
    blocks = []
    for l in range(L):
        sd = np.sqrt(a[:, l])
        blocks.append(sd[:, None] * dense_corr(structure, rho_vec[l], n) * sd[None, :])
    return block_diag(*blocks)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_basis():
    spec = BasisSpec(degree=3, num_knots=2)
    grid = np.linspace(0, 1, 7)
    return spec, grid, build_basis(spec, grid)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
