"""Functional longitudinal datasets, input validation and the CSV long format."""

import csv
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from sklearn.utils.validation import check_array


class DataFormatError(ValueError):
    """Raised when input data do not have the expected long-format layout."""


@dataclass
class FunctionalDataset:
    """Clustered functional outcomes on a shared grid.

    Attributes
    ----------
    Y : list of ndarray
        One ``(n_i, L)`` array per cluster; row ``j`` is observation ``j``.
    Z : list of ndarray
        Per-cluster covariate rows with a leading column of ones, shape
        ``(n_i, q + 1)`` for scalar covariates or ``(n_i, L, q + 1)`` when at
        least one covariate is functional.
    grid : ndarray
        The ``L`` functional-domain points, strictly increasing.
    """

    Y: List[np.ndarray]
    Z: List[np.ndarray]
    grid: np.ndarray
    cluster_ids: Optional[list] = None
    covariate_names: Optional[list] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.Y) != len(self.Z):
            raise DataFormatError("Y and Z must have one entry per cluster")
        if len(self.Y) == 0:
            raise DataFormatError("dataset has no clusters")
        self.grid = np.asarray(self.grid, dtype=float)
        if self.cluster_ids is None:
            self.cluster_ids = list(range(len(self.Y)))
        if self.covariate_names is None:
            self.covariate_names = [f"x{r + 1}" for r in range(self.q)]

    @property
    def N(self) -> int:
        return len(self.Y)

    @property
    def L(self) -> int:
        return self.grid.size

    @property
    def q(self) -> int:
        return self.Z[0].shape[-1] - 1

    @property
    def functional(self) -> bool:
        return self.Z[0].ndim == 3

    @property
    def n_obs(self) -> np.ndarray:
        return np.array([y.shape[0] for y in self.Y])

    @property
    def n_max(self) -> int:
        return int(self.n_obs.max())

    def subset(self, idx) -> "FunctionalDataset":
        idx = list(idx)
        return FunctionalDataset(
            [self.Y[i] for i in idx],
            [self.Z[i] for i in idx],
            self.grid,
            [self.cluster_ids[i] for i in idx],
            list(self.covariate_names),
            dict(self.meta),
        )

    def linear_predictor(self, coef: np.ndarray, i: int) -> np.ndarray:
        """``(n_i, L)`` linear predictor of cluster ``i`` from coefficient curves.

        ``coef`` has shape ``(q + 1, L)`` (row 0 is the intercept curve).
        """
        Z = self.Z[i]
        if Z.ndim == 2:
            return Z @ coef
        return np.einsum("jla,al->jl", Z, coef)

    def stacked(self):
        """All clusters stacked row-wise: ``(Y, Z, cluster_index)``."""
        Y = np.vstack(self.Y)
        Z = np.concatenate(self.Z, axis=0)
        which = np.repeat(np.arange(self.N), self.n_obs)
        return Y, Z, which


def check_functional_data(X, Y, groups, grid=None) -> FunctionalDataset:
    """Validate estimator inputs and assemble a :class:`FunctionalDataset`.

    Parameters
    ----------
    X : array-like of shape (n_obs, q) or (n_obs, L, q), or None
        Scalar or functional covariates; ``None`` fits intercept-only.
    Y : array-like of shape (n_obs, L)
        Functional outcomes, one row per (cluster, observation).
    groups : array-like of shape (n_obs,)
        Cluster labels. Rows of a cluster must appear in longitudinal order.
    grid : array-like of shape (L,), optional
        Functional-domain points; defaults to ``linspace(0, 1, L)``.
    """
    Y = check_array(Y, ensure_2d=True, dtype=np.float64)
    n_obs, L = Y.shape
    if X is None:
        X = np.zeros((n_obs, 0))
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.shape[0] != n_obs:
        raise DataFormatError(f"X has {X.shape[0]} rows but Y has {n_obs}")
    if X.ndim == 3 and X.shape[1] != L:
        raise DataFormatError(
            f"functional covariates must be evaluated on the outcome grid (L={L}), got {X.shape[1]}"
        )
    if X.ndim not in (2, 3):
        raise DataFormatError("X must be 2-d (scalar) or 3-d (functional) covariates")
    if not np.all(np.isfinite(X)):
        raise DataFormatError("X contains non-finite values")
    groups = np.asarray(groups)
    if groups.shape != (n_obs,):
        raise DataFormatError(f"groups must have shape ({n_obs},), got {groups.shape}")
    grid = np.linspace(0.0, 1.0, L) if grid is None else np.asarray(grid, dtype=float)
    if grid.shape != (L,):
        raise DataFormatError(f"grid must have {L} points")
    if L > 1 and np.any(np.diff(grid) <= 0):
        raise DataFormatError("grid must be strictly increasing")

    _, first, inverse = np.unique(groups, return_index=True, return_inverse=True)
    order = np.argsort(first)
    Ys, Zs, ids = [], [], []
    for g in order:
        rows = np.nonzero(inverse == g)[0]
        x = X[rows]
        if x.ndim == 2:
            z = np.hstack([np.ones((len(rows), 1)), x])
        else:
            z = np.concatenate([np.ones((len(rows), L, 1)), x], axis=2)
        Ys.append(Y[rows])
        Zs.append(z)
        ids.append(groups[first[g]].item() if hasattr(groups[first[g]], "item") else groups[first[g]])
    return FunctionalDataset(Ys, Zs, grid, ids)


_REQUIRED = ["cluster_id", "obs_index", "s", "y"]


def _parse_float(text, lineno, column):
    try:
        return float(text)
    except ValueError:
        raise DataFormatError(
            f"line {lineno}: non-numeric value {text!r} in column {column!r}"
        ) from None


def ingest(path) -> FunctionalDataset:
    """Read the long CSV format ``cluster_id, obs_index, s, y, x1..xq``.

    Covariates constant within every (cluster, observation) are treated as
    scalar; otherwise all covariates are kept as functional.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if header[:4] != _REQUIRED:
            raise DataFormatError(
                f"header must start with {','.join(_REQUIRED)}, got {','.join(header[:4])}"
            )
        cov_names = header[4:]
        records = {}
        grid_values = set()
        cluster_order = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    f"line {lineno}: expected {len(header)} fields, got {len(row)}"
                )
            cid = row[0].strip()
            obs = _parse_float(row[1], lineno, "obs_index")
            if obs != int(obs):
                raise DataFormatError(f"line {lineno}: obs_index must be an integer")
            s = _parse_float(row[2], lineno, "s")
            y = _parse_float(row[3], lineno, "y")
            xs = [_parse_float(v, lineno, name) for v, name in zip(row[4:], cov_names)]
            key = (cid, int(obs), s)
            if key in records:
                raise DataFormatError(f"line {lineno}: duplicate row for {key}")
            records[key] = (y, xs)
            grid_values.add(s)
            cluster_order.setdefault(cid, None)
    if not records:
        raise DataFormatError(f"{path}: no data rows")

    cluster_order = list(cluster_order)
    grid = np.array(sorted(grid_values))
    L, q = grid.size, len(cov_names)
    obs_by_cluster = {c: set() for c in cluster_order}
    for cid, obs, _ in records:
        obs_by_cluster[cid].add(obs)

    Ys, Xs = [], []
    for cid in cluster_order:
        obs = sorted(obs_by_cluster[cid])
        if obs != list(range(obs[0], obs[0] + len(obs))):
            raise DataFormatError(
                f"cluster {cid}: obs_index values {obs} are not consecutive "
                "(irregular longitudinal spacing is not supported)"
            )
        y = np.empty((len(obs), L))
        x = np.empty((len(obs), L, q))
        for j, o in enumerate(obs):
            for l, s in enumerate(grid):
                try:
                    yv, xv = records[(cid, o, s)]
                except KeyError:
                    raise DataFormatError(
                        f"missing row for (cluster_id={cid}, obs_index={o}, s={float(s)!r})"
                    ) from None
                y[j, l] = yv
                x[j, l] = xv
        Ys.append(y)
        Xs.append(x)

    functional = any(np.any(x != x[:, :1, :]) for x in Xs)
    Zs = []
    for x in Xs:
        n = x.shape[0]
        if functional:
            Zs.append(np.concatenate([np.ones((n, L, 1)), x], axis=2))
        else:
            Zs.append(np.hstack([np.ones((n, 1)), x[:, 0, :]]))
    return FunctionalDataset(Ys, Zs, grid, list(cluster_order), cov_names)


def write_csv(dataset: FunctionalDataset, path) -> None:
    """Write a dataset in the long CSV format read by :func:`ingest`."""
    names = dataset.covariate_names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(_REQUIRED + list(names))
        for cid, Y, Z in zip(dataset.cluster_ids, dataset.Y, dataset.Z):
            for j in range(Y.shape[0]):
                for l, s in enumerate(dataset.grid):
                    x = Z[j, 1:] if Z.ndim == 2 else Z[j, l, 1:]
                    w.writerow([cid, j, repr(float(s)), repr(float(Y[j, l]))] + [repr(float(v)) for v in x])
