"""One-step update, cluster cross-validation, sequential tuning and penalised GLS."""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from fgee._linalg import SPDFactor, coef_curves, expand_lambda, kron_gram, kron_vec
from fgee.glm import get_family
from fgee.workcov import cluster_summaries, fit_working_cov

DEFAULT_STAGE_GRIDS = (
    (1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3),
    (1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3),
    (0.25, 0.5, 1.0, 2.0, 4.0),
)


@dataclass
class OneStepInputs:
    """Per-cluster summaries evaluated at the initial estimate.

    ``W`` is ``(N, p, p)`` and ``b`` is ``(N, p)``; ``S`` is the penalty.
    """

    theta0: np.ndarray
    W: np.ndarray
    b: np.ndarray
    S: np.ndarray
    n_per_cluster: np.ndarray
    jitter_used: int = 0

    def __post_init__(self):
        N = self.W.shape[0]
        if self.b.shape[0] != N or len(self.n_per_cluster) != N:
            raise ValueError("W, b and n_per_cluster must all have one entry per cluster")
        self.n_per_cluster = np.asarray(self.n_per_cluster)

    @property
    def N(self) -> int:
        return self.W.shape[0]

    @property
    def p(self) -> int:
        return self.W.shape[1]

    def penalty(self, lam) -> np.ndarray:
        m = self.p // len(np.atleast_1d(lam))
        return expand_lambda(lam, m)[:, None] * self.S

    def subset(self, idx) -> "OneStepInputs":
        idx = np.asarray(idx)
        return OneStepInputs(self.theta0, self.W[idx], self.b[idx], self.S, self.n_per_cluster[idx])


def cluster_state(dataset, B, family, theta, dispersion=1.0):
    """Per-cluster ``(mu, deriv, a, resid)`` arrays, each ``(n_i, L)``."""
    family = get_family(family)
    coef = coef_curves(theta, B)
    out = []
    for i in range(dataset.N):
        eta = dataset.linear_predictor(coef, i)
        mu = family.linkinv(eta)
        deriv = family.mu_eta(eta)
        a = family.variance(mu) * dispersion
        out.append((mu, deriv, a, dataset.Y[i] - mu))
    return out


def residual_panel(states):
    """Scaled residuals ``A^{-1/2}(Y - mu)`` per cluster."""
    return [resid / np.sqrt(a) for _, _, a, resid in states]


def estimate_working_cov(dataset, B, family, theta, structure, dispersion=1.0, **kwargs):
    states = cluster_state(dataset, B, family, theta, dispersion)
    return fit_working_cov(structure, residual_panel(states), n_max=dataset.n_max, **kwargs)


def _summaries(dataset, B, cov, states):
    L, a1 = dataset.L, dataset.q + 1
    C = np.empty((dataset.N, L, a1, a1))
    c = np.empty((dataset.N, L, a1))
    for i, (mu, deriv, a, resid) in enumerate(states):
        C[i], c[i] = cluster_summaries(cov, a, deriv, dataset.Z[i], resid)
    W = np.einsum("nlab,ld,le->nadbe", C, B, B, optimize=True)
    p = a1 * B.shape[1]
    return W.reshape(dataset.N, p, p), kron_vec(c, B)


def build_inputs(dataset, B, S, family, theta0, cov, dispersion=1.0) -> OneStepInputs:
    """Precompute ``W_i`` and ``b_i`` at ``theta0`` with working covariance ``cov``."""
    states = cluster_state(dataset, B, family, theta0, dispersion)
    W, b = _summaries(dataset, B, cov, states)
    return OneStepInputs(np.asarray(theta0, dtype=float), W, b, S, dataset.n_obs)


def gls_inputs(dataset, B, S, cov, dispersion=1.0) -> OneStepInputs:
    """Summaries for the penalised GLS: the Gaussian one-step started at zero."""
    p = (dataset.q + 1) * B.shape[1]
    return build_inputs(dataset, B, S, "gaussian", np.zeros(p), cov, dispersion)


def onestep_update(inputs: OneStepInputs, lam) -> np.ndarray:
    """Single Newton step from ``theta0`` against the penalised estimating equation."""
    pen = inputs.penalty(lam)
    H = inputs.W.mean(axis=0) + pen
    rhs = inputs.b.mean(axis=0) - pen @ inputs.theta0
    return inputs.theta0 + SPDFactor(H, "one-step Hessian", check_rank=True).solve(rhs)


def gls_fit(dataset, B, S, cov, lam, dispersion=1.0, family="gaussian") -> np.ndarray:
    """Closed-form penalised GLS ``[sum X^T V^-1 X + N Lambda S]^-1 sum X^T V^-1 Y``."""
    if get_family(family).name != "gaussian":
        raise ValueError("penalized GLS is only available for the gaussian family")
    return onestep_update(gls_inputs(dataset, B, S, cov, dispersion), lam)


def make_folds(N, K=10, seed=0) -> List[np.ndarray]:
    """Shuffle cluster indices with a seeded RNG and deal them round-robin."""
    if K < 2:
        raise ValueError("K must be at least 2")
    if K > N:
        raise ValueError(f"K={K} folds requested for only {N} clusters")
    perm = np.random.default_rng(seed).permutation(N)
    return [np.sort(perm[k::K]) for k in range(K)]


def _train_mask(N, held_out):
    mask = np.ones(N, dtype=bool)
    mask[np.asarray(held_out, dtype=int)] = False
    if not mask.any():
        raise ValueError("fold leaves no training clusters")
    return mask


def fast_fold_estimate(inputs: OneStepInputs, lam, held_out, factor=None) -> np.ndarray:
    """Fold estimate reusing the full-sample Hessian.

    The penalty term is summed over training clusters only and scaled by
    ``1/N``; the score sum is inflated by ``n_tilde = sum n_i / sum_train n_i``.
    """
    mask = _train_mask(inputs.N, held_out)
    pen = inputs.penalty(lam)
    if factor is None:
        factor = SPDFactor(inputs.W.mean(axis=0) + pen, "one-step Hessian")
    n = inputs.n_per_cluster
    n_tilde = n.sum() / n[mask].sum()
    rhs = (n_tilde * inputs.b[mask].sum(axis=0) - mask.sum() * (pen @ inputs.theta0)) / inputs.N
    return inputs.theta0 + factor.solve(rhs)


def standard_fold_estimate(inputs: OneStepInputs, lam, held_out) -> np.ndarray:
    """Fold estimate with a fold-specific Hessian and ``n*_k``-scaled penalty."""
    mask = _train_mask(inputs.N, held_out)
    pen = inputs.penalty(lam)
    n = inputs.n_per_cluster
    n_star = n[mask].sum() / n.sum()
    H = inputs.W[mask].mean(axis=0) + n_star * pen
    rhs = inputs.b[mask].mean(axis=0) - n_star * (pen @ inputs.theta0)
    return inputs.theta0 + SPDFactor(H, "fold Hessian").solve(rhs)


class FoldCache:
    """Per-fold sums reused across every smoothing parameter in a CV search."""

    def __init__(self, inputs: OneStepInputs, folds, method="fast"):
        if method not in ("fast", "standard"):
            raise ValueError("method must be 'fast' or 'standard'")
        self.inputs = inputs
        self.folds = [np.asarray(f, dtype=int) for f in folds]
        self.method = method
        N = inputs.N
        masks = np.array([_train_mask(N, f) for f in self.folds])
        n = inputs.n_per_cluster
        self.n_train = masks.sum(axis=1)
        self.b_train = masks.astype(float) @ inputs.b
        n_train_obs = masks @ n
        self.n_tilde = n.sum() / n_train_obs
        self.n_star = n_train_obs / n.sum()
        self.W_full = inputs.W.mean(axis=0)
        if method == "standard":
            self.W_train = np.einsum("kn,npq->kpq", masks.astype(float), inputs.W) / self.n_train[:, None, None]

    def estimates(self, lam) -> np.ndarray:
        """``(K, p)`` fold estimates at smoothing parameters ``lam``."""
        inp = self.inputs
        pen = inp.penalty(lam)
        pt = pen @ inp.theta0
        if self.method == "fast":
            factor = SPDFactor(self.W_full + pen, "one-step Hessian")
            rhs = (self.n_tilde[:, None] * self.b_train - self.n_train[:, None] * pt[None]) / inp.N
            return inp.theta0[None] + factor.solve(rhs.T).T
        out = np.empty((len(self.folds), inp.p))
        for k in range(len(self.folds)):
            H = self.W_train[k] + self.n_star[k] * pen
            rhs = self.b_train[k] / self.n_train[k] - self.n_star[k] * pt
            out[k] = inp.theta0 + SPDFactor(H, "fold Hessian").solve(rhs)
        return out


class HeldOutScorer:
    """Evaluates a CV criterion on held-out clusters for a set of fold estimates."""

    def __init__(self, dataset, B, family, folds, criterion="nll", dispersion=1.0):
        if criterion not in ("nll", "mse"):
            raise ValueError("criterion must be 'nll' or 'mse'")
        self.family = get_family(family)
        self.B = B
        self.criterion = criterion
        self.dispersion = dispersion
        self.parts = []
        for f in folds:
            sub = dataset.subset(f)
            Y, Z, _ = sub.stacked()
            self.parts.append((Y, Z))

    def __call__(self, thetas) -> float:
        coefs = coef_curves(np.asarray(thetas), self.B)
        total = 0.0
        for (Y, Z), coef in zip(self.parts, coefs):
            if Z.ndim == 2:
                eta = Z @ coef
            else:
                eta = np.einsum("nla,al->nl", Z, coef)
            mu = self.family.linkinv(eta)
            if self.criterion == "mse":
                total += float(np.sum((Y - mu) ** 2))
            else:
                total += self.family.nll(Y, mu, self.dispersion)
        return total


def cv_score(fold_estimates, held_out_data, family, criterion="nll", dispersion=1.0, B=None) -> float:
    """Sum of the held-out criterion across folds.

    ``held_out_data`` is a list of ``(Y, Z)`` pairs (stacked held-out rows),
    one per fold, aligned with ``fold_estimates``.
    """
    family = get_family(family)
    total = 0.0
    for theta, (Y, Z) in zip(fold_estimates, held_out_data):
        coef = coef_curves(theta, B)
        eta = Z @ coef if Z.ndim == 2 else np.einsum("nla,al->nl", Z, coef)
        mu = family.linkinv(eta)
        if criterion == "mse":
            total += float(np.sum((Y - mu) ** 2))
        else:
            total += family.nll(Y, mu, dispersion)
    return total


@dataclass
class TuningResult:
    lam: np.ndarray
    score: float
    trace: List[dict] = field(default_factory=list)


def _argmin_tiebreak(scores, lams):
    scores = np.asarray(scores)
    best = np.min(scores)
    tol = 1e-12 * max(abs(best), 1e-300)
    tied = np.nonzero(scores <= best + tol)[0]
    sizes = [np.sum(np.log(lams[i])) for i in tied]
    return tied[int(np.argmax(sizes))]


def sequential_tune(score_fn, anchor, stage_grids=DEFAULT_STAGE_GRIDS) -> TuningResult:
    """Three-stage smoothing-parameter search.

    Stage 1 scales every block of ``anchor`` by a common multiplier; stage 2
    evaluates all combinations of per-block multipliers around the stage-1
    winner; stage 3 repeats this with a local grid around the stage-2 winner.
    ``score_fn`` maps a ``(q + 1,)`` lambda vector to a CV score; ties go to
    the larger (smoother) lambda.
    """
    anchor = np.asarray(anchor, dtype=float)
    trace = []

    def run(stage, candidates):
        scores = []
        for lam in candidates:
            s = score_fn(lam)
            scores.append(s)
            trace.append({"stage": stage, "lambda": lam.tolist(), "score": float(s)})
        i = _argmin_tiebreak(scores, candidates)
        return candidates[i], scores[i]

    g1 = np.asarray(stage_grids[0], dtype=float)
    cand = [anchor * a for a in g1]
    best, _ = run(1, cand)
    for stage, grid in ((2, stage_grids[1]), (3, stage_grids[2])):
        grid = np.asarray(grid, dtype=float)
        mesh = np.stack(np.meshgrid(*([grid] * anchor.size), indexing="ij"), axis=-1).reshape(-1, anchor.size)
        cand = [best * row for row in mesh]
        best, score = run(stage, cand)
    return TuningResult(np.asarray(best), float(score), trace)


def make_cv_objective(inputs, dataset, B, family, folds, method="fast", criterion="nll", dispersion=1.0):
    """Score function ``lam -> CV criterion`` for :func:`sequential_tune`."""
    cache = FoldCache(inputs, folds, method)
    scorer = HeldOutScorer(dataset, B, family, folds, criterion, dispersion)
    return lambda lam: scorer(cache.estimates(lam))
