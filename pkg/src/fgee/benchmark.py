"""Monte Carlo comparison of estimators over the registered simulation designs."""

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fgee.estimators import FoSR, OneStepFGEE, PenalizedGLS
from fgee.simgen import generate, get_design, replicate_seeds, score_fit, true_betas

ESTIMATORS = ("one-step", "fosr", "gls-ind", "gls-corr")


def make_estimator(name, design, **kwargs):
    """Estimator ``name`` configured for ``design``; ``None`` if it does not apply.

    ``kwargs`` are shared settings; each estimator takes the ones it accepts.
    """
    if name == "one-step":
        est = OneStepFGEE(family=design.family, corr=design.structure)
    elif name == "fosr":
        est = FoSR(family=design.family)
    elif name not in ESTIMATORS:
        raise ValueError(f"unknown estimator {name!r}; choose from {ESTIMATORS}")
    elif design.family != "gaussian":
        return None
    elif name == "gls-ind":
        est = PenalizedGLS(corr="independence")
    else:
        est = PenalizedGLS(corr=design.structure)
    accepted = est.get_params()
    return est.set_params(**{k: v for k, v in kwargs.items() if k in accepted})


def estimator_label(name, design):
    if name == "gls-corr":
        return "gls-ex" if design.structure == "exchangeable" else "gls-ar1"
    return name


@dataclass
class BenchmarkRow:
    design: str
    estimator: str
    replicates: int
    rmse: float
    rmse_ratio: float
    rmse_ratio_sem: float
    pointwise: float
    pointwise_sem: float
    joint: float
    joint_sem: float
    time: float
    time_sem: float


def _mean_sem(x):
    x = np.asarray(x, dtype=float)
    sem = float(x.std(ddof=1) / np.sqrt(x.size)) if x.size > 1 else float("nan")
    return float(x.mean()), sem


def run_replicates(design, replicates, seed=0, estimators=ESTIMATORS, **settings):
    """Per-replicate metrics ``{estimator: [MetricReport, ...]}``."""
    truth = true_betas(design)
    out = {}
    for rng in replicate_seeds(seed, replicates):
        data = generate(design, rng)
        for name in estimators:
            est = make_estimator(name, design, **settings)
            if est is None:
                continue
            t0 = time.perf_counter()
            est.fit(data)
            elapsed = time.perf_counter() - t0
            out.setdefault(estimator_label(name, design), []).append(score_fit(truth, est.bands_, elapsed))
    return out


def summarize(design_name, metrics):
    """Rows with RMSE ratios relative to FoSR, averaged over replicates."""
    rows = []
    base = np.array([m.rmse for m in metrics["fosr"]]) if "fosr" in metrics else None
    for name, ms in metrics.items():
        rmse = np.array([m.rmse for m in ms])
        ratio = rmse / base if base is not None else np.full(rmse.size, np.nan)
        rows.append(
            BenchmarkRow(
                design_name,
                name,
                len(ms),
                float(rmse.mean()),
                *_mean_sem(ratio),
                *_mean_sem([m.pointwise_coverage for m in ms]),
                *_mean_sem([m.joint_coverage for m in ms]),
                *_mean_sem([m.fit_time for m in ms]),
            )
        )
    return rows


def _fmt(x):
    return "" if x is None or not np.isfinite(x) else f"{x:.4f}"


def write_rows(rows, path):
    cols = list(BenchmarkRow.__dataclass_fields__)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(v) if isinstance(v, float) else v for v in (getattr(r, c) for c in cols)])


def run_benchmark(designs, replicates, seed=0, output=None, estimators=ESTIMATORS, overrides=None, settings=None):
    """Run every design in ``designs`` and return (and optionally write) the summary rows.

    ``overrides`` maps design fields (for example ``N`` or ``n``) to new values
    applied to every preset; ``settings`` are estimator parameters shared by
    all estimators that accept them.
    """
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    rows = []
    for name in designs:
        design = get_design(name, **(overrides or {}))
        rows.extend(summarize(name, run_replicates(design, replicates, seed, estimators, **(settings or {}))))
    if output is not None:
        Path(output).mkdir(parents=True, exist_ok=True)
        write_rows(rows, Path(output) / "benchmark.csv")
    return rows
