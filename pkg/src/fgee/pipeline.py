"""Run configuration, end-to-end fitting and the serialisable fit report."""

import csv
import json
import os
from dataclasses import asdict, dataclass, field, fields
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import List, Optional

import numpy as np

from fgee.data import ingest
from fgee.estimators import OneStepFGEE
from fgee.glm import FAMILIES
from fgee.workcov import STRUCTURES


def library_version():
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


@dataclass
class RunConfig:
    """All settings of one fit; validated up front and echoed into the manifest."""

    input: str = ""
    family: str = "gaussian"
    corr: str = "exchangeable"
    knots: int = 10
    knot_convention: str = "interior"
    degree: int = 3
    penalty_order: int = 1
    folds: int = 10
    cv: str = "fast"
    criterion: str = "nll"
    boot: int = 1000
    band_draws: int = 1000
    alpha: float = 0.05
    seed: int = 0
    threads: int = 1
    output: str = "fgee_out"
    stage1_grid: Optional[List[float]] = None
    stage2_grid: Optional[List[float]] = None
    stage3_grid: Optional[List[float]] = None
    gcv_grid: Optional[List[float]] = None
    variance: str = "sandwich"
    band: str = "parametric"
    smooth_rho: bool = False
    plots: bool = True

    def validate(self):
        choices = {
            "family": tuple(FAMILIES),
            "corr": STRUCTURES,
            "knot_convention": ("interior", "basis"),
            "cv": ("fast", "standard"),
            "criterion": ("nll", "mse"),
            "variance": ("sandwich", "bootstrap"),
            "band": ("parametric", "nonparametric"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {list(allowed)}, got {getattr(self, name)!r}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        for name in ("knots", "folds", "boot", "band_draws", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        if self.band_draws < 100:
            raise ValueError("band_draws must be at least 100")
        if self.band == "nonparametric" and self.variance != "bootstrap":
            raise ValueError("nonparametric bands need variance=bootstrap")
        for name in ("stage1_grid", "stage2_grid", "stage3_grid", "gcv_grid"):
            grid = getattr(self, name)
            if grid is not None and (len(grid) == 0 or min(grid) <= 0):
                raise ValueError(f"{name} must be a non-empty list of positive multipliers")
        return self

    def stage_grids(self):
        from fgee.onestep import DEFAULT_STAGE_GRIDS

        given = (self.stage1_grid, self.stage2_grid, self.stage3_grid)
        return tuple(g if g is not None else d for g, d in zip(given, DEFAULT_STAGE_GRIDS))

    def estimator(self) -> OneStepFGEE:
        return OneStepFGEE(
            family=self.family,
            corr=self.corr,
            n_knots=self.knots,
            degree=self.degree,
            penalty_order=self.penalty_order,
            knot_convention=self.knot_convention,
            cv=self.cv,
            n_folds=self.folds,
            criterion=self.criterion,
            stage_grids=self.stage_grids(),
            gcv_grid=self.gcv_grid,
            variance=self.variance,
            band=self.band,
            n_boot=self.boot,
            n_band_draws=self.band_draws,
            alpha=self.alpha,
            smooth_rho=self.smooth_rho,
            random_state=self.seed,
        )


@dataclass
class FitReport:
    """Everything needed to tabulate and re-plot a fit without refitting."""

    grid: list
    coef_names: list
    estimate: list
    se: list
    pw_lo: list
    pw_hi: list
    joint_lo: list
    joint_hi: list
    q_joint: list
    alpha: float
    rho_pass1: list
    rho_pass2: list
    lambda0: list
    lambda1: list
    tuning_trace: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    family: str = "gaussian"
    corr: str = "exchangeable"
    n_basis: int = 0
    knot_convention: str = "interior"
    dispersion: dict = field(default_factory=dict)

    @classmethod
    def from_estimator(cls, est, coef_names):
        b = est.bands_
        tr = est.tuning_.trace if getattr(est, "tuning_", None) is not None else []
        return cls(
            grid=est.grid_.tolist(),
            coef_names=list(coef_names),
            estimate=b.estimate.tolist(),
            se=b.se.tolist(),
            pw_lo=b.pw_lo.tolist(),
            pw_hi=b.pw_hi.tolist(),
            joint_lo=b.joint_lo.tolist(),
            joint_hi=b.joint_hi.tolist(),
            q_joint=b.q_joint.tolist(),
            alpha=float(b.alpha),
            rho_pass1=np.asarray(est.rho_["pass1"]).tolist(),
            rho_pass2=np.asarray(est.rho_.get("pass2", est.rho_["pass1"])).tolist(),
            lambda0=np.asarray(est.lambda0_).tolist(),
            lambda1=np.asarray(est.lambda1_).tolist(),
            tuning_trace=tr,
            timing=dict(est.timing_),
            warnings=list(est.warnings_),
            family=est.family_.name,
            corr=getattr(est, "corr", "independence"),
            n_basis=int(est.basis_.shape[1]),
            knot_convention=est.basis_spec_.knot_convention,
            dispersion={k: float(v) for k, v in est.dispersion_.items()},
        )

    def to_json(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=1), encoding="utf-8")

    @classmethod
    def from_json(cls, path):
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in names})

    def write_tables(self, outdir):
        outdir = Path(outdir)
        with open(outdir / "coefficients.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "name", "s", "estimate", "se", "pw_lo", "pw_hi", "joint_lo", "joint_hi"])
            for r, name in enumerate(self.coef_names):
                for l, s in enumerate(self.grid):
                    w.writerow(
                        [r, name, repr(s)]
                        + [repr(float(getattr(self, k)[r][l])) for k in ("estimate", "se", "pw_lo", "pw_hi", "joint_lo", "joint_hi")]
                    )
        with open(outdir / "rho.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "rho_pass1", "rho_pass2"])
            for s, a, b in zip(self.grid, self.rho_pass1, self.rho_pass2):
                w.writerow([repr(s), repr(float(a)), repr(float(b))])

    def plot(self, outdir):
        """One PNG per coefficient: estimate with pointwise and joint bands."""
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        paths = []
        s = np.asarray(self.grid)
        for r, name in enumerate(self.coef_names):
            fig, ax = plt.subplots(figsize=(5, 3.2))
            ax.fill_between(s, self.joint_lo[r], self.joint_hi[r], color="0.85", label="joint")
            ax.fill_between(s, self.pw_lo[r], self.pw_hi[r], color="0.65", label="pointwise")
            ax.plot(s, self.estimate[r], color="k", lw=1.5, label="estimate")
            ax.axhline(0.0, color="0.4", lw=0.6, ls=":")
            ax.set_xlabel("s")
            ax.set_ylabel(f"beta[{name}](s)")
            ax.legend(frameon=False, fontsize=8)
            fig.tight_layout()
            path = Path(outdir) / f"band_{r}_{name}.png"
            # no version string, so the PNG bytes depend only on the data
            fig.savefig(path, dpi=100, metadata={"Software": None})
            plt.close(fig)
            paths.append(path)
        return paths


def manifest(config: RunConfig, report: FitReport, dataset) -> dict:
    """Flat key-value record sufficient to reproduce the run."""
    out = {f"config.{k}": (json.dumps(v) if isinstance(v, list) else v) for k, v in asdict(config).items()}
    out.update(
        {
            "library_version": library_version(),
            "n_clusters": dataset.N,
            "n_observations": int(dataset.n_obs.sum()),
            "grid_size": dataset.L,
            "n_covariates": dataset.q,
            "n_basis": report.n_basis,
            "knot_interpretation": report.knot_convention,
            "family": report.family,
            "corr": report.corr,
            "lambda0": json.dumps(report.lambda0),
            "lambda1": json.dumps(report.lambda1),
            "warnings": json.dumps(report.warnings),
        }
    )
    return out


def run_fit(config: RunConfig, dataset=None) -> FitReport:
    """Fit ``config.input`` (or ``dataset``) and write all artifacts to ``config.output``."""
    config.validate()
    if dataset is None:
        dataset = ingest(config.input)
    est = config.estimator().fit(dataset)
    names = ["intercept"] + list(dataset.covariate_names)
    report = FitReport.from_estimator(est, names)
    outdir = Path(config.output)
    os.makedirs(outdir, exist_ok=True)
    report.write_tables(outdir)
    report.to_json(outdir / "report.json")
    (outdir / "manifest.json").write_text(
        json.dumps(manifest(config, report, dataset), indent=1, sort_keys=True), encoding="utf-8"
    )
    if config.plots:
        report.plot(outdir)
    return report
