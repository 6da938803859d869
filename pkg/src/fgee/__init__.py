"""One-step penalized functional generalized estimating equations."""

from fgee.basis import BasisSpec, build_basis, build_penalty, design_rows, difference_matrix
from fgee.data import DataFormatError, FunctionalDataset, check_functional_data, ingest, write_csv
from fgee.estimators import FoSR, OneStepFGEE, PenalizedGLS
from fgee.glm import get_family
from fgee.inference import BandSet, ThetaCovariance, build_bands, fast_cluster_bootstrap, sandwich_variance
from fgee.initial_fit import select_lambda0
from fgee.onestep import OneStepInputs, gls_fit, onestep_update, sequential_tune
from fgee.pipeline import FitReport, RunConfig, run_fit
from fgee.simgen import SimDesign, generate, get_design, score_fit, true_betas
from fgee.workcov import WorkingCovModel, fit_working_cov

__all__ = [
    "BandSet",
    "BasisSpec",
    "DataFormatError",
    "FitReport",
    "FoSR",
    "FunctionalDataset",
    "OneStepFGEE",
    "OneStepInputs",
    "PenalizedGLS",
    "RunConfig",
    "SimDesign",
    "ThetaCovariance",
    "WorkingCovModel",
    "build_bands",
    "build_basis",
    "build_penalty",
    "check_functional_data",
    "design_rows",
    "difference_matrix",
    "fast_cluster_bootstrap",
    "fit_working_cov",
    "generate",
    "get_design",
    "get_family",
    "gls_fit",
    "ingest",
    "onestep_update",
    "run_fit",
    "sandwich_variance",
    "score_fit",
    "select_lambda0",
    "sequential_tune",
    "true_betas",
    "write_csv",
]
