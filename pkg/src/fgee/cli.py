"""Command-line interface: ``fgee fit``, ``fgee benchmark``, ``fgee simulate`` and ``fgee plot``.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from fgee.initial_fit import ConvergenceError, SingularDesignError
from fgee.workcov import PositiveDefinitenessError

log = logging.getLogger("fgee")

NUMERICAL_ERRORS = (np.linalg.LinAlgError, SingularDesignError, ConvergenceError, PositiveDefinitenessError, FloatingPointError)
VALIDATION_ERRORS = (ValueError, FileNotFoundError, KeyError)


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_fit_args(p):
    from fgee.pipeline import RunConfig

    defaults = RunConfig()
    p.add_argument("--input", required=True, help="long-format CSV (cluster_id, obs_index, s, y, x1..xq)")
    p.add_argument("--family", default=defaults.family, help="gaussian, binomial or poisson")
    p.add_argument("--corr", default=defaults.corr, help="independence, exchangeable or ar1")
    p.add_argument("--knots", type=int, default=defaults.knots)
    p.add_argument("--knot-convention", default=defaults.knot_convention, help="interior or basis")
    p.add_argument("--degree", type=int, default=defaults.degree)
    p.add_argument("--penalty-order", type=int, default=defaults.penalty_order)
    p.add_argument("--folds", type=int, default=defaults.folds)
    p.add_argument("--cv", default=defaults.cv, help="fast or standard")
    p.add_argument("--criterion", default=defaults.criterion, help="nll or mse")
    p.add_argument("--boot", type=int, default=defaults.boot, help="bootstrap replicates")
    p.add_argument("--band-draws", type=int, default=defaults.band_draws)
    p.add_argument("--alpha", type=float, default=defaults.alpha)
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--threads", type=int, default=defaults.threads)
    p.add_argument("--output", default=defaults.output)
    for k in (1, 2, 3):
        p.add_argument(f"--stage{k}-grid", type=_floats, default=None)
    p.add_argument("--gcv-grid", type=_floats, default=None)
    p.add_argument("--variance", default=defaults.variance, help="sandwich or bootstrap")
    p.add_argument("--band", default=defaults.band, help="parametric or nonparametric")
    p.add_argument("--smooth-rho", action="store_true")
    p.add_argument("--no-plots", dest="plots", action="store_false")


def build_parser():
    parser = argparse.ArgumentParser(prog="fgee", description="One-step penalized functional GEE")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_fit_args(sub.add_parser("fit", help="fit a model to a CSV file"))

    b = sub.add_parser("benchmark", help="Monte Carlo comparison on simulation presets")
    b.add_argument("--designs", default="gaussian-exch,gaussian-ar1,binary-ar1")
    b.add_argument("--replicates", type=int, default=10)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--output", default="fgee_benchmark")
    b.add_argument("--N", type=int, default=None, help="override the cluster count")
    b.add_argument("--n", type=int, default=None, help="override the cluster size")
    b.add_argument("--rho", type=float, default=None, help="override the AR1 correlation")

    s = sub.add_parser("simulate", help="write one simulated dataset as CSV")
    s.add_argument("--design", default="gaussian-exch")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--N", type=int, default=None)
    s.add_argument("--n", type=int, default=None)
    s.add_argument("--rho", type=float, default=None)
    s.add_argument("--output", required=True)

    r = sub.add_parser("plot", help="redraw band plots from a saved report.json")
    r.add_argument("report")
    r.add_argument("--output", default=None)
    return parser


def _overrides(args):
    return {k: getattr(args, k) for k in ("N", "n", "rho") if getattr(args, k, None) is not None}


def cmd_fit(args):
    from fgee.pipeline import RunConfig, run_fit

    names = {f.name for f in fields(RunConfig)}
    config = RunConfig(**{k: v for k, v in vars(args).items() if k in names})
    config.validate()
    if not Path(config.input).exists():
        raise FileNotFoundError(f"input file {config.input} does not exist")
    report = run_fit(config)
    for w in report.warnings:
        log.warning(w)
    print(json.dumps({"output": config.output, "lambda1": report.lambda1, "timing": report.timing}))


def cmd_benchmark(args):
    from fgee.benchmark import run_benchmark

    designs = [d.strip() for d in args.designs.split(",") if d.strip()]
    rows = run_benchmark(designs, args.replicates, args.seed, args.output, overrides=_overrides(args))
    for r in rows:
        print(f"{r.design:18s} {r.estimator:9s} ratio={r.rmse_ratio:.3f} pw={r.pointwise:.3f} joint={r.joint:.3f} time={r.time:.2f}s")


def cmd_simulate(args):
    from fgee.data import write_csv
    from fgee.simgen import generate, get_design

    design = get_design(args.design, **_overrides(args))
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    write_csv(generate(design, args.seed), args.output)


def cmd_plot(args):
    from fgee.pipeline import FitReport

    report = FitReport.from_json(args.report)
    outdir = Path(args.output or Path(args.report).parent)
    outdir.mkdir(parents=True, exist_ok=True)
    for p in report.plot(outdir):
        print(p)


COMMANDS = {"fit": cmd_fit, "benchmark": cmd_benchmark, "simulate": cmd_simulate, "plot": cmd_plot}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
