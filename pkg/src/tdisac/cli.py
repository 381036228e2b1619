"""Command-line entry point: ``tdisac <experiment> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .harness import ExperimentSpec, run
from .scenario import default_scenario, load_scenario
from .schemes import SCHEMES, Tolerances


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="scenario YAML file (default: built-in deployment)")
    common.add_argument("--out", default="results", help="output directory")
    common.add_argument("--seed", type=int, default=0, help="RCS / noise seed")
    common.add_argument("--seeds", type=_ints, help="comma-separated seed list (overrides --seed)")
    common.add_argument("--tol", type=float, default=1e-3, help="AO and bisection tolerance")
    common.add_argument("--workers", type=int, default=1, help="worker processes for grid cells")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="tdisac", description="Time-division near-field ISAC experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="experiment", required=True)

    e = sub.add_parser("error-model", parents=[common], help="channel error versus position error")
    e.add_argument("--samples", type=int, default=100_000)

    c = sub.add_parser("crlb-sweep", parents=[common], help="sqrt CRLB versus sensing power")
    c.add_argument("--sensing-powers", type=_floats, default=(30.0, 35.0, 40.0, 45.0, 50.0))

    sub.add_parser("music", parents=[common], help="near/far-field MUSIC spectra")

    for name, help_ in (("optimize", "certified rates over a power / threshold grid"),
                        ("eta-sweep", "optimized eta versus sensing power")):
        o = sub.add_parser(name, parents=[common], help=help_)
        o.add_argument("--scheme", choices=SCHEMES + ("all",), default="all")
        o.add_argument("--comm-powers", type=_floats, default=())
        o.add_argument("--sensing-powers", type=_floats, default=())
        o.add_argument("--crlb-thresholds", type=_floats, default=())
        o.add_argument("--eta0", type=float, default=0.5)

    v = sub.add_parser("convergence", parents=[common], help="AO traces from one initial eta")
    v.add_argument("--eta0", type=float, default=0.5)
    v.add_argument("--scheme", choices=("main", "mrt", "all"), default="main")
    return p


def spec_from_args(args) -> ExperimentSpec:
    scenario = load_scenario(args.scenario) if args.scenario else default_scenario()
    seeds = args.seeds or (args.seed,)
    kw = dict(experiment=args.experiment, scenario=scenario, out_dir=args.out, seeds=seeds,
              tolerances=Tolerances(ao=args.tol, bisection=args.tol), workers=args.workers)
    if args.experiment == "error-model":
        kw["n_samples"] = args.samples
    if args.experiment in ("crlb-sweep", "optimize", "eta-sweep"):
        kw["sensing_powers_dbm"] = args.sensing_powers
    if args.experiment in ("optimize", "eta-sweep"):
        kw.update(comm_powers_dbm=args.comm_powers, crlb_thresholds=args.crlb_thresholds)
    if args.experiment in ("optimize", "eta-sweep", "convergence"):
        kw["eta0"] = args.eta0
        kw["schemes"] = SCHEMES if args.scheme == "all" else (args.scheme,)
    return ExperimentSpec(**kw)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = spec_from_args(args)
    except (ValueError, OSError) as exc:
        print(f"tdisac: error: {exc}", file=sys.stderr)
        return 2
    run(spec)
    print(f"wrote {spec.experiment} results to {spec.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
