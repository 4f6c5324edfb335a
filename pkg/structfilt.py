#!/usr/bin/env python3
"""
structfilt command line: run convergence sweeps with or without the
structure-preserving filter, or check the filter on seeded random inputs.

    python structfilt.py run --config experiments.ini --section hat --filter PFI
    python structfilt.py check --degree 5 --seed 7 --cases 200
"""

import argparse
import sys
from typing import List, Optional

import pandas as pd
from pydantic import ValidationError

from errors import ConfigError
from harness import PROPERTY_CASES, load_config, rows_to_frame, run_experiment, run_property_suite

EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_ROW_FAILURE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="structfilt", description="Structure-preserving filter test bench")
    commands = parser.add_subparsers(dest="command", required=True)

    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=str, default=None, help="INI file with one section per experiment")
    shared.add_argument("--section", type=str, default=None, help="Experiment section (default: first)")
    shared.add_argument("--degree", type=int, default=None)
    shared.add_argument("--constraint", type=str, default=None, choices=["positivity", "bounds"])
    shared.add_argument("--tol", type=float, default=None, dest="tolerance")
    shared.add_argument("--out", type=str, default=None)

    run = commands.add_parser("run", parents=[shared], help="Run one h- or p-convergence sweep")
    run.add_argument("--problem", type=str, default=None,
                     choices=["advection-sine", "advection-hat", "cg-diffusion-reaction", "heat"])
    run.add_argument("--sweep", type=str, default=None, choices=["h", "p"])
    run.add_argument("--values", type=int, nargs="+", default=None, help="Element counts (h) or degrees (p)")
    run.add_argument("--elements", type=int, default=None)
    run.add_argument("--dt", type=float, default=None)
    run.add_argument("--tfinal", type=float, default=None)
    run.add_argument("--filter", type=str, default=None, choices=["off", "P", "PF", "PFI"])
    run.add_argument("--workers", type=int, default=None, help="Parallel processes over sweep points")
    run.add_argument("--deterministic", action="store_true", default=None,
                     help="Zero timing columns so repeated runs give identical CSVs")
    run.add_argument("--no-progress", action="store_true")

    check = commands.add_parser("check", parents=[shared], help="Seeded property checks of the filter itself")
    check.add_argument("--seed", type=int, default=None)
    check.add_argument("--cases", type=int, default=PROPERTY_CASES)
    return parser


def run_sweep(config, progress: bool) -> int:
    print(f"🧪 {config.name}: {config.problem}, {config.sweep}-sweep over {config.values}, filter={config.filter}")
    rows = run_experiment(config, progress=progress)

    with pd.option_context("display.float_format", "{:.4e}".format, "display.width", 120):
        print(rows_to_frame(rows).to_string(index=False))

    failed = [row for row in rows if row.status != "ok"]
    if failed:
        for row in failed:
            print(f"⚠️ sweep value {row.sweep_value}: {row.status}")
        print(f"❌ {len(failed)} of {len(rows)} sweep points failed; results in {config.out}/{config.name}.csv")
        return EXIT_ROW_FAILURE
    print(f"✅ Sweep complete; results in {config.out}/{config.name}.csv")
    return EXIT_OK


def run_check(config, cases: int) -> int:
    print(f"🧪 {config.name}: {cases} random inputs of degree {config.degree}, {config.constraint}, seed {config.seed}")
    frame = run_property_suite(config, cases)
    failed = frame[frame["status"] != "ok"]
    for _, row in failed.iterrows():
        print(f"⚠️ case {row['case']}: {row['status']}")
    if len(failed):
        print(f"❌ {len(failed)} of {len(frame)} cases failed; results in {config.out}/{config.name}_properties.csv")
        return EXIT_ROW_FAILURE
    print(f"✅ All {len(frame)} cases passed (max distance {frame['distance'].max():.3e}, "
          f"max iterations {frame['iterations'].max()})")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    keys = ("problem", "sweep", "values", "degree", "elements", "dt", "tfinal", "filter", "constraint",
            "tolerance", "out", "workers", "deterministic", "seed")
    overrides = {key: getattr(args, key, None) for key in keys}
    try:
        config = load_config(args.config, args.section, overrides)
        if args.command == "check" and args.cases < 1:
            raise ConfigError(f"--cases must be positive, got {args.cases}")
    except (ConfigError, ValidationError) as e:
        print(f"❌ Configuration error: {e}")
        return EXIT_CONFIG_ERROR

    if args.command == "check":
        return run_check(config, args.cases)
    return run_sweep(config, progress=not args.no_progress)


if __name__ == "__main__":
    sys.exit(main())
