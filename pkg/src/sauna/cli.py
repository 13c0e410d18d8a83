"""Command-line entry point: ``sauna train|compare|export|suite``.

Exit status is 0 only when every requested seed completed.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig
from .exceptions import SaunaError
from .harness import (
    COMPARE_COLUMNS,
    EXPORTABLE,
    compare,
    export_plotdata,
    run_experiment,
    run_suite,
    write_table,
)

logger = logging.getLogger("sauna")


def _build_parser():
    parser = argparse.ArgumentParser(prog="sauna", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train every seed of one configuration")
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", type=Path, help="run directory (default: output_dir from the config)")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("compare", help="final-performance table of run B against run A")
    p.add_argument("run_a", type=Path)
    p.add_argument("run_b", type=Path)
    p.add_argument("--window", type=int, default=10)

    p = sub.add_parser("export", help="plot-ready CSVs for one metric")
    p.add_argument("--metric", required=True, help=f"one of: {', '.join(EXPORTABLE)}")
    p.add_argument("--out", type=Path, default=Path("."), help="directory for the CSVs")
    p.add_argument("runs", type=Path, nargs="+")

    p = sub.add_parser("suite", help="named multi-variant experiment")
    p.add_argument("name", choices=["paper-suite"])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--env", action="append", choices=["pendulum", "pointmass"])
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--workers", type=int, default=1)
    return parser


def _cmd_train(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg = cfg.with_overrides(args.overrides)
    outcome = run_experiment(cfg, args.out, workers=args.workers)
    for seed, status, message in outcome.statuses:
        print(f"seed {seed}: {status}" + (f" ({message})" if message else ""))
    return 0 if outcome.ok else 1


def _cmd_compare(args):
    rows = compare(args.run_a, args.run_b, window=args.window)
    write_table(rows, COMPARE_COLUMNS, sys.stdout)
    return 0


def _cmd_export(args):
    long_rows, agg_rows = export_plotdata(args.runs, args.metric)
    args.out.mkdir(parents=True, exist_ok=True)
    for name, rows, columns in (
            (f"{args.metric}_long.csv", long_rows, ["steps", "variant", "seed", "value"]),
            (f"{args.metric}_agg.csv", agg_rows, ["steps", "variant", "mean", "std"])):
        with open(args.out / name, "w", newline="") as fh:
            write_table(rows, columns, fh)
        print(args.out / name)
    return 0


def _cmd_suite(args):
    envs = tuple(args.env) if args.env else ("pendulum", "pointmass")
    outcomes = run_suite(args.out, envs=envs, overrides=args.overrides, workers=args.workers)
    ok = True
    for (env, variant), outcome in outcomes.items():
        failed = [s for s, status, _ in outcome.statuses if status != "ok"]
        ok &= not failed
        print(f"{env}/{variant}: {len(outcome.statuses) - len(failed)} ok, {len(failed)} failed")
    return 0 if ok else 1


_COMMANDS = {"train": _cmd_train, "compare": _cmd_compare, "export": _cmd_export,
             "suite": _cmd_suite}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (SaunaError, OSError, csv.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
