"""Command-line entry point.

Subcommands: run (execute an experiment config), curves (re-emit curve
CSVs from a finished artifact), compare (tabulate several artifacts).
Exit codes: 0 success, 1 config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys

from . import experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="itsr",
        description="Robust image anomaly detection with adversarial "
                    "autoencoders and iterative training-set refinement.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a config file")
    run.add_argument("config", help="path to a key=value experiment config")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--scale", type=float, default=None,
                     help="override the data/epoch scale factor")
    run.add_argument("--out", default=None, help="artifact output directory")

    curves = sub.add_parser("curves", help="re-emit curve CSVs from an artifact")
    curves.add_argument("artifact_dir", help="directory written by 'run'")

    compare = sub.add_parser("compare", help="tabulate several artifacts")
    compare.add_argument("artifact_dirs", nargs="+", help="directories written by 'run'")
    compare.add_argument("--out", default="comparison.csv", help="summary CSV path")
    return parser


def _cmd_run(args) -> int:
    cfg = experiment.load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.scale is not None:
        if args.scale < 0.0:
            raise experiment.ConfigError("scale must be nonnegative")
        cfg.scale = args.scale
    out_dir = args.out or cfg.out_dir
    if out_dir is None:
        raise experiment.ConfigError("no output directory: set 'out' in the "
                                     "config or pass --out")
    artifact = experiment.run_experiment(cfg, out_dir=out_dir)
    for (split, criterion), report in sorted(artifact.reports.items()):
        print(f"{split:<12} {criterion:<9} tpr={report.tpr:.4f} "
              f"tnr={report.tnr:.4f} bacc={report.bacc:.4f}")
    print(f"artifacts written to {out_dir}")
    return 0


def _cmd_curves(args) -> int:
    experiment.emit_curves(args.artifact_dir)
    print(f"curve CSVs refreshed in {args.artifact_dir}")
    return 0


def _cmd_compare(args) -> int:
    experiment.compare_runs(args.artifact_dirs, args.out)
    print(f"summary written to {args.out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "curves":
            return _cmd_curves(args)
        return _cmd_compare(args)
    except experiment.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
