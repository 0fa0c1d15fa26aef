"""Command-line front end.

Subcommands: run, design, report, grid-eta, validate-config.
Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

import argparse
import json
import sys

from . import harness


def _load(args) -> dict:
    if args.config:
        cfg = harness.load_config(args.config)
    else:
        cfg = harness.validate_config({})
    if getattr(args, "seeds", None):
        cfg["seeds"] = [int(s) for s in args.seeds.split(",")]
    if getattr(args, "schemes", None):
        cfg["schemes"] = args.schemes.split(",")
    return harness.validate_config(cfg)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="otafl",
                                     description="Biased over-the-air FL simulator and designer")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the multi-seed experiment")
    run.add_argument("--config", help="JSON config file (defaults embedded)")
    run.add_argument("--seeds", help="comma-separated seed list override")
    run.add_argument("--schemes", help="comma-separated scheme list override")
    run.add_argument("--out-dir", required=True)
    run.add_argument("--threads", type=int, default=1)

    design = sub.add_parser("design", help="run the SCA pre-scaler design alone")
    design.add_argument("--config")
    design.add_argument("--out", required=True, help="output design JSON path")

    rep = sub.add_parser("report", help="summarize metrics files into CSV tables")
    rep.add_argument("metrics", nargs="+", help="metrics.ndjson files")
    rep.add_argument("--out-dir", required=True)
    rep.add_argument("--target-accuracy", type=float, default=None)

    grid = sub.add_parser("grid-eta", help="grid-search the shared stepsize")
    grid.add_argument("--config")
    grid.add_argument("--etas", required=True, help="comma-separated stepsize grid")
    grid.add_argument("--t-rounds", type=int, default=60)
    grid.add_argument("--seeds", help="comma-separated seed list override")
    grid.add_argument("--out", help="optional JSON output path")

    check = sub.add_parser("validate-config", help="validate a config file")
    check.add_argument("config")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "validate-config":
            harness.load_config(args.config)
            print("config OK")
            return 0
        if args.command == "run":
            cfg = _load(args)
            path = harness.run_experiment(cfg, args.out_dir, threads=args.threads)
            print(f"metrics written to {path}")
            return 0
        if args.command == "design":
            cfg = _load(args)
            path = harness.design_prescalers(cfg, args.out)
            print(f"design written to {path}")
            return 0
        if args.command == "report":
            cfg_target = args.target_accuracy
            harness.report(args.metrics, args.out_dir, target_accuracy=cfg_target)
            print(f"summaries written to {args.out_dir}")
            return 0
        if args.command == "grid-eta":
            cfg = _load(args)
            etas = [float(e) for e in args.etas.split(",")]
            seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
            result = harness.grid_eta(cfg, etas, t_rounds=args.t_rounds, seeds=seeds,
                                      out_path=args.out)
            print(json.dumps(result, sort_keys=True))
            return 0
        parser.error(f"unknown command {args.command}")
    except harness.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # runtime failure
        print(f"error: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
