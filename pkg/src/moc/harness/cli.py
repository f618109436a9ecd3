"""Command-line entry point: ``moc run | sweep | aggregate | verify``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .aggregate import cmd_aggregate
from .config import ConfigError, load_config
from .runner import cmd_run
from .sweep import cmd_sweep
from .verify import run_verification

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY = 0, 2, 3


def _plain(obj):
    if hasattr(obj, "item"):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def build_parser():
    parser = argparse.ArgumentParser(prog="moc", description="Option-critic experiments and checks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train every seed of a config")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (overrides harness.output_dir)")
    p.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    p.add_argument("--workers", type=int, help="parallel seed workers")

    p = sub.add_parser("sweep", help="run the Cartesian grid in harness.grid")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("aggregate", help="pool run directories into one 80%% band CSV")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, help="timestep bin width for timestep budgets")

    p = sub.add_parser("verify", help="numerical self-checks")
    p.add_argument("--scale", choices=["small", "full"], default="small")
    p.add_argument("--report", help="also write the JSON report here")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            out, _ = cmd_run(load_config(args.config), args.out, args.force, args.workers)
            print(out)
        elif args.command == "sweep":
            rows = cmd_sweep(load_config(args.config), args.out, args.force, args.workers)
            for rank, (point, name, metric, score) in enumerate(rows, 1):
                print(f"{rank:3d} {name} {metric}={score:.6g} {json.dumps(point, sort_keys=True)}")
        elif args.command == "aggregate":
            rows = cmd_aggregate(args.dirs, args.out, args.resolution)
            print(f"wrote {len(rows)} rows to {args.out}")
        elif args.command == "verify":
            report = run_verification(args.scale)
            text = json.dumps(report, indent=2, default=_plain)
            if args.report:
                with open(args.report, "w") as fh:
                    fh.write(text)
            print(text)
            return EXIT_OK if report["passed"] else EXIT_VERIFY
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
