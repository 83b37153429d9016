"""Command-line entry point.

Subcommands:
  run           execute the configured experiment modes, write CSVs
  sweep-lambda  rerun the knowledge-federated mode over a trust-weight grid
  check         run the personalized-model guarantee suite on random instances

Exit codes: 0 success, 1 runtime failure, 2 bad flags or config.
FEDKNOW_LOG selects the log level (error | info | debug).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .checks import invariant_check
from .config import ConfigError, load_config
from .experiments import lambda_sweep, run_all

log = logging.getLogger("fedknow")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level = _LOG_LEVELS.get(os.environ.get("FEDKNOW_LOG", "info").lower(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedknow",
        description="Federated-learning simulator with client-side knowledge priors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the configured experiment modes")
    run_p.add_argument("--config", required=True, help="experiment config file")
    run_p.add_argument("--out", help="output directory (overrides config)")
    run_p.add_argument("--seed", type=int, help="seed (overrides config)")
    run_p.add_argument("--threads", type=int, help="client-parallelism cap (overrides config)")

    sweep_p = sub.add_parser("sweep-lambda", help="sweep the trust weight over a grid")
    sweep_p.add_argument("--config", required=True, help="experiment config file")
    sweep_p.add_argument("--grid", required=True, help="comma-separated trust weights, e.g. 0.0,0.1,0.2")
    sweep_p.add_argument("--out", help="output directory (overrides config)")
    sweep_p.add_argument("--seed", type=int, help="seed (overrides config)")

    check_p = sub.add_parser("check", help="verify the personalized-model guarantees")
    check_p.add_argument("--instances", type=int, default=200, help="random instances to draw")
    check_p.add_argument("--seed", type=int, default=2024, help="seed for the instance stream")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 2
    try:
        if args.command == "run":
            cfg = load_config(args.config).with_overrides(
                seed=args.seed, output_dir=args.out, threads=args.threads
            )
            written = run_all(cfg)
            for name in sorted(written):
                print(f"wrote {written[name]}")
            return 0
        if args.command == "sweep-lambda":
            cfg = load_config(args.config).with_overrides(seed=args.seed, output_dir=args.out)
            try:
                grid = [float(tok) for tok in args.grid.split(",") if tok.strip()]
            except ValueError:
                print(f"error: bad --grid value {args.grid!r}", file=sys.stderr)
                return 2
            if not grid or not all(0.0 <= g <= 1.0 for g in grid):
                print("error: --grid values must lie in [0, 1]", file=sys.stderr)
                return 2
            lambda_sweep(cfg, grid)
            out = cfg.output_dir
            print(f"wrote {out}/sweep.csv")
            print(f"wrote {out}/sweep_mean.csv")
            return 0
        if args.command == "check":
            return 0 if invariant_check(args.instances, args.seed) else 1
        parser.print_usage(sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        print(f"(run '{parser.prog} {args.command} --help' for usage)", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: structured message, exit 1
        log.debug("failure detail", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entrypoint()
