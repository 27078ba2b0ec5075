"""Command line entry point: ``bnpsens run|validate <config.toml>``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import validate_config
from .errors import ConfigError
from .runner import EXIT_ERROR, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bnpsens",
        description="Local sensitivity of posterior expectations from MCMC draws, "
                    "with finite-difference refit validation.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config")
    run.add_argument("--seed", type=int, default=None, help="override sampler.seed")
    run.add_argument("--out", default=None, help="override output_dir")
    run.add_argument("--dump-chain", action="store_true", help="also write chain.csv")

    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    overrides = {}
    if args.command == "run":
        overrides = {"seed": args.seed, "output_dir": args.out, "dump_chain": args.dump_chain}
    try:
        cfg = validate_config(args.config, overrides)
    except ConfigError as exc:
        for path, msg in exc.errors:
            print(f"config error: {path}: {msg}", file=sys.stderr)
        return EXIT_ERROR

    if args.command == "validate":
        print(f"{args.config}: ok ({len(cfg.targets)} targets, N={len(cfg.data)})")
        return 0
    return run_experiment(cfg)


if __name__ == "__main__":
    sys.exit(main())
