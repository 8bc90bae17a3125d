"""Command-line front door.

    hpsnn <experiment> --config path.cfg --seed 123 --out runs/exp1

Subcommands map one-to-one onto the experiment harnesses. Exit codes:
0 success, 2 malformed configuration, 3 data problems (missing files,
bad containers), 4 numeric failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import EXPERIMENTS, RunConfig, parse_config
from .errors import (CheckpointError, ConfigError, DataError, DimensionError,
                     NumericError)
from .harness import run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hpsnn",
        description="Hybrid-plasticity spiking network experiments")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug logging")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", default=None,
                       help="path to a [section] key=value config file")
        p.add_argument("--seed", type=int, default=None,
                       help="run seed (mandatory here or in the config)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--data-dir", default=None,
                       help="dataset directory override")
        p.add_argument("--checkpoint", default=None,
                       help="checkpoint path override")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    cfg.experiment = args.experiment
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.data_dir is not None:
        cfg.data_dir = args.data_dir
    if args.checkpoint is not None:
        cfg.checkpoint = args.checkpoint
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_experiment(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, DimensionError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    printable = {k: v for k, v in result.items()
                 if isinstance(v, (int, float, str, bool))}
    print(json.dumps(printable, sort_keys=True))
    if cfg.experiment == "gradcheck" and not result.get("passed", False):
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
