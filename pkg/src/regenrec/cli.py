"""Command-line entry point: ``regenrec <command> [--config F] [--seed N] [--out DIR] [--set k=v ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .bilevel import NumericalError
from .config import ConfigError, load_config
from .corpus import DatasetError
from .target_models import TrainingError

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regenrec", description="Sequential-recommendation dataset regeneration pipeline.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; unspecified keys keep their defaults")
    common.add_argument("--seed", type=int, help="master seed (per-stage seeds are derived from it)")
    common.add_argument("--out", help="output root; stage outputs go to <out>/<stage>/")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config value, e.g. --set bilevel.T_lower=10 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("mine", parents=[common], help="mine patterns and pre-training pairs")
    sub.add_parser("pretrain", parents=[common], help="pre-train the regenerator")
    sub.add_parser("regenerate", parents=[common], help="regenerate the training dataset")
    p = sub.add_parser("train", parents=[common], help="train a target model")
    p.add_argument("--variant", choices=pipeline.VARIANTS, default="dr4sr_plus")
    p = sub.add_parser("evaluate", parents=[common], help="evaluate a target checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--exclude-seen", action="store_true", help="mask items already in the prefix")
    sub.add_parser("compare", parents=[common], help="all variants over compare_seeds; mean and std table")
    p = sub.add_parser("run", parents=[common], help="mine, pretrain, regenerate, train and evaluate")
    p.add_argument("--variant", choices=pipeline.VARIANTS, default="dr4sr_plus")
    return parser


def _print(result):
    for key, value in result.items():
        print(f"{key}\t{value:.6f}" if isinstance(value, float) else f"{key}\t{value}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, seed=args.seed, out=args.out)
        if args.command == "mine":
            result = pipeline.cmd_mine(cfg)
        elif args.command == "pretrain":
            result = pipeline.cmd_pretrain(cfg)
        elif args.command == "regenerate":
            result = pipeline.cmd_regenerate(cfg)
        elif args.command == "train":
            result = pipeline.cmd_train(cfg, args.variant)
        elif args.command == "evaluate":
            result = pipeline.cmd_evaluate(cfg, args.checkpoint, exclude_seen=args.exclude_seen)
        elif args.command == "compare":
            pipeline.cmd_compare(cfg)
            sys.stdout.write((Path(cfg.out) / "compare" / "table.tsv").read_text(encoding="utf-8"))
            return 0
        else:
            result = pipeline.cmd_run(cfg, args.variant)
    except (pipeline.PipelineError, ConfigError, DatasetError, TrainingError, NumericalError, FileNotFoundError, ValueError) as exc:
        print(f"regenrec {args.command}: error: {exc}", file=sys.stderr)
        return 1
    _print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
