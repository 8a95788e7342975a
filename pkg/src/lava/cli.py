"""Command-line entry point: `lava <stage> --config <path>` with staged pipeline.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .config import STAGES, default_config, parse_config
from .errors import CheckpointError, ConfigurationError, DataError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3

_NEEDS_CHECKPOINT = {"adapt", "transfer", "eval", "episodes", "analyze"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lava",
        description="Teacher-student transfer learning pipeline")
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--resume", default=None, help="checkpoint to resume from")
        if stage in _NEEDS_CHECKPOINT:
            p.add_argument("--checkpoint", default=None,
                           help="input checkpoint from the previous stage")
    return parser


def run(args) -> int:
    cfg = parse_config(args.config, args.stage) if args.config \
        else default_config(args.stage)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    cfg.validate()

    checkpoint = getattr(args, "checkpoint", None)
    if args.stage in _NEEDS_CHECKPOINT and not checkpoint:
        raise ConfigurationError(f"stage {args.stage!r} requires --checkpoint")

    if args.stage == "synth":
        pipeline.stage_synth(cfg)
    elif args.stage == "pretrain":
        pipeline.stage_pretrain(cfg)
    elif args.stage == "adapt":
        pipeline.stage_adapt(cfg, checkpoint)
    elif args.stage == "transfer":
        pipeline.stage_transfer(cfg, checkpoint, resume_path=args.resume)
    elif args.stage == "eval":
        pipeline.stage_eval(cfg, checkpoint)
    elif args.stage == "episodes":
        pipeline.stage_episodes(cfg, checkpoint)
    elif args.stage == "analyze":
        pipeline.stage_analyze(cfg, checkpoint)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except (ConfigurationError, CheckpointError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
