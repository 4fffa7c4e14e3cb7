"""Command-line entry point.

    stepconf run --config cfg.yaml --output runs/a
    stepconf probe --config cfg.yaml --output runs/a --force
    stepconf ingest traces.jsonl --name agent-v1 --output runs/a

Exit codes: 0 success, 1 validation error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from stepconf import __version__
from stepconf.config import PipelineConfig, load_config
from stepconf.errors import (
    DimensionMismatch,
    InvalidConfig,
    MalformedRecord,
    MissingStage,
    StageFailure,
    StepConfError,
)
from stepconf.pipeline import STAGES, Pipeline, ingest

EXIT_OK, EXIT_INVALID, EXIT_STAGE = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML pipeline config (defaults apply when omitted)")
    common.add_argument("--output", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="master seed (overrides master_seed)")
    common.add_argument("--force", action="store_true", help="re-run stages even when cached")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="stepconf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    sub.add_parser("run", parents=[common], help="run every stage")
    p = sub.add_parser("ingest", parents=[common], help="validate and register a record file")
    p.add_argument("path")
    p.add_argument("--name", help="dataset name (default: file stem)")
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise InvalidConfig("--seed must be an unsigned 64-bit integer")
        cfg = replace(cfg, master_seed=args.seed)
    if args.output:
        cfg = replace(cfg, output_dir=args.output)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "ingest":
            summary = ingest(args.path, cfg.output_dir, args.name)
            print(json.dumps(summary, indent=1, sort_keys=True))
            return EXIT_OK
        pipe = Pipeline(cfg, force=args.force)
        if args.command == "run":
            pipe.run()
        else:
            pipe.run_stage(args.command)
        for name in STAGES:
            entry = pipe.manifest.stages.get(name)
            if entry is None:
                continue
            status = "cached" if entry.cached else "ran"
            print(f"{name:<10} {status:<7} {len(entry.artifacts)} artifact(s)")
        return EXIT_OK
    except (InvalidConfig, MalformedRecord, DimensionMismatch, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (StageFailure, MissingStage) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except StepConfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
