"""Command line entry point: one subcommand per pipeline stage."""

import argparse
import json
import logging
import sys
import time
from typing import List, Optional

from . import checkpoint as ckpt_io
from .config import LOG_LEVEL, load_config
from .errors import KGFMError, failure_payload
from .pipeline import STAGES, Run, run_experiment, run_stage

log = logging.getLogger("kgfm.cli")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgfm", description="Knowledge-guided flux modeling experiments")
    parser.add_argument("--log-level", default=LOG_LEVEL, help="logging level (default: $LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", default=None, help="YAML config (default: $KGFM_CONFIG or the bundled one)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--output-dir", default=None, help="run directory (default: $KGFM_OUTPUT_DIR or config)")
        return p

    for stage in STAGES:
        common(sub.add_parser(stage, help=f"run the {stage} stage"))
    run_all = common(sub.add_parser("run-all", help="run every stage, resuming completed ones"))
    run_all.add_argument("--no-resume", action="store_true", help="rerun stages that already completed")
    inspect = common(sub.add_parser("inspect-checkpoint", help="print a checkpoint summary as JSON"))
    inspect.add_argument("path")
    common(sub.add_parser("serve", help="start the MCP server on stdio"))
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point for the kgfm command"""
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=args.log_level.upper())
    t0 = time.monotonic()
    try:
        if args.command == "inspect-checkpoint":
            print(json.dumps(ckpt_io.summary(ckpt_io.load(args.path)), indent=2))
            return 0
        if args.command == "serve":
            from .server import serve

            serve()
            return 0

        cfg = load_config(args.config, seed=args.seed, output_dir=args.output_dir)
        if args.command == "run-all":
            result = run_experiment(cfg, resume=not args.no_resume)
            print(result["metrics"].pooled().to_string(index=False))
        else:
            run = Run(cfg)
            run.prepare(resume=True)
            run_stage(run, args.command)
        log.info("%s finished in %.0fms", args.command, (time.monotonic() - t0) * 1000)
        return 0
    except KGFMError as e:
        print(json.dumps(failure_payload(e, command=args.command), indent=2), file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        log.warning("Interrupted")
        return 130
