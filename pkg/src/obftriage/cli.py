"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 2 validation error, 3 missing upstream stage, 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .errors import DivergenceError, IoError, StageDependencyError, ValidationError
from .model import PRESETS

EXIT_OK, EXIT_ERROR, EXIT_VALIDATION, EXIT_DEPENDENCY = 0, 1, 2, 3

log = logging.getLogger("obftriage")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration; relative paths resolve against its directory")
    common.add_argument("--chain", action="append", help="restrict to this chain (repeatable); ingest: chain id of --input")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--preset", choices=sorted(PRESETS), help="model preset")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="obftriage", description="Bytecode obfuscation scoring and triage.")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in pipeline.STAGES:
        p = sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
        if stage == "ingest":
            p.add_argument("--input", help="line-delimited corpus file (otherwise all 'corpora' in the config)")
    sub.add_parser("pipeline", parents=[common], help="run every stage from ingest to report")
    synth = sub.add_parser("synth", help="write a small synthetic multi-chain fixture with a config")
    synth.add_argument("--out", default="fixture")
    synth.add_argument("--seed", type=int, default=7)
    synth.add_argument("--per-chain", type=int, default=240)
    synth.add_argument("-v", "--verbose", action="store_true")
    return parser


def _context(args) -> pipeline.RunContext:
    overrides = {"seed": args.seed, "preset": args.preset}
    if args.command != "ingest" and args.chain:
        overrides["chains"] = args.chain
    if args.config:
        return pipeline.RunContext.from_file(args.config, args.out, **overrides)
    cfg = {k: v for k, v in overrides.items() if v is not None}
    return pipeline.RunContext(Path(args.out), cfg)


def _dispatch(args):
    if args.command == "synth":
        from .synthetic import make_fixture

        make_fixture(Path(args.out), seed=args.seed, n_per_chain=args.per_chain)
        print(Path(args.out) / "config.json")
        return
    ctx = _context(args)
    if args.command == "pipeline":
        pipeline.run_all(ctx)
    elif args.command == "ingest":
        if args.input and (not args.chain or len(args.chain) != 1):
            raise ValidationError("ingest --input needs exactly one --chain")
        for st in pipeline.stage_ingest(ctx, args.input, args.chain[0] if args.input else None):
            print(f"{st.chain}: {st.rows} rows, {st.malformed} malformed, {st.stored} stored")
    else:
        pipeline.run(args.command, ctx)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except StageDependencyError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except ValidationError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (IoError, DivergenceError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
