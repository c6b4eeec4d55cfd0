"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 backend error, 4 data error.
"""

from __future__ import annotations

import argparse
import sys

from . import harness
from .config import load_config, parse_set_overrides
from .errors import EvdError

COMMANDS = {
    "ingest": harness.cmd_ingest,
    "index": harness.cmd_index,
    "run": harness.cmd_run,
    "judge": harness.cmd_judge,
    "report": harness.cmd_report,
    "dump-prompts": harness.cmd_dump_prompts,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evdlab",
        description=(
            "Budgeted multi-query retrieval experiment harness: ingest a corpus, "
            "run methods over QA datasets, judge retrieved contexts, and report."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        cmd = sub.add_parser(name, help=(fn.__doc__ or "").strip().splitlines()[0]
                             if fn.__doc__ else None)
        cmd.add_argument("--config", required=True, help="path to the JSON config file")
        cmd.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config scalar by dotted path (repeatable)",
        )
        cmd.add_argument("--quiet", action="store_true", help="suppress progress output")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = parse_set_overrides(args.set)
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command](cfg, quiet=args.quiet)
    except EvdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
