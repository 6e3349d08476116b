"""``magegraph`` command line entry point."""

from __future__ import annotations

import argparse
import logging
import sys

from magegraph.config import load_config
from magegraph.errors import MageGraphError, NumericError
from magegraph.features import TableValidationError
from magegraph.pipeline import COMMANDS, PIPELINE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="magegraph", description="GraphMAGE trap-positivity forecasting pipeline")
    parser.add_argument("command", choices=sorted(COMMANDS) + ["all"], help="pipeline step ('all' runs every step)")
    parser.add_argument("--config", required=True, help="INI run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        steps = PIPELINE if args.command == "all" else (args.command,)
        for step in steps:
            COMMANDS[step](cfg)
    except TableValidationError as exc:
        for line in exc.problems:
            print(f"magegraph: {line}", file=sys.stderr)
        return exc.exit_code
    except (MageGraphError, FloatingPointError) as exc:
        print(f"magegraph: {exc}", file=sys.stderr)
        return exc.exit_code if isinstance(exc, MageGraphError) else NumericError.exit_code
    except OSError as exc:
        print(f"magegraph: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
