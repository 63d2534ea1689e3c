# main.py
import argparse
import logging
import sys
from typing import List, Optional

# Configuration load karna
from app.core.config import settings
# Commands import karna
from app.commands import compare, presets, run
from app import __version__


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shmc",
        description="Splitting HMC and random-batch samplers: run experiments, compare runs, inspect presets.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="override SHMC_LOG_LEVEL")
    subparsers = parser.add_subparsers(dest="command", required=True)

    # Commands ko register karna
    run.register(subparsers)
    compare.register(subparsers)
    presets.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=(args.log_level or settings.SHMC_LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
