# app/commands/compare.py
import argparse
import logging

from app.core.errors import EXIT_OK, ShmcError
from app.services.artifact_storage import load_manifest
from app.services.comparison import compare_runs, format_report

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("compare", help="compare the error series of two runs")
    parser.add_argument("manifest_a", help="manifest.json (or run directory) of the first run")
    parser.add_argument("manifest_b", help="manifest.json (or run directory) of the second run")
    parser.add_argument("--label-a", default=None, help="chain label in the first run (default: first chain)")
    parser.add_argument("--label-b", default=None, help="chain label in the second run (default: first chain)")
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    try:
        report = compare_runs(load_manifest(args.manifest_a), load_manifest(args.manifest_b),
                              args.label_a, args.label_b)
    except ShmcError as exc:
        logger.error(exc.detail)
        return exc.exit_code
    print(format_report(report))
    return EXIT_OK
