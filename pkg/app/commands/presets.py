# app/commands/presets.py
import argparse
import json
import logging

from app.core.errors import EXIT_OK, ShmcError
from app.services.presets import get_preset, list_presets

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("presets", help="list or show built-in presets")
    actions = parser.add_subparsers(dest="action", required=True)
    actions.add_parser("list", help="list preset ids")
    show = actions.add_parser("show", help="print a preset as a JSON config")
    show.add_argument("preset_id")
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    if args.action == "list":
        for preset_id, description in list_presets():
            print(f"{preset_id:15s} {description}")
        return EXIT_OK
    try:
        config = get_preset(args.preset_id)
    except ShmcError as exc:
        logger.error(exc.detail)
        return exc.exit_code
    print(json.dumps(config.model_dump(mode="json", exclude_none=True), indent=2))
    return EXIT_OK
