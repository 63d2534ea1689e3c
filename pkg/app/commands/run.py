# app/commands/run.py
"""
`run` command: execute an experiment from a config file or a built-in preset.

Exit codes: 0 on success, 2 for an invalid config, 3 for a numeric failure.
"""

import argparse
import logging

from app.core.errors import EXIT_OK, ShmcError
from app.services.experiments import load_config, run_experiment
from app.services.presets import get_preset

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("run", help="run an experiment config")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("config", nargs="?", help="path to a JSON experiment config")
    source.add_argument("--preset", help="run a built-in preset instead of a config file")
    parser.add_argument("--output-root", default=None, help="override SHMC_OUTPUT_ROOT for this run")
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    try:
        config = get_preset(args.preset) if args.preset else load_config(args.config)
        manifest = run_experiment(config, output_root=args.output_root)
    except ShmcError as exc:
        logger.error(exc.detail)
        return exc.exit_code

    for chain in manifest.chains:
        error = f"{chain.relative_error:.4f}" if chain.relative_error is not None else "-"
        print(f"{chain.label}: acceptance={chain.acceptance_rate:.4f} T_E={chain.evolution_time:.4g} "
              f"relative_error={error} cpu={chain.cpu_time_s:.2f}s grad={chain.grad_time_s:.2f}s")
    for key, value in manifest.details.items():
        print(f"{key}: {value}")
    return EXIT_OK
