"""
Entry point for the equalizer design command line.

Builds the argument parser from the subcommand modules, configures
logging and maps each command's report to an exit code: 0 on success,
1 on a domain error, 2 on a usage error (raised by argparse).
"""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from .commands import COMMANDS

LOG_FORMAT = "%(asctime)s | %(levelname)-7s | %(name)s | %(message)s"


def create_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eqopt",
        description="Design parametric IIR equalizers for multi-source, multi-point acoustic scenes.",
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    parser.add_argument("--no-registry", action="store_true", help="do not record runs in the sqlite registry")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for module in COMMANDS:
        module.add_parser(subparsers)
    return parser


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    if verbose:
        level = logging.DEBUG
    elif quiet:
        level = logging.WARNING
    else:
        level = getattr(logging, os.getenv("EQOPT_LOG_LEVEL", "INFO").upper(), logging.INFO)
    logging.basicConfig(level=level, format=LOG_FORMAT)


def main(argv: Optional[List[str]] = None) -> int:
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    configure_logging(args.verbose, args.quiet)
    logger = logging.getLogger("eqopt")

    report = args.func(args)
    for warning in report.warnings:
        logger.warning(warning)
    if report.success:
        logger.info(report.message)
    else:
        logger.error(report.message)
    print(json.dumps(report.model_dump(), indent=2, sort_keys=True, default=str))
    return 0 if report.success else 1


if __name__ == "__main__":
    sys.exit(main())
