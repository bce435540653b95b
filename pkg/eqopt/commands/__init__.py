"""CLI subcommands. Each module exposes ``add_parser(subparsers)``."""

from . import design, evaluate, export, gradcheck, synth  # noqa: F401

COMMANDS = (synth, design, evaluate, gradcheck, export)
