"""
``export``: re-emit the report files of a run directory, optionally into
another directory together with its filter files, and write a comparison
workbook on request.
"""

import argparse
import logging
import os
import shutil

from ..errors import CoefficientFileError
from ..schemas import CommandReport
from ..services.report import emit_report, export_workbook, load_reports
from .common import guarded, register

logger = logging.getLogger(__name__)


def add_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("export", help="re-emit run artifacts")
    parser.add_argument("run_dir")
    parser.add_argument("--out", help="target directory (default: the run directory itself)")
    parser.add_argument("--xlsx", help="also write a comparison workbook to this path")
    parser.set_defaults(func=run)
    return parser


@guarded("Export failed")
def run(args) -> CommandReport:
    try:
        reports = load_reports(args.run_dir)
    except (OSError, ValueError) as exc:
        raise CoefficientFileError(f"cannot read the report of {args.run_dir}: {exc}") from exc
    out = args.out or args.run_dir
    try:
        paths = emit_report(out, reports)
        if os.path.abspath(out) != os.path.abspath(args.run_dir):
            shutil.copy2(os.path.join(args.run_dir, "config.json"), os.path.join(out, "config.json"))
            for r in reports:
                src = os.path.join(args.run_dir, r.method)
                if os.path.isdir(src):
                    shutil.copytree(src, os.path.join(out, r.method), dirs_exist_ok=True)
        if args.xlsx:
            paths["xlsx"] = export_workbook(args.xlsx, reports)
    except OSError as exc:
        logger.error("Cannot write export to %s: %s", out, exc)
        return CommandReport(success=False, message="Export failed", errors=[str(exc)])

    register(args, "export", out, detail={"source": args.run_dir, "xlsx": args.xlsx})
    return CommandReport(success=True, message=f"Exported {len(reports)} method(s) to {out}", outputs=paths)
