"""
Run reports: JSON, CSV curves, an HTML summary and an optional workbook.

Everything written by :func:`emit_report` depends only on the evaluation
reports passed in, so emitting twice from the same reports produces
byte-identical files. Workbooks carry zip timestamps and are written only
on request by :func:`export_workbook`.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Sequence

from jinja2 import Environment, FileSystemLoader, select_autoescape
from openpyxl import Workbook

from ..schemas import EvalReport

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"
REPORT_JSON = "report.json"
COMPARISON_CSV = "comparison.csv"
REPORT_HTML = "report.html"

COMPARISON_COLUMNS = [
    "method",
    "mse_avg",
    "sigma_avg",
    "ops_per_sample",
    "iterations",
    "energy_ratio_max_deviation",
    "mse_unequalized_avg",
    "sigma_unequalized_avg",
]

_env = Environment(loader=FileSystemLoader(str(TEMPLATE_DIR)), autoescape=select_autoescape(["html"]))


def write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def sort_reports(reports: Sequence[EvalReport]) -> List[EvalReport]:
    return sorted(reports, key=lambda r: (r.mse_avg, r.method))


def curves_file_name(method: str) -> str:
    return f"curves_{method}.csv"


def write_curves_csv(path: str, centers: Sequence[float], rows_db: Sequence[Sequence[float]]) -> None:
    """band_center_hz, mag_db_mic_1 .. mag_db_mic_M; one row per band."""
    n_mics = len(rows_db[0]) if rows_db else 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["band_center_hz"] + [f"mag_db_mic_{m + 1}" for m in range(n_mics)])
        for fc, row in zip(centers, rows_db):
            writer.writerow([repr(float(fc))] + [repr(float(v)) for v in row])


def write_comparison_csv(path: str, reports: Sequence[EvalReport]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COMPARISON_COLUMNS)
        for r in reports:
            row = r.model_dump()
            writer.writerow([row[c] if isinstance(row[c], (str, int)) else repr(float(row[c])) for c in COMPARISON_COLUMNS])


def render_html(reports: Sequence[EvalReport]) -> str:
    template = _env.get_template("report.html")
    return template.render(reports=reports, scene=reports[0].scene if reports else "")


def emit_report(run_dir: str, reports: Sequence[EvalReport]) -> Dict[str, str]:
    """Write report.json, comparison.csv, per-method curves and report.html."""
    os.makedirs(run_dir, exist_ok=True)
    ordered = sort_reports(reports)
    paths: Dict[str, str] = {}

    paths["report"] = os.path.join(run_dir, REPORT_JSON)
    write_json(paths["report"], {
        "scene": ordered[0].scene if ordered else "",
        "methods": [r.model_dump() for r in ordered],
    })

    paths["comparison"] = os.path.join(run_dir, COMPARISON_CSV)
    write_comparison_csv(paths["comparison"], ordered)

    if ordered:
        first = ordered[0]
        paths["curves_unequalized"] = os.path.join(run_dir, curves_file_name("unequalized"))
        write_curves_csv(paths["curves_unequalized"], first.band_centers_hz, first.unequalized_db)
    for r in ordered:
        key = f"curves_{r.method}"
        paths[key] = os.path.join(run_dir, curves_file_name(r.method))
        write_curves_csv(paths[key], r.band_centers_hz, r.equalized_db)

    paths["html"] = os.path.join(run_dir, REPORT_HTML)
    with open(paths["html"], "w", encoding="utf-8") as fh:
        fh.write(render_html(ordered))
    logger.info("Report for %d method(s) written to %s", len(ordered), run_dir)
    return paths


def load_reports(run_dir: str) -> List[EvalReport]:
    with open(os.path.join(run_dir, REPORT_JSON), "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return [EvalReport.model_validate(item) for item in payload.get("methods", [])]


def export_workbook(path: str, reports: Sequence[EvalReport]) -> str:
    """Comparison table plus one curve sheet per method."""
    wb = Workbook()
    ws = wb.active
    ws.title = "comparison"
    ws.append(COMPARISON_COLUMNS)
    for r in sort_reports(reports):
        row = r.model_dump()
        ws.append([row[c] for c in COMPARISON_COLUMNS])

    if reports:
        first = reports[0]
        sheets = [("unequalized", first.unequalized_db)] + [(r.method, r.equalized_db) for r in reports]
        n_mics = len(first.mse_per_mic)
        for name, rows in sheets:
            sheet = wb.create_sheet(title=f"curves_{name}"[:31])
            sheet.append(["band_center_hz"] + [f"mag_db_mic_{m + 1}" for m in range(n_mics)])
            for fc, values in zip(first.band_centers_hz, rows):
                sheet.append([fc] + list(values))
    wb.save(path)
    logger.info("Workbook written to %s", path)
    return path
