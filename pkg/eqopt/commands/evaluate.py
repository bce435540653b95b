"""
``eval``: recompute metrics from exported coefficient or FIR files only.

Given a run directory, every method found in it is re-evaluated against
the scene described by its ``config.json`` and compared with the stored
``report.json``; any difference above 1e-12 fails the command.
"""

import argparse
import logging
import os
from typing import List, Optional

import numpy as np

from ..errors import CoefficientFileError
from ..schemas import CommandReport, EvalReport, RunManifest
from ..services.acoustic_scene import Problem, band_average, equalized_response, noise_band_response
from ..services.baselines import fir_spectra, ops_per_sample, read_fir_dir, sos_ops
from ..services.filter_core import read_coefficient_dir, sos_response
from ..services.metrics import evaluate
from ..services.report import load_reports, write_json
from .common import guarded, problem_from_manifest, read_json, register

logger = logging.getLogger(__name__)

ROUND_TRIP_TOLERANCE = 1e-12


def add_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("eval", help="evaluate exported equalizers")
    parser.add_argument("run_dir", nargs="?", help="run directory written by 'design'")
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--scene", help="measured scene manifest (JSON)")
    source.add_argument("--synth", help="synthetic scene spec (JSON)")
    filters = parser.add_mutually_exclusive_group()
    filters.add_argument("--coefficients", help="directory of source_XX.txt biquad files")
    filters.add_argument("--fir", help="directory of source_XX.txt FIR tap files")
    parser.add_argument("--method", default="eval", help="name used in the report")
    parser.add_argument("--n-fft", type=int)
    parser.add_argument("--tilt", type=float, default=0.0)
    parser.add_argument("--noise-check", action="store_true", help="add the white-noise validation deviation")
    parser.add_argument("--noise-seconds", type=float, default=4.0)
    parser.add_argument("--out", help="write the evaluation JSON here")
    parser.set_defaults(func=run)
    return parser


def noise_check_deviation(problem: Problem, b: np.ndarray, a: np.ndarray, vs_db: np.ndarray,
                          seconds: float = 4.0, seed: int = 0) -> float:
    """Largest dB gap between impulse-derived and noise-measured band levels."""
    spectra = sos_response(b, a, vs_db, problem.grid)
    mic, _ = equalized_response(problem, spectra)
    impulse = band_average(np.abs(mic), problem.bands)
    measured = noise_band_response(problem, b, a, vs_db, seconds=seconds, seed=seed)
    return float(np.max(np.abs(20.0 * np.log10(measured / impulse))))


def evaluate_directory(problem: Problem, method: str, coefficients: Optional[str] = None,
                       fir: Optional[str] = None, iterations: int = 0, seed: Optional[int] = None,
                       sigma_db_factor: float = 10.0, noise_check: bool = False,
                       noise_seconds: float = 4.0) -> EvalReport:
    S = problem.n_sources
    if fir is not None:
        firs = read_fir_dir(fir, S)
        spectra = fir_spectra(firs, problem.grid)
        ops = ops_per_sample(firs)
    else:
        vs_db, b, a = read_coefficient_dir(coefficients, S, problem.n_bands)
        spectra = sos_response(b, a, vs_db, problem.grid)
        ops = S * sos_ops(b.shape[1])
    report = evaluate(problem, spectra, method, ops, iterations=iterations, seed=seed,
                      sigma_db_factor=sigma_db_factor)
    if noise_check:
        if fir is not None:
            logger.warning("Noise check covers biquad equalizers only; skipped for %s", method)
        else:
            report.noise_check_max_dev_db = noise_check_deviation(problem, b, a, vs_db, noise_seconds)
    return report


def _round_trip_gap(stored: EvalReport, fresh: EvalReport) -> float:
    a = np.array(stored.mse_per_mic + stored.sigma_per_mic + [stored.mse_avg, stored.sigma_avg])
    b = np.array(fresh.mse_per_mic + fresh.sigma_per_mic + [fresh.mse_avg, fresh.sigma_avg])
    return float(np.max(np.abs(a - b)))


def evaluate_run(run_dir: str, noise_check: bool = False, noise_seconds: float = 4.0):
    manifest = RunManifest.model_validate(read_json(os.path.join(run_dir, "config.json")))
    problem = problem_from_manifest(manifest, run_dir)
    try:
        stored = {r.method: r for r in load_reports(run_dir)}
    except (OSError, ValueError) as exc:
        raise CoefficientFileError(f"cannot read the report of {run_dir}: {exc}") from exc
    reports: List[EvalReport] = []
    gaps = {}
    for method in sorted(stored):
        method_dir = os.path.join(run_dir, method)
        coeffs = os.path.join(method_dir, "coefficients")
        fir = os.path.join(method_dir, "fir")
        if not (os.path.isdir(coeffs) or os.path.isdir(fir)):
            raise CoefficientFileError(f"{method_dir} holds neither coefficients nor FIR taps")
        report = evaluate_directory(
            problem, method,
            coefficients=coeffs if os.path.isdir(coeffs) else None,
            fir=fir if os.path.isdir(fir) else None,
            iterations=stored[method].iterations,
            seed=stored[method].seed,
            sigma_db_factor=manifest.sigma_db_factor,
            noise_check=noise_check,
            noise_seconds=noise_seconds,
        )
        gaps[method] = _round_trip_gap(stored[method], report)
        reports.append(report)
    return reports, gaps


@guarded("Evaluation failed")
def run(args) -> CommandReport:
    warnings: List[str] = []
    errors: List[str] = []
    if args.run_dir:
        reports, gaps = evaluate_run(args.run_dir, args.noise_check, args.noise_seconds)
        for method, gap in gaps.items():
            if gap > ROUND_TRIP_TOLERANCE:
                errors.append(f"{method}: metrics differ from report.json by {gap:.3e}")
        target = args.run_dir
    else:
        if not (args.coefficients or args.fir):
            return CommandReport(success=False, message="Evaluation failed",
                                 errors=["give a run directory, or --coefficients/--fir with a scene"])
        manifest = RunManifest(
            scene_manifest=os.path.abspath(args.scene) if args.scene else None,
            synthetic=read_json(args.synth) if args.synth else None,
            n_fft=args.n_fft,
            target_tilt_db_per_octave=args.tilt,
        )
        problem = problem_from_manifest(manifest)
        reports = [evaluate_directory(problem, args.method, args.coefficients, args.fir,
                                      noise_check=args.noise_check, noise_seconds=args.noise_seconds)]
        gaps = {}
        target = args.coefficients or args.fir

    payload = {"methods": [r.model_dump() for r in reports], "round_trip_gap": gaps}
    if args.out:
        write_json(args.out, payload)
    for r in reports:
        if r.noise_check_max_dev_db is not None and r.noise_check_max_dev_db > 2.0:
            warnings.append(f"{r.method}: noise measurement deviates by {r.noise_check_max_dev_db:.2f} dB")
    register(args, "eval", target, status="ok" if not errors else "mismatch",
             detail={"round_trip_gap": gaps},
             method=reports[0].method if len(reports) == 1 else None,
             scene=reports[0].scene if reports else None,
             mse_avg=reports[0].mse_avg if len(reports) == 1 else None)
    return CommandReport(
        success=not errors,
        message="Evaluation reproduced the stored metrics" if args.run_dir and not errors
        else ("Evaluation mismatch" if errors else "Evaluation complete"),
        outputs={
            "methods": {r.method: {"mse_avg": r.mse_avg, "sigma_avg": r.sigma_avg,
                                   "noise_check_max_dev_db": r.noise_check_max_dev_db} for r in reports},
            "round_trip_gap": gaps,
        },
        warnings=warnings,
        errors=errors,
    )
