"""
``design``: preprocess a scene, run one or all designers, evaluate them
through the shared metrics path and write a self-describing run directory.

Run directory layout::

    config.json                  effective run manifest
    report.json                  evaluation of every method, best MSE first
    comparison.csv, curves_*.csv, report.html
    <method>/coefficients/source_XX.txt   (biasnet, dsm)
    <method>/fir/source_XX.txt            (fd)
    <method>/history.json                 (biasnet, dsm)
"""

import argparse
import logging
import os
import time
from typing import Dict, List, Optional, Tuple

from ..db import output_root
from ..schemas import CommandReport, EvalReport, RunManifest
from ..services.acoustic_scene import Problem
from ..services.baselines import dsm_optimize, fd_design, fir_spectra, ops_per_sample, write_fir_dir
from ..services.biasnet import OptimizationResult, optimize
from ..services.filter_core import sos_response, write_bank_coefficients
from ..services.metrics import evaluate
from ..services.report import emit_report, write_json
from .common import guarded, load_model, problem_from_manifest, read_json, register

logger = logging.getLogger(__name__)

METHODS = ("biasnet", "dsm", "fd")


def _int_list(text: str):
    text = text.strip()
    return [int(v) for v in text.split(",") if v.strip()] if text else []


def add_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("design", help="design equalizers for a scene")
    parser.add_argument("--config", help="run manifest (JSON); flags override its values")
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--scene", help="measured scene manifest (JSON)")
    source.add_argument("--synth", help="synthetic scene spec (JSON)")
    parser.add_argument("--method", choices=METHODS + ("all",))
    parser.add_argument("--out", help="run directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--n-fft", type=int)
    parser.add_argument("--sources", type=_int_list, help="comma-separated source subset")
    parser.add_argument("--mics", type=_int_list, help="comma-separated mic subset")
    parser.add_argument("--tilt", type=float, help="target tilt in dB per octave")
    parser.add_argument("--gamma2-override", "--gamma2", dest="gamma2", type=float)
    parser.add_argument("--sigma-db-factor", type=float, choices=(10.0, 20.0))
    parser.add_argument("--record-timing", action="store_true", default=None)
    # biasnet
    parser.add_argument("--layers", type=_int_list, help="hidden layer sizes, e.g. 1024,512,256,128")
    parser.add_argument("--iters", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--patience", type=int)
    parser.add_argument("--log-every", type=int)
    parser.add_argument("--allow-bias-only", action="store_true", default=None)
    # baselines
    parser.add_argument("--dsm-gamma", type=float)
    parser.add_argument("--dsm-iters", type=int)
    parser.add_argument("--fir-len", type=int)
    parser.add_argument("--beta", type=float)
    parser.set_defaults(func=run)
    return parser


def manifest_from_args(args) -> RunManifest:
    synthetic = None
    if args.synth:
        synthetic = read_json(args.synth)
    manifest = load_model(RunManifest, args.config, {
        "scene_manifest": os.path.abspath(args.scene) if args.scene else None,
        "synthetic": synthetic,
        "method": args.method,
        "out_dir": args.out,
        "seed": args.seed,
        "n_fft": args.n_fft,
        "sources": args.sources,
        "mics": args.mics,
        "target_tilt_db_per_octave": args.tilt,
        "gamma2": args.gamma2,
        "sigma_db_factor": args.sigma_db_factor,
        "record_timing": args.record_timing,
        "biasnet": {
            "layers": args.layers,
            "iterations": args.iters,
            "lr": args.lr,
            "patience": args.patience,
            "log_every": args.log_every,
            "allow_bias_only": args.allow_bias_only,
        },
        "dsm": {"gamma": args.dsm_gamma, "iterations": args.dsm_iters},
        "fd": {"fir_len": args.fir_len, "beta": args.beta},
    })
    if args.scene and args.config:
        manifest = manifest.model_copy(update={"synthetic": None})
    if args.synth and args.config:
        manifest = manifest.model_copy(update={"scene_manifest": None})
    return with_seed(manifest)


def with_seed(manifest: RunManifest) -> RunManifest:
    """Route the manifest seed into every seeded designer."""
    return manifest.model_copy(update={
        "biasnet": manifest.biasnet.model_copy(update={"seed": manifest.seed}),
        "dsm": manifest.dsm.model_copy(update={"seed": manifest.seed}),
    })


def default_run_dir(manifest: RunManifest, label: str) -> str:
    return os.path.join(output_root(), f"{label}-{manifest.method}-seed{manifest.seed}")


def _write_history(path: str, result: OptimizationResult) -> None:
    write_json(path, {
        "method": result.method,
        "best_iteration": result.best_iteration,
        "iterations": result.iterations,
        "history": [h.model_dump() for h in result.history],
        "losses": [float(v) for v in result.losses],
    })


def design_method(problem: Problem, manifest: RunManifest, method: str, run_dir: str) -> Tuple[EvalReport, float]:
    """Run one designer, export its filters and evaluate it."""
    method_dir = os.path.join(run_dir, method)
    os.makedirs(method_dir, exist_ok=True)
    fs = problem.grid.fs
    start = time.perf_counter()
    if method == "fd":
        fir = fd_design(problem, manifest.fd.fir_len, manifest.fd.beta, manifest.fd)
        wall = time.perf_counter() - start
        write_fir_dir(os.path.join(method_dir, "fir"), fir)
        spectra = fir_spectra(fir, problem.grid)
        ops, iterations = ops_per_sample(fir), 0
    else:
        if method == "biasnet":
            result = optimize(problem, manifest.biasnet)
        else:
            result = dsm_optimize(problem, manifest.dsm)
        wall = time.perf_counter() - start
        write_bank_coefficients(os.path.join(method_dir, "coefficients"), result.bank, fs)
        _write_history(os.path.join(method_dir, "history.json"), result)
        b, a = result.bank.coefficients(fs)
        spectra = sos_response(b, a, result.bank.vs_db, problem.grid)
        ops, iterations = ops_per_sample(result.bank), result.iterations
    report = evaluate(
        problem,
        spectra,
        method,
        ops,
        iterations=iterations,
        seed=manifest.seed if method != "fd" else None,
        wall_s=wall if manifest.record_timing else None,
        sigma_db_factor=manifest.sigma_db_factor,
    )
    logger.info("%s: MSE %.4e (no EQ %.4e), sigma %.3f, %.1f s",
                method, report.mse_avg, report.mse_unequalized_avg, report.sigma_avg, wall)
    return report, wall


def run_design(manifest: RunManifest, run_dir: Optional[str] = None) -> Tuple[str, List[EvalReport], Dict[str, float]]:
    problem = problem_from_manifest(manifest)
    run_dir = run_dir or manifest.out_dir or default_run_dir(manifest, problem.scene.label)
    os.makedirs(run_dir, exist_ok=True)
    write_json(os.path.join(run_dir, "config.json"), manifest.model_dump(mode="json", by_alias=True, exclude={"out_dir"}))
    methods = METHODS if manifest.method == "all" else (manifest.method,)
    reports, walls = [], {}
    for method in methods:
        report, wall = design_method(problem, manifest, method, run_dir)
        reports.append(report)
        walls[method] = wall
    emit_report(run_dir, reports)
    return run_dir, reports, walls


@guarded("Design failed")
def run(args) -> CommandReport:
    manifest = manifest_from_args(args)
    try:
        run_dir, reports, walls = run_design(manifest)
    except OSError as exc:
        logger.error("Cannot write run directory: %s", exc)
        return CommandReport(success=False, message="Design failed", errors=[str(exc)])

    for r in reports:
        register(
            args, "design", run_dir,
            detail={"method": r.method, "config": os.path.join(run_dir, "config.json")},
            method=r.method, scene=r.scene, seed=manifest.seed,
            mse_avg=r.mse_avg, sigma_avg=r.sigma_avg, wall_s=walls[r.method],
        )
    best = min(reports, key=lambda r: r.mse_avg)
    return CommandReport(
        success=True,
        message=f"Designed {len(reports)} method(s); best {best.method} MSE {best.mse_avg:.3e}",
        outputs={
            "run_dir": run_dir,
            "methods": {r.method: {"mse_avg": r.mse_avg, "sigma_avg": r.sigma_avg} for r in reports},
            "mse_unequalized_avg": best.mse_unequalized_avg,
        },
    )
