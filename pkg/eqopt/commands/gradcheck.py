"""
``gradcheck``: compare the analytic gradient with central differences on a
random synthetic scene and report the relative error per parameter class.
"""

import argparse
import logging
from typing import Optional

import numpy as np

from ..schemas import CommandReport, GradcheckClassReport, GradcheckReport, SynthSpec
from ..services.acoustic_scene import build_problem, synth_scene
from ..services.loss_grad import PARAMETER_CLASSES, gradient_check
from ..services.report import write_json
from .common import guarded, load_model

logger = logging.getLogger(__name__)

SWEEP_STEPS = (1e-4, 1e-5, 1e-6)


def add_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("gradcheck", help="verify the analytic gradient")
    parser.add_argument("spec", nargs="?", help="synthetic scene spec (JSON)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("-S", "--sources", dest="S", type=int, default=2)
    parser.add_argument("-M", "--mics", dest="M", type=int, default=2)
    parser.add_argument("--f-low", type=float, default=500.0)
    parser.add_argument("--f-high", type=float, default=8000.0)
    parser.add_argument("--length", type=int, default=1024)
    parser.add_argument("--n-fft", type=int, default=4096)
    parser.add_argument("--step", type=float, default=1e-6)
    parser.add_argument("--tol", type=float, default=1e-5)
    parser.add_argument("--step-sweep", action="store_true",
                        help=f"also report the worst error at steps {SWEEP_STEPS}")
    parser.add_argument("--out", help="write the JSON report here")
    parser.add_argument("--corrupt", choices=PARAMETER_CLASSES, help=argparse.SUPPRESS)
    parser.set_defaults(func=run)
    return parser


def check_scene(spec: SynthSpec, n_fft: Optional[int], seed: int, step: float, tol: float,
                corrupt: Optional[str] = None, sweep: bool = False) -> GradcheckReport:
    problem = build_problem(synth_scene(spec), n_fft=n_fft)
    rng = np.random.default_rng(seed)
    p = rng.uniform(-0.9, 0.9, problem.n_params)
    classes = gradient_check(problem, p, step=step, tolerance=tol, corrupt=corrupt)

    step_sweep = {}
    if sweep:
        for h in SWEEP_STEPS:
            swept = gradient_check(problem, p, step=h, tolerance=tol, corrupt=corrupt)
            step_sweep[f"{h:g}"] = max(c["max_rel_error"] for c in swept.values())

    failed = [name for name, c in classes.items() if not c["passed"]]
    return GradcheckReport(
        passed=not failed,
        seed=seed,
        step=step,
        tolerance=tol,
        scene={**problem.scene.describe(), "n_bands": problem.n_bands, "n_fft": problem.grid.n_fft,
               "spec_seed": spec.seed},
        classes={name: GradcheckClassReport(**c) for name, c in classes.items()},
        failed_classes=failed,
        step_sweep=step_sweep,
    )


@guarded("Gradient check failed to run")
def run(args) -> CommandReport:
    if args.spec:
        spec = load_model(SynthSpec, args.spec, {})
    else:
        spec = SynthSpec(S=args.S, M=args.M, f_low=args.f_low, f_high=args.f_high,
                         length=args.length, seed=args.seed, label="gradcheck")
    report = check_scene(spec, args.n_fft, args.seed, args.step, args.tol, args.corrupt, args.step_sweep)
    if args.out:
        write_json(args.out, report.model_dump())
    for name, c in report.classes.items():
        logger.info("%-2s max rel %.3e  mean rel %.3e", name, c.max_rel_error, c.mean_rel_error)
    if report.passed:
        return CommandReport(success=True, message="Analytic gradient matches finite differences",
                             outputs=report.model_dump())
    return CommandReport(
        success=False,
        message=f"Gradient mismatch in {', '.join(report.failed_classes)}",
        outputs=report.model_dump(),
        errors=[f"{name}: max relative error {report.classes[name].max_rel_error:.3e} exceeds {args.tol:g}"
                for name in report.failed_classes],
    )
