"""Convenience imports for services."""

from .filter_core import (
    FrequencyGrid,
    EqualizerBank,
    ParamRanges,
    design_peaking_section,
    denormalize,
    normalize,
)  # noqa: F401
from .acoustic_scene import build_problem, load_scene, preprocess, synth_scene  # noqa: F401
from .loss_grad import compute_loss, loss_and_gradient, gradient_check  # noqa: F401
from .biasnet import optimize  # noqa: F401
from .baselines import dsm_optimize, fd_design, ops_per_sample  # noqa: F401
from .metrics import evaluate, mse, sigma  # noqa: F401
from .report import emit_report  # noqa: F401
from .audit import record_audit, record_run  # noqa: F401
