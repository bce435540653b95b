"""
``synth``: write a synthetic scene (one WAV per path plus a manifest).
"""

import argparse
import logging
import os

from ..db import output_root
from ..schemas import CommandReport, SynthSpec
from ..services.acoustic_scene import synth_scene, write_scene
from ..services.report import write_json
from .common import guarded, load_model, register

logger = logging.getLogger(__name__)


def add_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("synth", help="generate a synthetic scene")
    parser.add_argument("spec", nargs="?", help="synthetic scene spec (JSON)")
    parser.add_argument("--out", help="output directory (default: <output root>/<label>-seed<seed>)")
    parser.add_argument("-S", "--sources", dest="S", type=int)
    parser.add_argument("-M", "--mics", dest="M", type=int)
    parser.add_argument("--fs", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--coloration-db", type=float)
    parser.add_argument("--decay-ms", type=float)
    parser.add_argument("--length", type=int)
    parser.add_argument("--label")
    parser.set_defaults(func=run)
    return parser


@guarded("Scene synthesis failed")
def run(args) -> CommandReport:
    spec = load_model(SynthSpec, args.spec, {
        "S": args.S,
        "M": args.M,
        "fs": args.fs,
        "seed": args.seed,
        "coloration_db": args.coloration_db,
        "decay_ms": args.decay_ms,
        "length": args.length,
        "label": args.label,
    })
    out = args.out or os.path.join(output_root(), f"{spec.label}-seed{spec.seed}")
    scene = synth_scene(spec)
    try:
        manifest = write_scene(out, scene)
        write_json(os.path.join(out, "spec.json"), spec.model_dump(by_alias=True))
    except OSError as exc:
        logger.error("Cannot write scene to %s: %s", out, exc)
        return CommandReport(success=False, message="Scene synthesis failed", errors=[str(exc)])

    register(args, "synth", out, scene=spec.label, seed=spec.seed)
    return CommandReport(
        success=True,
        message=f"Wrote {scene.n_sources * scene.n_mics} impulse responses to {out}",
        outputs={"manifest": manifest, "scene_dir": out, **scene.describe()},
    )
