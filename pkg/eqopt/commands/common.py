"""
Helpers shared by the CLI commands: JSON config loading with flag
overrides, scene construction from a run manifest, and registry writes.
"""

from __future__ import annotations

import json
import logging
import os
import sqlite3
from typing import Any, Dict, Optional, Type, TypeVar

from pydantic import BaseModel, ValidationError

from ..db import get_connection, init_db
from ..errors import EqoptError, SceneError
from ..schemas import CommandReport, RunManifest
from ..services.acoustic_scene import Problem, Scene, build_problem, load_scene, synth_scene
from ..services.audit import record_audit, record_run

logger = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)


def read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise SceneError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise SceneError(f"{path} is not valid JSON: {exc}") from exc


def merge_overrides(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Nested dict update that ignores ``None`` override values."""
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict):
            merged[key] = merge_overrides(merged.get(key) or {}, value)
        else:
            merged[key] = value
    return merged


def load_model(model: Type[M], path: Optional[str], overrides: Dict[str, Any]) -> M:
    base = read_json(path) if path else {}
    return model.model_validate(merge_overrides(base, overrides))


def scene_from_manifest(manifest: RunManifest, base_dir: Optional[str] = None) -> Scene:
    if manifest.synthetic is not None:
        scene = synth_scene(manifest.synthetic)
    else:
        path = manifest.scene_manifest
        if base_dir and not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        scene = load_scene(path)
    if manifest.sources is not None or manifest.mics is not None:
        scene = scene.subset(manifest.sources, manifest.mics)
    return scene


def problem_from_manifest(manifest: RunManifest, base_dir: Optional[str] = None) -> Problem:
    scene = scene_from_manifest(manifest, base_dir)
    return build_problem(
        scene,
        n_fft=manifest.n_fft,
        ranges=manifest.ranges,
        gamma2=manifest.gamma2,
        tilt_db_per_octave=manifest.target_tilt_db_per_octave,
    )


def failure(message: str, exc: Exception) -> CommandReport:
    logger.error("%s: %s", message, exc)
    return CommandReport(success=False, message=message, errors=[str(exc)])


def guarded(message: str):
    """Decorator turning domain and validation errors into a failed report."""
    def wrap(func):
        def inner(args) -> CommandReport:
            try:
                return func(args)
            except (EqoptError, ValidationError) as exc:
                return failure(message, exc)
        inner.__name__ = func.__name__
        inner.__doc__ = func.__doc__
        return inner
    return wrap


def register(args, command: str, run_dir: str, status: str = "ok", detail: Optional[Dict[str, Any]] = None,
             **fields) -> Optional[int]:
    """Record the run and its audit row; registry problems only warn."""
    if getattr(args, "no_registry", False):
        return None
    try:
        path = init_db()
        conn = get_connection(path)
        try:
            run_id = record_run(conn, command, run_dir, status, **fields)
            record_audit(conn, command, run_dir, "create", detail, run_id=run_id)
        finally:
            conn.close()
        return run_id
    except (sqlite3.Error, OSError) as exc:
        logger.warning("Run registry unavailable: %s", exc)
        return None
