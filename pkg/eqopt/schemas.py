"""
Pydantic schema definitions for configuration files and run artifacts.

Every JSON file read or written by the toolkit goes through one of these
models: scene manifests, synthetic scene specs, designer configurations,
run manifests, evaluation reports and the command report returned by each
CLI subcommand.
"""

from __future__ import annotations

from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class SynthSpec(BaseModel):
    """Parameters of a deterministic synthetic scene.

    The JSON keys ``S`` and ``M`` are accepted as aliases for the number of
    sources and microphones.
    """

    model_config = ConfigDict(populate_by_name=True)

    n_sources: int = Field(1, alias="S", ge=1)
    n_mics: int = Field(1, alias="M", ge=1)
    fs: float = Field(48000.0, gt=0)
    decay_ms: float = Field(40.0, ge=0)  # T60 of the noise tail, 0 disables it
    tail_db: float = -30.0  # tail start level relative to the direct impulse
    coloration_db: float = Field(7.5, ge=0)
    path_coloration_db: Optional[float] = Field(None, ge=0)
    seed: int = 0
    f_low: float = Field(100.0, gt=0)
    f_high: float = Field(14000.0, gt=0)
    max_delay: int = Field(256, ge=0)
    mic_spread: int = Field(3, ge=0)
    length: Optional[int] = Field(None, ge=1)
    label: str = "synthetic"

    @model_validator(mode="after")
    def _check_band(self) -> "SynthSpec":
        if not self.f_low < self.f_high < self.fs / 2:
            raise ValueError("need 0 < f_low < f_high < fs/2")
        return self


class RirEntry(BaseModel):
    source: int = Field(..., ge=0)
    mic: int = Field(..., ge=0)
    path: str


class SceneManifest(BaseModel):
    """Measured scene: one mono RIR file per (source, mic) pair."""

    fs: float = Field(..., gt=0)
    f_low: float = Field(100.0, gt=0)
    f_high: float = Field(14000.0, gt=0)
    reference_source: int = Field(0, ge=0)
    reference_mic: int = Field(0, ge=0)
    rirs: List[RirEntry]

    @field_validator("rirs")
    @classmethod
    def _non_empty(cls, value: List[RirEntry]) -> List[RirEntry]:
        if not value:
            raise ValueError("manifest lists no RIR files")
        return value


class ParamRangeConfig(BaseModel):
    q_min: float = Field(0.05, gt=0)
    q_max: float = 5.0
    gain_min_db: float = -10.0
    gain_max_db: float = 10.0
    vs_min_db: float = -20.0
    vs_max_db: float = 20.0

    @model_validator(mode="after")
    def _check_order(self) -> "ParamRangeConfig":
        for lo, hi, name in (
            (self.q_min, self.q_max, "Q"),
            (self.gain_min_db, self.gain_max_db, "V0_dB"),
            (self.vs_min_db, self.vs_max_db, "Vs_dB"),
        ):
            if not lo < hi:
                raise ValueError(f"{name} range must satisfy min < max")
        return self


class BiasNetConfig(BaseModel):
    """Run configuration of the BiasNet optimizer."""

    layers: Tuple[int, ...] = (1024, 512, 256, 128)
    iterations: int = Field(10000, ge=1)
    seed: int = 0
    lr: float = Field(1e-4, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    log_every: int = Field(100, ge=1)
    patience: Optional[int] = Field(None, ge=1)
    layer_bias: bool = False
    omega: float = Field(1.0, gt=0)
    allow_bias_only: bool = False

    @field_validator("layers")
    @classmethod
    def _positive_layers(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if any(n < 1 for n in value):
            raise ValueError("layer sizes must be positive")
        return value


class DsmConfig(BaseModel):
    gamma: float = Field(0.01, gt=0, lt=1)
    iterations: int = Field(10000, ge=0)
    seed: int = 0
    init_gain_db: float = Field(0.1, gt=0)
    log_every: int = Field(1000, ge=1)


class FdConfig(BaseModel):
    fir_len: int = Field(8192, ge=1)
    beta: float = Field(1e-4, ge=0)
    rolloff_octaves: float = Field(1.0 / 3.0, gt=0)
    window_alpha: float = Field(0.1, ge=0, le=1)


MethodName = Literal["biasnet", "dsm", "fd", "all"]


class RunManifest(BaseModel):
    """Everything needed to reproduce one design run."""

    scene_manifest: Optional[str] = None
    synthetic: Optional[SynthSpec] = None
    method: MethodName = "biasnet"
    seed: int = 0
    out_dir: Optional[str] = None
    n_fft: Optional[int] = None
    gamma2: Optional[float] = Field(None, ge=0)
    target_tilt_db_per_octave: float = 0.0
    sources: Optional[List[int]] = None
    mics: Optional[List[int]] = None
    ranges: ParamRangeConfig = Field(default_factory=ParamRangeConfig)
    biasnet: BiasNetConfig = Field(default_factory=BiasNetConfig)
    dsm: DsmConfig = Field(default_factory=DsmConfig)
    fd: FdConfig = Field(default_factory=FdConfig)
    sigma_db_factor: float = 10.0
    record_timing: bool = False

    @model_validator(mode="after")
    def _one_scene_source(self) -> "RunManifest":
        if (self.scene_manifest is None) == (self.synthetic is None):
            raise ValueError("exactly one of scene_manifest and synthetic is required")
        return self


class HistoryEntry(BaseModel):
    iteration: int
    l1: float
    l2: float
    total: float
    mse: float
    best_total: float


class EvalReport(BaseModel):
    """Evaluation of one designer on one scene."""

    method: str
    scene: str
    mse_per_mic: List[float]
    mse_avg: float
    sigma_per_mic: List[float]
    sigma_avg: float
    ops_per_sample: int
    iterations: int
    wall_s: Optional[float] = None
    seed: Optional[int] = None
    mse_unequalized_avg: float
    sigma_unequalized_avg: float
    band_centers_hz: List[float]
    unequalized_db: List[List[float]]
    equalized_db: List[List[float]]
    energy_ratio_pre: List[List[float]]
    energy_ratio_post: List[List[float]]
    energy_ratio_max_deviation: float
    sigma_db_factor: float = 10.0
    mse_divisor: str = "band_count"
    noise_check_max_dev_db: Optional[float] = None


class GradcheckClassReport(BaseModel):
    max_rel_error: float
    mean_rel_error: float
    worst_index: int
    passed: bool


class GradcheckReport(BaseModel):
    passed: bool
    seed: int
    step: float
    tolerance: float
    scene: Dict[str, Any]
    classes: Dict[str, GradcheckClassReport]
    failed_classes: List[str] = Field(default_factory=list)
    step_sweep: Dict[str, float] = Field(default_factory=dict)


class CommandReport(BaseModel):
    """Outcome of one CLI command.

    Failures are reported here instead of propagating, so the entry point
    can log them and pick the exit code.
    """

    success: bool
    message: str
    outputs: Dict[str, Any] = Field(default_factory=dict)
    warnings: List[str] = Field(default_factory=list)
    errors: List[str] = Field(default_factory=list)
