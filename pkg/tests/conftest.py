import numpy as np
import pytest

from eqopt.schemas import SynthSpec
from eqopt.services.acoustic_scene import Scene, build_problem, synth_scene


def small_spec(**overrides) -> SynthSpec:
    """Short scene with a 500 Hz - 8 kHz range; about 13 bands."""
    fields = dict(S=2, M=2, f_low=500.0, f_high=8000.0, length=1024, decay_ms=10.0, seed=1, label="small")
    fields.update(overrides)
    return SynthSpec(**fields)


def impulse_scene(S: int = 1, M: int = 1, delay: int = 0, length: int = 1024, fs: float = 48000.0,
                  f_low: float = 500.0, f_high: float = 8000.0) -> Scene:
    rirs = np.zeros((S, M, length))
    rirs[:, :, delay] = 1.0
    return Scene(rirs=rirs, fs=fs, f_low=f_low, f_high=f_high, label="impulse")


@pytest.fixture(autouse=True)
def isolated_outputs(tmp_path, monkeypatch):
    """Keep the registry and default output root inside the test's tmp dir."""
    monkeypatch.setenv("EQOPT_OUTPUT_ROOT", str(tmp_path / "runs"))
    monkeypatch.setenv("EQOPT_DB_PATH", str(tmp_path / "registry.db"))


@pytest.fixture
def small_scene():
    return synth_scene(small_spec())


@pytest.fixture
def small_problem(small_scene):
    return build_problem(small_scene, n_fft=4096)


@pytest.fixture
def siso_problem():
    return build_problem(synth_scene(small_spec(S=1, M=1, seed=2)), n_fft=4096)
