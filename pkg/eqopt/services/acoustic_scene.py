"""
Acoustic scenes: loading, synthesis, preprocessing, third-octave banding
and simulation of equalized responses.

A scene is an S x M matrix of impulse responses (sources by listening
points). Preprocessing estimates each source's delay at the reference
microphone and a global offset gain; :func:`build_problem` binds a
preprocessed scene to its DFT grid, bands, target and parameter ranges so
that the loss, the gradient and every designer work from the same
precomputed transfer matrix.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np
import soundfile as sf
from pydantic import ValidationError
from scipy import signal

from ..errors import BandError, SceneError
from ..schemas import ParamRangeConfig, SceneManifest, SynthSpec
from .filter_core import (
    FrequencyGrid,
    ParamRanges,
    db_to_linear,
    peaking_coefficients,
    sos_filter,
)

logger = logging.getLogger(__name__)

THIRD_OCTAVE_REFERENCE_HZ = 1000.0


# ---------------------------------------------------------------------------
# Scene
# ---------------------------------------------------------------------------

@dataclass
class Scene:
    """Impulse responses ``rirs[s, m, n]`` plus preprocessing results.

    ``delays`` and ``offset_db`` stay ``None`` until :func:`preprocess`
    fills them in.
    """

    rirs: np.ndarray
    fs: float
    f_low: float = 100.0
    f_high: float = 14000.0
    reference_source: int = 0
    reference_mic: int = 0
    label: str = "scene"
    delays: Optional[np.ndarray] = None
    offset_db: Optional[float] = None
    n_fft: Optional[int] = None

    def __post_init__(self) -> None:
        self.rirs = np.asarray(self.rirs, dtype=float)
        if self.rirs.ndim != 3:
            raise SceneError("impulse responses must be an (S, M, length) array")
        S, M, L = self.rirs.shape
        if S < 1 or M < 1:
            raise SceneError("a scene needs at least one source and one microphone")
        if L < 1:
            raise SceneError("impulse responses are empty")
        if not 0 < self.f_low < self.f_high < self.fs / 2:
            raise SceneError(
                f"need 0 < f_low < f_high < fs/2, got {self.f_low}, {self.f_high}, fs={self.fs}"
            )
        if not 0 <= self.reference_source < S:
            raise SceneError(f"reference source {self.reference_source} outside 0..{S - 1}")
        if not 0 <= self.reference_mic < M:
            raise SceneError(f"reference mic {self.reference_mic} outside 0..{M - 1}")

    @property
    def n_sources(self) -> int:
        return self.rirs.shape[0]

    @property
    def n_mics(self) -> int:
        return self.rirs.shape[1]

    @property
    def length(self) -> int:
        return self.rirs.shape[2]

    @property
    def is_preprocessed(self) -> bool:
        return self.delays is not None and self.offset_db is not None

    def aligned_rirs(self) -> np.ndarray:
        """RIRs with each source padded so direct sounds coincide at the reference mic."""
        if self.delays is None:
            return self.rirs
        lead = int(np.max(self.delays)) - np.asarray(self.delays, dtype=int)
        out = np.zeros((self.n_sources, self.n_mics, self.length + int(lead.max())))
        for s in range(self.n_sources):
            out[s, :, lead[s]:lead[s] + self.length] = self.rirs[s]
        return out

    def subset(self, sources: Optional[Sequence[int]] = None, mics: Optional[Sequence[int]] = None) -> "Scene":
        """Sub-scene over the given sources and microphones.

        Preprocessing results are dropped since the offset depends on which
        paths are summed.
        """
        sources = list(range(self.n_sources)) if sources is None else list(sources)
        mics = list(range(self.n_mics)) if mics is None else list(mics)
        for s in sources:
            if not 0 <= s < self.n_sources:
                raise SceneError(f"source {s} not in scene")
        for m in mics:
            if not 0 <= m < self.n_mics:
                raise SceneError(f"mic {m} not in scene")
        ref_s = sources.index(self.reference_source) if self.reference_source in sources else 0
        ref_m = mics.index(self.reference_mic) if self.reference_mic in mics else 0
        return Scene(
            rirs=self.rirs[np.ix_(sources, mics)],
            fs=self.fs,
            f_low=self.f_low,
            f_high=self.f_high,
            reference_source=ref_s,
            reference_mic=ref_m,
            label=self.label,
            n_fft=self.n_fft,
        )

    def describe(self) -> dict:
        return {
            "label": self.label,
            "S": self.n_sources,
            "M": self.n_mics,
            "fs": self.fs,
            "length": self.length,
            "f_low": self.f_low,
            "f_high": self.f_high,
        }


def _read_mono(path: str) -> Tuple[np.ndarray, int]:
    if not os.path.exists(path):
        raise SceneError(f"RIR file not found: {path}")
    try:
        data, fs = sf.read(path, dtype="float64", always_2d=True)
    except RuntimeError as exc:
        raise SceneError(f"cannot read {path}: {exc}") from exc
    if data.shape[1] != 1:
        raise SceneError(f"{path}: expected a mono file, found {data.shape[1]} channels")
    if data.shape[0] == 0:
        raise SceneError(f"{path}: zero-length impulse response")
    return data[:, 0], fs


def load_scene(manifest_path: str) -> Scene:
    """Load a measured scene from a JSON manifest.

    Paths in the manifest are relative to the manifest's directory. Every
    (source, mic) pair must be listed exactly once.
    """
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = SceneManifest.model_validate(json.load(fh))
    except OSError as exc:
        raise SceneError(f"cannot open manifest {manifest_path}: {exc}") from exc
    except (ValueError, ValidationError) as exc:
        raise SceneError(f"invalid manifest {manifest_path}: {exc}") from exc

    base = os.path.dirname(os.path.abspath(manifest_path))
    S = max(e.source for e in manifest.rirs) + 1
    M = max(e.mic for e in manifest.rirs) + 1
    responses = {}
    for entry in manifest.rirs:
        key = (entry.source, entry.mic)
        if key in responses:
            raise SceneError(f"duplicate entry for source {entry.source}, mic {entry.mic}")
        data, fs = _read_mono(os.path.join(base, entry.path))
        if fs != manifest.fs:
            raise SceneError(
                f"{entry.path}: sample rate {fs} Hz differs from the manifest's {manifest.fs:g} Hz"
            )
        responses[key] = data
    missing = [(s, m) for s in range(S) for m in range(M) if (s, m) not in responses]
    if missing:
        raise SceneError(f"manifest lacks responses for (source, mic) pairs {missing}")

    length = max(len(h) for h in responses.values())
    rirs = np.zeros((S, M, length))
    for (s, m), h in responses.items():
        rirs[s, m, :len(h)] = h
    logger.info("Loaded %d x %d scene from %s (%d samples at %g Hz)", S, M, manifest_path, length, manifest.fs)
    label = os.path.splitext(os.path.basename(manifest_path))[0]
    return Scene(
        rirs=rirs,
        fs=manifest.fs,
        f_low=manifest.f_low,
        f_high=manifest.f_high,
        reference_source=manifest.reference_source,
        reference_mic=manifest.reference_mic,
        label=label,
    )


def rir_file_name(source: int, mic: int) -> str:
    return f"rir_s{source:02d}_m{mic:02d}.wav"


def write_scene(directory: str, scene: Scene, manifest_name: str = "manifest.json") -> str:
    """Write one 32-bit float WAV per path plus a manifest; returns the manifest path."""
    if scene.fs != int(scene.fs):
        raise SceneError(f"WAV files need an integer sample rate, got {scene.fs}")
    os.makedirs(directory, exist_ok=True)
    entries = []
    for s in range(scene.n_sources):
        for m in range(scene.n_mics):
            name = rir_file_name(s, m)
            sf.write(os.path.join(directory, name), scene.rirs[s, m], int(scene.fs), subtype="FLOAT")
            entries.append({"source": s, "mic": m, "path": name})
    manifest = SceneManifest(
        fs=scene.fs,
        f_low=scene.f_low,
        f_high=scene.f_high,
        reference_source=scene.reference_source,
        reference_mic=scene.reference_mic,
        rirs=entries,
    )
    path = os.path.join(directory, manifest_name)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest.model_dump(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

def _log_uniform(rng: np.random.Generator, lo: float, hi: float, size) -> np.ndarray:
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size))


def _room_peaks(rng: np.random.Generator, spec: SynthSpec, count: int = 6):
    """Log-spaced colorations with alternating sign, shared by every path."""
    positions = (np.arange(count) + 0.5 + rng.uniform(-0.25, 0.25, count)) / count
    fc = spec.f_low * (spec.f_high / spec.f_low) ** positions
    signs = np.where(np.arange(count) % 2 == 0, 1.0, -1.0)
    gains = signs * spec.coloration_db * rng.uniform(0.8, 1.0, count)
    q = rng.uniform(1.0, 3.0, count)
    return fc, q, gains


def _random_peaks(rng: np.random.Generator, spec: SynthSpec, count: int, max_gain_db: float):
    fc = _log_uniform(rng, spec.f_low, spec.f_high, count)
    q = rng.uniform(1.0, 3.0, count)
    gains = rng.uniform(-1.0, 1.0, count) * max_gain_db
    return fc, q, gains


def _colorize(h: np.ndarray, peaks: List[Tuple[np.ndarray, np.ndarray, np.ndarray]], fs: float) -> np.ndarray:
    fc = np.concatenate([p[0] for p in peaks])
    q = np.concatenate([p[1] for p in peaks])
    gains = np.concatenate([p[2] for p in peaks])
    keep = gains != 0.0
    if not np.any(keep):
        return h
    b, a = peaking_coefficients(fc[keep], q[keep], gains[keep], fs)
    return sos_filter(b, a, 0.0, h)


def synth_scene(spec: SynthSpec) -> Scene:
    """Deterministic synthetic scene.

    Each path is a direct impulse at a random delay followed by an
    exponentially decaying noise tail, colored by peaking filters shared
    by the whole room, by each source and by each individual path.
    """
    rng = np.random.default_rng(spec.seed)
    fs = spec.fs
    S, M = spec.n_sources, spec.n_mics
    t60 = spec.decay_ms / 1000.0
    tail_len = int(np.ceil(t60 * fs)) if t60 > 0 else 0
    length = spec.length or max(4096, spec.max_delay + spec.mic_spread + tail_len + 1)
    path_db = spec.coloration_db / 5.0 if spec.path_coloration_db is None else spec.path_coloration_db

    room = _room_peaks(rng, spec) if spec.coloration_db > 0 else None
    base_low = min(32, spec.max_delay)
    base_delays = rng.integers(base_low, spec.max_delay + 1, size=S)
    amplitudes = rng.uniform(0.5, 1.0, size=S)

    rirs = np.zeros((S, M, length))
    for s in range(S):
        src_peaks = _random_peaks(rng, spec, 3, spec.coloration_db / 3.0) if spec.coloration_db > 0 else None
        for m in range(M):
            delay = int(base_delays[s] + rng.integers(0, spec.mic_spread + 1))
            if delay >= length:
                raise SceneError(f"direct-path delay {delay} does not fit in {length} samples")
            amp = amplitudes[s] * (1.0 + rng.uniform(-0.1, 0.1))
            h = np.zeros(length)
            h[delay] = amp
            if tail_len:
                n = min(tail_len, length - delay - 1)
                t = np.arange(1, n + 1) / fs
                envelope = np.exp(-np.log(1000.0) * t / t60)
                h[delay + 1:delay + 1 + n] = amp * db_to_linear(spec.tail_db) * rng.standard_normal(n) * envelope
            peaks = []
            if room is not None:
                peaks.append(room)
            if src_peaks is not None:
                peaks.append(src_peaks)
            if path_db > 0:
                peaks.append(_random_peaks(rng, spec, 2, path_db))
            rirs[s, m] = _colorize(h, peaks, fs) if peaks else h

    logger.info("Synthesized %d x %d scene (seed %d, %d samples)", S, M, spec.seed, length)
    return Scene(rirs=rirs, fs=fs, f_low=spec.f_low, f_high=spec.f_high, label=spec.label)


# ---------------------------------------------------------------------------
# Third-octave bands
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BandSet:
    """Third-octave bands and the DFT bins each one covers.

    ``lo``/``hi`` are the nominal edges; ``fc_ranges`` are the edges clipped
    to the equalization range. Bins ``start[i]:stop[i]`` belong to band i.
    """

    centers: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    fc_ranges: np.ndarray
    start: np.ndarray
    stop: np.ndarray

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def counts(self) -> np.ndarray:
        return self.stop - self.start

    @cached_property
    def bin_band(self) -> np.ndarray:
        """Band index of every in-band bin, in bin order."""
        return np.repeat(np.arange(len(self)), self.counts)

    @cached_property
    def bin_index(self) -> np.ndarray:
        return np.concatenate([np.arange(a, b) for a, b in zip(self.start, self.stop)])


def third_octave_edges(f_low: float, f_high: float) -> Tuple[np.ndarray, np.ndarray]:
    """Centers and shared edges of every base-2 third-octave band touching [f_low, f_high]."""
    i_lo = int(np.floor(3 * np.log2(f_low / THIRD_OCTAVE_REFERENCE_HZ))) - 1
    i_hi = int(np.ceil(3 * np.log2(f_high / THIRD_OCTAVE_REFERENCE_HZ))) + 1
    idx = np.arange(i_lo, i_hi + 1)
    edges = THIRD_OCTAVE_REFERENCE_HZ * 2.0 ** ((np.arange(i_lo, i_hi + 2) - 0.5) / 3.0)
    lo, hi = edges[:-1], edges[1:]
    keep = (hi > f_low) & (lo < f_high)
    centers = THIRD_OCTAVE_REFERENCE_HZ * 2.0 ** (idx / 3.0)
    return centers[keep], np.stack([lo[keep], hi[keep]], axis=1)


def make_bands(f_low: float, f_high: float, grid: FrequencyGrid) -> BandSet:
    if not 0 < f_low < f_high:
        raise BandError(f"empty equalization range [{f_low}, {f_high}]")
    if f_low >= grid.fs / 2:
        raise BandError(f"f_low {f_low} Hz is above the Nyquist frequency")
    centers, edges = third_octave_edges(f_low, min(f_high, grid.fs / 2))
    if len(centers) == 0:
        raise BandError(f"no third-octave band in [{f_low}, {f_high}]")
    clipped = np.stack([np.maximum(edges[:, 0], f_low), np.minimum(edges[:, 1], f_high)], axis=1)

    freqs = grid.freqs
    start = np.searchsorted(freqs, clipped[:, 0], side="left")
    stop = np.searchsorted(freqs, clipped[:, 1], side="left")
    for i in np.flatnonzero(stop <= start):
        start[i] = np.searchsorted(freqs, edges[i, 0], side="left")
        stop[i] = np.searchsorted(freqs, edges[i, 1], side="left")
        if stop[i] <= start[i]:
            raise BandError(
                f"band at {centers[i]:.1f} Hz holds no DFT bin (bin spacing {grid.df:.2f} Hz)"
            )
        logger.warning("Band at %.1f Hz uses its unclipped edges to reach a DFT bin", centers[i])
    if np.any(start[1:] < stop[:-1]):
        raise BandError("band bin ranges overlap")
    single = centers[(stop - start) == 1]
    if len(single):
        logger.warning("Bands at %s Hz cover a single DFT bin", ", ".join(f"{c:.1f}" for c in single))
    return BandSet(centers=centers, lo=edges[:, 0], hi=edges[:, 1], fc_ranges=clipped, start=start, stop=stop)


def band_power(magnitude: np.ndarray, bands: BandSet) -> np.ndarray:
    power = np.abs(magnitude) ** 2
    return np.stack([power[..., a:b].mean(axis=-1) for a, b in zip(bands.start, bands.stop)], axis=-1)


def band_average(magnitude: np.ndarray, bands: BandSet) -> np.ndarray:
    """Root-mean-power of the spectrum within each band."""
    return np.sqrt(band_power(magnitude, bands))


# ---------------------------------------------------------------------------
# Target
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TargetResponse:
    magnitudes: np.ndarray

    def __post_init__(self) -> None:
        mags = np.asarray(self.magnitudes, dtype=float)
        if mags.ndim != 1 or np.any(~(mags > 0)):
            raise BandError("target magnitudes must be a vector of positive values")
        object.__setattr__(self, "magnitudes", mags)

    @classmethod
    def flat(cls, bands: BandSet, level_db: float = 0.0) -> "TargetResponse":
        return cls(np.full(len(bands), float(db_to_linear(level_db))))

    @classmethod
    def tilt(cls, bands: BandSet, db_per_octave: float, pivot_hz: float = THIRD_OCTAVE_REFERENCE_HZ) -> "TargetResponse":
        level_db = db_per_octave * np.log2(bands.centers / pivot_hz)
        return cls(db_to_linear(level_db))


# ---------------------------------------------------------------------------
# Preprocessing and problem setup
# ---------------------------------------------------------------------------

def path_energies(spectra: np.ndarray, grid: FrequencyGrid) -> np.ndarray:
    """sum_n h(n)^2 of each path, through Parseval on the one-sided spectrum."""
    return np.abs(spectra) ** 2 @ grid.parseval_weights


def preprocess(scene: Scene, n_fft: Optional[int] = None) -> Scene:
    """Estimate per-source delays and the global offset gain.

    The delay is the argmax of |h| at the reference mic. The offset makes
    the mean in-band dB level of the summed, delay-aligned response 0 dB.
    """
    ref = scene.reference_mic
    for s in range(scene.n_sources):
        for m in range(scene.n_mics):
            if not np.any(scene.rirs[s, m]):
                raise SceneError(f"impulse response for source {s}, mic {m} is all zero")
    delays = np.argmax(np.abs(scene.rirs[:, ref, :]), axis=-1).astype(int)
    aligned = replace(scene, delays=delays, offset_db=None)
    n_fft = n_fft if n_fft is not None else scene.n_fft
    rirs = aligned.aligned_rirs()
    grid = FrequencyGrid.for_length(rirs.shape[-1], scene.fs, n_fft)
    bands = make_bands(scene.f_low, scene.f_high, grid)
    summed = grid.rfft(rirs.sum(axis=0))
    levels = band_average(np.abs(summed), bands)
    if np.any(levels <= 0):
        raise SceneError("summed response vanishes in a band; cannot normalize")
    offset_db = -float(np.mean(20.0 * np.log10(levels)))
    logger.info("Delays %s samples, offset %.3f dB", delays.tolist(), offset_db)
    return replace(scene, delays=delays, offset_db=offset_db, n_fft=grid.n_fft)


@dataclass
class Problem:
    """A preprocessed scene bound to everything the designers need.

    ``transfer[s, m]`` is the one-sided spectrum of the aligned,
    offset-scaled RIR; ``energies`` and ``ratios`` are the pre-equalization
    path energies and reference-to-path energy ratios.
    """

    scene: Scene
    grid: FrequencyGrid
    bands: BandSet
    target: TargetResponse
    ranges: ParamRanges
    transfer: np.ndarray
    energies: np.ndarray
    gamma1: float = 1.0
    gamma2: float = 0.0
    aligned: np.ndarray = field(repr=False, default=None)

    @property
    def n_sources(self) -> int:
        return self.transfer.shape[0]

    @property
    def n_mics(self) -> int:
        return self.transfer.shape[1]

    @property
    def n_bands(self) -> int:
        return len(self.bands)

    @property
    def n_params(self) -> int:
        return self.ranges.n_params(self.n_sources)

    @property
    def reference_source(self) -> int:
        return self.scene.reference_source

    @cached_property
    def ratios(self) -> np.ndarray:
        return self.energies[self.reference_source][None, :] / self.energies

    def unequalized_spectra(self) -> np.ndarray:
        return self.transfer.sum(axis=0)


def default_gamma2(n_sources: int, n_mics: int) -> float:
    return float(np.log2(n_sources) + np.log2(n_mics))


def build_problem(
    scene: Scene,
    n_fft: Optional[int] = None,
    target: Optional[TargetResponse] = None,
    ranges: Optional[ParamRangeConfig] = None,
    gamma1: float = 1.0,
    gamma2: Optional[float] = None,
    tilt_db_per_octave: float = 0.0,
) -> Problem:
    if not scene.is_preprocessed or (n_fft is not None and n_fft != scene.n_fft):
        scene = preprocess(scene, n_fft)
    aligned = scene.aligned_rirs() * float(db_to_linear(scene.offset_db))
    grid = FrequencyGrid.for_length(aligned.shape[-1], scene.fs, scene.n_fft)
    bands = make_bands(scene.f_low, scene.f_high, grid)
    if target is None:
        target = TargetResponse.tilt(bands, tilt_db_per_octave) if tilt_db_per_octave else TargetResponse.flat(bands)
    if len(target.magnitudes) != len(bands):
        raise BandError(f"target has {len(target.magnitudes)} bands, the scene has {len(bands)}")
    transfer = grid.rfft(aligned)
    energies = path_energies(transfer, grid)
    if np.any(energies <= 0):
        raise SceneError("a path has zero energy")
    if gamma2 is None:
        gamma2 = default_gamma2(scene.n_sources, scene.n_mics)
    return Problem(
        scene=scene,
        grid=grid,
        bands=bands,
        target=target,
        ranges=ParamRanges.from_config(bands.fc_ranges, ranges),
        transfer=transfer,
        energies=energies,
        gamma1=gamma1,
        gamma2=float(gamma2),
        aligned=aligned,
    )


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def equalized_response(problem: Problem, eq_spectra: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-mic and per-path spectra after equalization.

    ``eq_spectra`` has shape (S, n_bins); returns ``(mic, path)`` with shapes
    (M, n_bins) and (S, M, n_bins).
    """
    eq_spectra = np.asarray(eq_spectra)
    if eq_spectra.shape[0] != problem.n_sources:
        raise SceneError(f"{eq_spectra.shape[0]} equalizers for {problem.n_sources} sources")
    path = problem.transfer * eq_spectra[:, None, :]
    return path.sum(axis=0), path


def noise_band_response(
    problem: Problem,
    b: np.ndarray,
    a: np.ndarray,
    vs_db: np.ndarray,
    seconds: float = 4.0,
    seed: int = 0,
) -> np.ndarray:
    """Band magnitudes estimated from a simulated white-noise measurement.

    The same noise drives every equalized source; each mic signal is the sum
    of the filtered noise convolved with the aligned RIRs, and the transfer
    function is the Welch cross-spectrum over the input auto-spectrum.
    """
    rng = np.random.default_rng(seed)
    fs = problem.grid.fs
    x = rng.standard_normal(int(seconds * fs))
    n = len(x)
    mics = np.zeros((problem.n_mics, n))
    for s in range(problem.n_sources):
        y = sos_filter(b[s], a[s], vs_db[s], x)
        for m in range(problem.n_mics):
            mics[m] += signal.fftconvolve(y, problem.aligned[s, m])[:n]
    nperseg = problem.grid.n_fft
    _, pxx = signal.welch(x, fs=fs, nperseg=nperseg)
    _, pxy = signal.csd(x, mics, fs=fs, nperseg=nperseg, axis=-1)
    h = np.abs(pxy / pxx)
    return band_average(h, problem.bands)
