"""
Comparison designers: Direct Search Method (DSM) over the peaking-filter
parameter space and regularized frequency deconvolution (FD) producing FIR
equalizers. Also the per-sample operation counts used to compare costs.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.signal import windows

from ..errors import CoefficientFileError, ParameterDomainError, RegularizationError
from ..schemas import DsmConfig, FdConfig, HistoryEntry
from .acoustic_scene import Problem, equalized_response
from .biasnet import OptimizationResult
from .filter_core import (
    Equalizer,
    EqualizerBank,
    FrequencyGrid,
    normalize,
    pack,
    unpack,
)
from .loss_grad import compute_loss
from .metrics import mse

logger = logging.getLogger(__name__)

FD_CONDITION_LIMIT = 1e12


# ---------------------------------------------------------------------------
# Direct Search Method
# ---------------------------------------------------------------------------

def dsm_initial_bank(problem: Problem, init_gain_db: float, rng: np.random.Generator) -> EqualizerBank:
    """Band-centred fc, Q = 1/sqrt(2), small seeded non-zero gains.

    A multiplicative search cannot leave zero, so gains start slightly off it.
    """
    S, nb = problem.n_sources, problem.n_bands
    ranges = problem.ranges
    fc = np.tile(np.sqrt(ranges.fc_bands[:, 0] * ranges.fc_bands[:, 1]), (S, 1))
    q = np.full((S, nb), np.clip(1.0 / np.sqrt(2.0), *ranges.q))
    gains = rng.uniform(-init_gain_db, init_gain_db, (S, nb))
    vs = rng.uniform(-init_gain_db, init_gain_db, S)
    return EqualizerBank(fc, q, gains, vs)


def dsm_optimize(problem: Problem, config: Optional[DsmConfig] = None) -> OptimizationResult:
    """Accept/reject hill climbing with c_i <- c_i * (1 + Gamma_i), Gamma_i ~ U(-gamma, gamma)."""
    config = config or DsmConfig()
    rng = np.random.default_rng(config.seed)
    nb = problem.n_bands
    lo, hi = problem.ranges.bounds(problem.n_sources)

    bank = dsm_initial_bank(problem, config.init_gain_db, rng)
    current_c = pack(bank.fc, bank.q, bank.gain_db, bank.vs_db)
    current = compute_loss(problem, bank)
    losses = [current.total]
    history = [_history_entry(problem, 0, current)]
    accepted = 0
    logger.info("DSM: gamma %g, %d iterations, initial loss %.4e", config.gamma, config.iterations, current.total)

    for it in range(1, config.iterations + 1):
        gamma = rng.uniform(-config.gamma, config.gamma, current_c.size)
        trial_c = np.clip(current_c * (1.0 + gamma), lo, hi)
        trial_bank = EqualizerBank(*unpack(trial_c, nb))
        trial = compute_loss(problem, trial_bank)
        if trial.total < current.total:
            current_c, bank, current = trial_c, trial_bank, trial
            accepted += 1
        losses.append(current.total)
        if it % config.log_every == 0 or it == config.iterations:
            history.append(_history_entry(problem, it, current))
            logger.info("DSM iter %6d  total %.4e  accepted %d", it, current.total, accepted)

    return OptimizationResult(
        method="dsm",
        p=normalize(bank, problem.ranges),
        bank=bank,
        best=current,
        best_iteration=int(np.argmin(losses)),
        iterations=config.iterations,
        losses=np.asarray(losses),
        history=history,
    )


def _history_entry(problem: Problem, it: int, breakdown) -> HistoryEntry:
    return HistoryEntry(
        iteration=it,
        l1=breakdown.l1,
        l2=breakdown.l2,
        total=breakdown.total,
        mse=mse(breakdown.band_magnitudes, problem.target.magnitudes)[1],
        best_total=breakdown.total,
    )


# ---------------------------------------------------------------------------
# Frequency deconvolution
# ---------------------------------------------------------------------------

@dataclass
class FirEqualizer:
    """Real FIR taps, one row per source."""

    taps: np.ndarray

    def __post_init__(self) -> None:
        self.taps = np.atleast_2d(np.asarray(self.taps, dtype=float))

    @property
    def n_sources(self) -> int:
        return self.taps.shape[0]

    @property
    def length(self) -> int:
        return self.taps.shape[1]


def _rolloff(freqs: np.ndarray, f_low: float, f_high: float, octaves: float) -> np.ndarray:
    """1 inside [f_low, f_high], raised-cosine fade over ``octaves`` outside."""
    with np.errstate(divide="ignore"):
        below = np.where(freqs < f_low, np.log2(f_low / np.maximum(freqs, 1e-300)), 0.0)
        above = np.where(freqs > f_high, np.log2(freqs / f_high), 0.0)
    dist = np.minimum(np.maximum(below, above) / octaves, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * dist))


def fd_target_spectrum(problem: Problem, rolloff_octaves: float = 1.0 / 3.0) -> np.ndarray:
    """Zero-phase desired mic spectrum, interpolated from the band target."""
    freqs = problem.grid.freqs
    scene = problem.scene
    inside = np.interp(
        np.log2(np.maximum(freqs, 1e-3)),
        np.log2(problem.bands.centers),
        problem.target.magnitudes,
    )
    return inside * _rolloff(freqs, scene.f_low, scene.f_high, rolloff_octaves)


def fd_inverse_spectra(
    problem: Problem,
    beta: float = 1e-4,
    rolloff_octaves: float = 1.0 / 3.0,
    target_spectrum: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Per-bin solution of (H^H H + beta I) G = H^H D, shape (S, n_bins).

    ``H(k)`` is the M x S transfer matrix and ``D(k)`` repeats the desired
    mic spectrum for every mic.
    """
    if beta < 0:
        raise ParameterDomainError("beta must be non-negative")
    d = fd_target_spectrum(problem, rolloff_octaves) if target_spectrum is None else np.asarray(target_spectrum)
    h = np.transpose(problem.transfer, (2, 1, 0))  # (F, M, S)
    hh = np.conj(np.transpose(h, (0, 2, 1)))
    normal = hh @ h
    if beta == 0:
        cond = np.linalg.cond(normal)
        bad = ~np.isfinite(cond) | (cond > FD_CONDITION_LIMIT)
        if np.any(bad):
            raise RegularizationError(
                f"normal matrix is singular at {int(bad.sum())} bins; use beta > 0"
            )
    else:
        normal = normal + beta * np.eye(problem.n_sources)
    rhs = hh @ np.broadcast_to(d[:, None, None], (len(d), problem.n_mics, 1)).astype(complex)
    g = np.linalg.solve(normal, rhs)[..., 0]
    return g.T


def fd_design(
    problem: Problem,
    fir_len: int = 8192,
    beta: float = 1e-4,
    config: Optional[FdConfig] = None,
    target_spectrum: Optional[np.ndarray] = None,
) -> FirEqualizer:
    """FIR equalizers from the regularized inverse.

    The inverse DFT is shifted by half the DFT size, so the modeling delay
    puts the main tap at ``fir_len // 2``, then a centred Tukey-windowed
    segment of ``fir_len`` taps is kept.
    """
    config = config or FdConfig(fir_len=fir_len, beta=beta)
    n = problem.grid.n_fft
    if not 1 <= fir_len <= n:
        raise ParameterDomainError(f"filter length {fir_len} must lie in 1..{n}")
    spectra = fd_inverse_spectra(problem, beta, config.rolloff_octaves, target_spectrum)
    impulse = np.roll(np.fft.irfft(spectra, n=n, axis=-1), n // 2, axis=-1)
    start = n // 2 - fir_len // 2
    taps = impulse[:, start:start + fir_len] * windows.tukey(fir_len, config.window_alpha, sym=True)
    logger.info("FD: %d taps per source, beta %g", fir_len, beta)
    return FirEqualizer(taps)


def fir_spectra(fir: FirEqualizer, grid: FrequencyGrid) -> np.ndarray:
    if fir.length > grid.n_fft:
        raise ParameterDomainError(f"{fir.length} taps exceed the DFT size {grid.n_fft}")
    return grid.rfft(fir.taps)


def fir_equalized_response(problem: Problem, fir: FirEqualizer):
    return equalized_response(problem, fir_spectra(fir, problem.grid))


# ---------------------------------------------------------------------------
# Cost accounting
# ---------------------------------------------------------------------------

def fir_ops(length: int) -> int:
    return 2 * int(length) - 1


def sos_ops(n_sections: int) -> int:
    return 9 * int(n_sections)


EqualizerLike = Union[Equalizer, EqualizerBank, FirEqualizer, np.ndarray, Sequence]


def ops_per_sample(obj: EqualizerLike) -> int:
    """Operations per output sample.

    FIR of length L: 2L - 1. Cascade of n sections: 9n. Banks and
    sequences are summed over their channels.
    """
    if isinstance(obj, Equalizer):
        return sos_ops(len(obj.sections))
    if isinstance(obj, EqualizerBank):
        return obj.n_sources * sos_ops(obj.n_bands)
    if isinstance(obj, FirEqualizer):
        return obj.n_sources * fir_ops(obj.length)
    if isinstance(obj, np.ndarray) and obj.ndim == 1:
        return fir_ops(len(obj))
    return int(sum(ops_per_sample(item) for item in obj))


# ---------------------------------------------------------------------------
# FIR files
# ---------------------------------------------------------------------------

def fir_file_name(source: int) -> str:
    return f"source_{source:02d}.txt"


def write_fir_dir(directory: str, fir: FirEqualizer) -> List[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for s in range(fir.n_sources):
        path = os.path.join(directory, fir_file_name(s))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("".join(f"{v:.17g}\n" for v in fir.taps[s]))
        paths.append(path)
    return paths


def read_fir_dir(directory: str, n_sources: int, length: Optional[int] = None) -> FirEqualizer:
    rows = []
    for s in range(n_sources):
        path = os.path.join(directory, fir_file_name(s))
        try:
            with open(path, "r", encoding="utf-8") as fh:
                taps = [float(ln) for ln in fh if ln.strip()]
        except OSError as exc:
            raise CoefficientFileError(f"cannot read {path}: {exc}") from exc
        except ValueError as exc:
            raise CoefficientFileError(f"{path}: {exc}") from exc
        if not taps:
            raise CoefficientFileError(f"{path}: no taps")
        if length is not None and len(taps) != length:
            raise CoefficientFileError(f"{path}: {len(taps)} taps, expected {length}")
        rows.append(taps)
    if len({len(r) for r in rows}) != 1:
        raise CoefficientFileError("FIR files disagree on the tap count")
    return FirEqualizer(np.asarray(rows))
