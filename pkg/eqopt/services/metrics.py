"""Evaluation metrics in third-octave bands.

All designers are scored through :func:`evaluate`, so BiasNet, the Direct
Search Method and frequency deconvolution see one metric path.

Conventions
- MSE is the mean over bands of the squared linear-magnitude error, then
  averaged over microphones (divisor: band count).
- sigma is the standard deviation of the band levels in dB around their
  mean. The dB factor defaults to 10 * log10 of the magnitude.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Tuple

import numpy as np

from ..errors import BandError
from ..schemas import EvalReport
from .acoustic_scene import Problem, band_average, equalized_response
from .loss_grad import energy_ratios


def band_errors(band_magnitudes: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-mic, per-band linear-magnitude error; shared by loss checks and MSE."""
    mags = np.atleast_2d(np.asarray(band_magnitudes, dtype=float))
    if mags.shape[-1] == 0:
        raise BandError("no band inside the equalization range")
    return mags - np.asarray(target, dtype=float)


def mse(band_magnitudes: np.ndarray, target: np.ndarray) -> Tuple[np.ndarray, float]:
    """Per-mic MSE and its average over mics."""
    per_mic = np.mean(band_errors(band_magnitudes, target) ** 2, axis=-1)
    return per_mic, float(np.mean(per_mic))


def sigma(band_magnitudes: np.ndarray, db_factor: float = 10.0) -> Tuple[np.ndarray, float]:
    """Per-mic dB standard deviation around the mean level, and its average."""
    mags = np.atleast_2d(np.asarray(band_magnitudes, dtype=float))
    if mags.shape[-1] == 0:
        raise BandError("no band inside the equalization range")
    if np.any(mags <= 0):
        raise BandError("sigma needs strictly positive band magnitudes")
    levels = db_factor * np.log10(mags)
    per_mic = np.sqrt(np.mean((levels - levels.mean(axis=-1, keepdims=True)) ** 2, axis=-1))
    return per_mic, float(np.mean(per_mic))


def energy_ratio_table(problem: Problem, path_spectra: np.ndarray) -> Dict[str, np.ndarray]:
    """Pre/post energy ratios against the reference source and their relative deviation."""
    ratios = energy_ratios(problem, path_spectra)
    return {
        "r": ratios.r,
        "r_hat": ratios.r_hat,
        "deviation": ratios.relative_deviation,
    }


def _db(mags: np.ndarray) -> List[List[float]]:
    return (20.0 * np.log10(mags)).T.tolist()


def evaluate(
    problem: Problem,
    eq_spectra: np.ndarray,
    method: str,
    ops_per_sample: int,
    iterations: int = 0,
    seed: Optional[int] = None,
    wall_s: Optional[float] = None,
    sigma_db_factor: float = 10.0,
) -> EvalReport:
    """Score equalizer spectra of shape (S, n_bins) on ``problem``."""
    target = problem.target.magnitudes
    mic, path = equalized_response(problem, eq_spectra)
    mags = band_average(np.abs(mic), problem.bands)
    raw = band_average(np.abs(problem.unequalized_spectra()), problem.bands)

    mse_m, mse_avg = mse(mags, target)
    sig_m, sig_avg = sigma(mags, sigma_db_factor)
    _, mse_raw = mse(raw, target)
    _, sig_raw = sigma(raw, sigma_db_factor)
    table = energy_ratio_table(problem, path)

    return EvalReport(
        method=method,
        scene=problem.scene.label,
        mse_per_mic=mse_m.tolist(),
        mse_avg=mse_avg,
        sigma_per_mic=sig_m.tolist(),
        sigma_avg=sig_avg,
        ops_per_sample=int(ops_per_sample),
        iterations=int(iterations),
        wall_s=wall_s,
        seed=seed,
        mse_unequalized_avg=mse_raw,
        sigma_unequalized_avg=sig_raw,
        band_centers_hz=problem.bands.centers.tolist(),
        unequalized_db=_db(raw),
        equalized_db=_db(mags),
        energy_ratio_pre=table["r"].tolist(),
        energy_ratio_post=table["r_hat"].tolist(),
        energy_ratio_max_deviation=float(table["deviation"].max()),
        sigma_db_factor=sigma_db_factor,
    )
