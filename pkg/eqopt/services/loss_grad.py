"""
Optimization objective and its analytic gradient.

The loss has two terms. L1 is, per microphone, the Euclidean distance
between the band-averaged equalized magnitude and the target; L2 is, per
microphone, the Euclidean distance between the post- and pre-equalization
energy ratios of every source against the reference source. The total is
``gamma1 * L1 + gamma2 * L2``.

The gradient is accumulated in reverse mode over the DSP graph
p -> (fc, Q, V0, Vs) -> (b, a) -> (B, A) -> G -> per-path spectra ->
{band magnitudes, path energies} -> loss. Complex gradients use the
convention grad = dL/dRe + j dL/dIm, so for a holomorphic step w = c * v
the gradient with respect to v is conj(c) times the gradient with respect
to w.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np

from ..errors import ParameterDomainError, SingularGradientError
from .acoustic_scene import Problem, band_average, equalized_response, path_energies
from .filter_core import (
    LN10_OVER_20,
    EqualizerBank,
    bank_response,
    db_to_linear,
    denormalize,
    pack,
    peaking_coefficient_partials,
    peaking_coefficients,
)

logger = logging.getLogger(__name__)

PARAMETER_CLASSES = ("fc", "Q", "V0", "Vs")


@dataclass(frozen=True)
class EnergyRatios:
    energies: np.ndarray
    energies_hat: np.ndarray
    r: np.ndarray
    r_hat: np.ndarray

    @property
    def relative_deviation(self) -> np.ndarray:
        return np.abs(self.r_hat - self.r) / self.r

    @property
    def max_relative_deviation(self) -> float:
        return float(self.relative_deviation.max())


@dataclass(frozen=True)
class LossBreakdown:
    l1: float
    l2: float
    gamma1: float
    gamma2: float
    band_magnitudes: np.ndarray
    ratios: EnergyRatios

    @property
    def total(self) -> float:
        return self.gamma1 * self.l1 + self.gamma2 * self.l2

    def as_dict(self) -> Dict[str, float]:
        return {"l1": self.l1, "l2": self.l2, "total": self.total}


@dataclass
class _Trace:
    bank: EqualizerBank
    b: np.ndarray
    a: np.ndarray
    num: np.ndarray
    den: np.ndarray
    eq: np.ndarray
    mic: np.ndarray
    path: np.ndarray
    breakdown: LossBreakdown


def energy_ratios(problem: Problem, path: np.ndarray) -> EnergyRatios:
    energies_hat = path_energies(path, problem.grid)
    if np.any(energies_hat <= 0):
        raise SingularGradientError("an equalized path has zero energy; energy ratios are undefined")
    ref = problem.reference_source
    return EnergyRatios(
        energies=problem.energies,
        energies_hat=energies_hat,
        r=problem.ratios,
        r_hat=energies_hat[ref][None, :] / energies_hat,
    )


def loss_from_spectra(problem: Problem, eq_spectra: np.ndarray) -> Tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Loss for given equalizer spectra; also returns the mic and path spectra."""
    mic, path = equalized_response(problem, eq_spectra)
    mags = band_average(np.abs(mic), problem.bands)
    l1 = float(np.sum(np.sqrt(np.sum((mags - problem.target.magnitudes) ** 2, axis=-1))))
    ratios = energy_ratios(problem, path)
    l2 = float(np.sum(np.sqrt(np.sum((ratios.r_hat - ratios.r) ** 2, axis=0))))
    breakdown = LossBreakdown(l1, l2, problem.gamma1, problem.gamma2, mags, ratios)
    return breakdown, mic, path


def compute_loss(problem: Problem, eqs: Union[EqualizerBank, np.ndarray]) -> LossBreakdown:
    """Loss of an equalizer bank, or of a normalized parameter vector."""
    if not isinstance(eqs, EqualizerBank):
        eqs = denormalize(eqs, problem.ranges)
    return loss_from_spectra(problem, bank_response(eqs, problem.grid))[0]


def _trace(problem: Problem, p: np.ndarray) -> _Trace:
    bank = denormalize(p, problem.ranges)
    b, a = peaking_coefficients(bank.fc, bank.q, bank.gain_db, problem.grid.fs)
    zp = problem.grid.z_powers
    num = b @ zp
    den = a @ zp
    eq = db_to_linear(bank.vs_db)[:, None] * np.prod(num / den, axis=1)
    breakdown, mic, path = loss_from_spectra(problem, eq)
    return _Trace(bank, b, a, num, den, eq, mic, path, breakdown)


def _path_gradient(problem: Problem, tr: _Trace) -> np.ndarray:
    """Gradient of the total loss with respect to every path spectrum."""
    bands = problem.bands
    mags = tr.breakdown.band_magnitudes
    if np.any(mags <= 0):
        raise SingularGradientError("an equalized band magnitude is zero; |H| is not differentiable there")

    err = mags - problem.target.magnitudes
    dist = np.sqrt(np.sum(err ** 2, axis=-1, keepdims=True))
    coef = np.divide(err, dist * mags * bands.counts, out=np.zeros_like(err), where=dist > 0)
    grad_mic = np.zeros_like(tr.mic)
    grad_mic[:, bands.bin_index] = coef[:, bands.bin_band] * tr.mic[:, bands.bin_index]

    ratios = tr.breakdown.ratios
    diff = ratios.r_hat - ratios.r
    qdist = np.sqrt(np.sum(diff ** 2, axis=0, keepdims=True))
    g_r = np.divide(diff, qdist, out=np.zeros_like(diff), where=qdist > 0)
    eps_hat = ratios.energies_hat
    ref = problem.reference_source
    g_eps = -g_r * eps_hat[ref][None, :] / eps_hat ** 2
    g_eps[ref] += np.sum(g_r / eps_hat, axis=0)

    weights = 2.0 * problem.grid.parseval_weights
    return (problem.gamma1 * grad_mic[None, :, :]
            + problem.gamma2 * g_eps[:, :, None] * weights * tr.path)


def _physical_gradient(problem: Problem, tr: _Trace) -> np.ndarray:
    """dL/d(fc, Q, V0_dB, Vs_dB) in the normalized-vector layout."""
    grad_path = _path_gradient(problem, tr)
    grad_eq = np.sum(np.conj(problem.transfer) * grad_path, axis=1)
    e = np.conj(grad_eq) * tr.eq

    zp_t = problem.grid.z_powers.T
    dl_db = np.real((e[:, None, :] / tr.num) @ zp_t)
    dl_da = -np.real((e[:, None, :] / tr.den) @ zp_t)
    dl_dvs = LN10_OVER_20 * np.real(e.sum(axis=-1))

    bank = tr.bank
    pb, pa = peaking_coefficient_partials(bank.fc, bank.q, bank.gain_db, problem.grid.fs)
    dl_dtheta = np.einsum("sij,sipj->sip", dl_db, pb) + np.einsum("sij,sipj->sip", dl_da, pa)
    return pack(dl_dtheta[..., 0], dl_dtheta[..., 1], dl_dtheta[..., 2], dl_dvs)


def loss_and_gradient(problem: Problem, p: np.ndarray) -> Tuple[LossBreakdown, np.ndarray]:
    """Loss at ``p`` and its exact gradient with respect to ``p``."""
    tr = _trace(problem, p)
    grad = _physical_gradient(problem, tr) * problem.ranges.half_span(problem.n_sources)
    return tr.breakdown, grad


def analytic_gradient(problem: Problem, p: np.ndarray) -> np.ndarray:
    return loss_and_gradient(problem, p)[1]


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def central_difference(
    func: Callable[[np.ndarray], float],
    x0: np.ndarray,
    step: float = 1e-6,
    lower: float = -1.0,
    upper: float = 1.0,
) -> np.ndarray:
    """Central-difference gradient of ``func``.

    Each probe is clamped to [lower, upper]; the difference quotient uses
    the actual distance between the two probes.
    """
    if step <= 0:
        raise ParameterDomainError("finite-difference step must be positive")
    x0 = np.asarray(x0, dtype=float)
    grad = np.zeros(x0.size)
    for j in range(x0.size):
        x = np.copy(x0)
        hi = min(x0[j] + step, upper)
        lo = max(x0[j] - step, lower)

        x[j] = hi
        fplus = func(x)

        x[j] = lo
        fminus = func(x)

        grad[j] = (fplus - fminus) / (hi - lo)
    return grad


def finite_diff_gradient(problem: Problem, p: np.ndarray, step: float = 1e-6) -> np.ndarray:
    logger.debug("Finite-difference gradient over %d parameters, step %g", np.size(p), step)
    return central_difference(lambda x: compute_loss(problem, x).total, p, step)


def parameter_classes(n_bands: int, n_sources: int) -> Dict[str, np.ndarray]:
    """Indices of each parameter class in the normalized-vector layout."""
    block = 3 * n_bands + 1
    offsets = np.arange(n_sources)[:, None] * block
    sections = np.arange(n_bands) * 3
    return {
        "fc": (offsets + sections).ravel(),
        "Q": (offsets + sections + 1).ravel(),
        "V0": (offsets + sections + 2).ravel(),
        "Vs": offsets[:, 0] + block - 1,
    }


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, loss_value: float) -> np.ndarray:
    """|analytic - numeric| / max(|numeric|, floor) per component.

    The floor is tied to the gradient's largest component and to the loss
    level, so components that vanish are judged against the rounding
    error of the differences rather than against zero.
    """
    scale = float(np.max(np.abs(numeric))) if numeric.size else 0.0
    floor = max(1e-3 * scale, 1e-7 * max(1.0, abs(loss_value)))
    return np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)


def gradient_check(
    problem: Problem,
    p: np.ndarray,
    step: float = 1e-6,
    tolerance: float = 1e-5,
    corrupt: Optional[str] = None,
) -> Dict[str, Dict[str, float]]:
    """Compare analytic and central-difference gradients per parameter class.

    ``corrupt`` names a class whose analytic gradient is deliberately
    scaled by 1.001, as a negative control for the checker itself.
    """
    breakdown, analytic = loss_and_gradient(problem, p)
    classes = parameter_classes(problem.n_bands, problem.n_sources)
    if corrupt is not None:
        if corrupt not in classes:
            raise ParameterDomainError(f"unknown parameter class {corrupt!r}")
        analytic = analytic.copy()
        analytic[classes[corrupt]] *= 1.0 + 1e-3
    numeric = finite_diff_gradient(problem, p, step)
    rel = relative_errors(analytic, numeric, breakdown.total)

    report = {}
    for name, idx in classes.items():
        errs = rel[idx]
        worst = int(idx[int(np.argmax(errs))])
        report[name] = {
            "max_rel_error": float(errs.max()),
            "mean_rel_error": float(errs.mean()),
            "worst_index": worst,
            "passed": bool(errs.max() < tolerance),
        }
        logger.debug("gradcheck %s: max %.3e mean %.3e", name, errs.max(), errs.mean())
    return report
