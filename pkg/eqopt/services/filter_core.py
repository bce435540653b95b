"""
Parametric peaking filter design and equalizer evaluation.

This module holds the closed-form peaking biquad (boost and cut forms),
its partial derivatives, the affine (de)normalization between the
optimizer's [-1, 1] outputs and physical filter parameters, and the two
evaluation paths for an equalizer cascade: the frequency-domain product of
section responses and the time-domain difference equation.

Arrays of coefficients are laid out with the six biquad coefficients split
into ``b`` and ``a`` arrays whose last axis has length 3. ``a[..., 0]`` is
always 1.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal

from ..errors import CoefficientFileError, ParameterDomainError
from ..schemas import ParamRangeConfig

logger = logging.getLogger(__name__)

LN10_OVER_20 = math.log(10.0) / 20.0
MIN_FFT_SIZE = 8192
PARAMS_PER_SECTION = 3  # fc, Q, V0_dB


def db_to_linear(value_db):
    return np.power(10.0, np.asarray(value_db, dtype=float) / 20.0)


def next_pow2(n: int) -> int:
    return 1 << max(int(n) - 1, 0).bit_length()


# ---------------------------------------------------------------------------
# Frequency grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrequencyGrid:
    """One-sided DFT grid of size ``n_fft`` at sample rate ``fs``."""

    n_fft: int
    fs: float

    def __post_init__(self) -> None:
        if self.n_fft < 2 or self.n_fft & (self.n_fft - 1):
            raise ParameterDomainError(f"DFT size must be a power of two, got {self.n_fft}")
        if self.fs <= 0:
            raise ParameterDomainError(f"sample rate must be positive, got {self.fs}")

    @classmethod
    def for_length(cls, length: int, fs: float, n_fft: Optional[int] = None) -> "FrequencyGrid":
        """Grid for impulse responses of ``length`` samples.

        Without an explicit size, the smallest power of two holding twice the
        response length is used, with a floor of 8192.
        """
        if n_fft is None:
            n_fft = max(MIN_FFT_SIZE, next_pow2(2 * length))
        elif n_fft < length:
            raise ParameterDomainError(
                f"DFT size {n_fft} is shorter than the longest response ({length} samples)"
            )
        return cls(int(n_fft), float(fs))

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def df(self) -> float:
        return self.fs / self.n_fft

    @cached_property
    def freqs(self) -> np.ndarray:
        return np.fft.rfftfreq(self.n_fft, d=1.0 / self.fs)

    @cached_property
    def z(self) -> np.ndarray:
        """e^{-j 2 pi k / N} for every one-sided bin."""
        k = np.arange(self.n_bins)
        return np.exp(-2j * np.pi * k / self.n_fft)

    @cached_property
    def z_powers(self) -> np.ndarray:
        """Rows 1, z, z^2 so that ``coeffs @ z_powers`` evaluates a quadratic."""
        z = self.z
        return np.stack([np.ones_like(z), z, z * z])

    @cached_property
    def parseval_weights(self) -> np.ndarray:
        """Weights turning one-sided |X(k)|^2 into sum_n x(n)^2."""
        w = np.full(self.n_bins, 2.0 / self.n_fft)
        w[0] = 1.0 / self.n_fft
        w[-1] = 1.0 / self.n_fft
        return w

    def rfft(self, x: np.ndarray) -> np.ndarray:
        return np.fft.rfft(x, n=self.n_fft, axis=-1)


# ---------------------------------------------------------------------------
# Peaking biquad design
# ---------------------------------------------------------------------------

def _check_section_domain(fc: np.ndarray, q: np.ndarray, fs: float) -> None:
    if np.any(~np.isfinite(fc)) or np.any(fc <= 0) or np.any(fc >= fs / 2):
        raise ParameterDomainError(f"center frequency must lie in (0, {fs / 2:g}) Hz")
    if np.any(~np.isfinite(q)) or np.any(q <= 0):
        raise ParameterDomainError("quality factor must be positive")


def _raw_polynomials(fc, q, gain_db, fs):
    fc = np.asarray(fc, dtype=float)
    q = np.asarray(q, dtype=float)
    gain_db = np.asarray(gain_db, dtype=float)
    _check_section_domain(fc, q, fs)
    k = np.tan(np.pi * fc / fs)
    alpha = k / q
    g_num = db_to_linear(np.maximum(gain_db, 0.0))
    g_den = db_to_linear(np.maximum(-gain_db, 0.0))
    k2 = k * k
    mid = 2.0 * (k2 - 1.0)
    num = np.stack([1.0 + g_num * alpha + k2, mid, 1.0 - g_num * alpha + k2], axis=-1)
    den = np.stack([1.0 + g_den * alpha + k2, mid, 1.0 - g_den * alpha + k2], axis=-1)
    return k, alpha, g_num, g_den, num, den


def peaking_coefficients(fc, q, gain_db, fs: float) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized peaking filter design.

    Boost (gain_db >= 0) puts the linear gain in the numerator, cut puts its
    reciprocal in the denominator, so a boost and a cut of equal size are
    exact reciprocals. Both collapse to the identity at 0 dB.

    Returns ``(b, a)`` with shape ``fc.shape + (3,)`` and ``a[..., 0] == 1``.
    """
    _, _, _, _, num, den = _raw_polynomials(fc, q, gain_db, fs)
    d0 = den[..., :1]
    b = num / d0
    a = den / d0
    a[..., 0] = 1.0
    return b, a


def peaking_coefficient_partials(fc, q, gain_db, fs: float) -> Tuple[np.ndarray, np.ndarray]:
    """Closed-form partial derivatives of the peaking coefficients.

    Returns ``(db, da)`` with shape ``fc.shape + (3, 3)``: axis -2 runs over
    (fc, Q, V0_dB) and axis -1 over the coefficient index. At exactly 0 dB
    the boost branch is differentiated.
    """
    k, alpha, g_num, g_den, num, den = _raw_polynomials(fc, q, gain_db, fs)
    q = np.asarray(q, dtype=float)
    gain_db = np.asarray(gain_db, dtype=float)

    dk_dfc = (np.pi / fs) * (1.0 + k * k)
    dalpha_dfc = dk_dfc / q
    dalpha_dq = -k / (q * q)
    boost = gain_db >= 0.0
    dgnum = np.where(boost, g_num * LN10_OVER_20, 0.0)
    dgden = np.where(boost, 0.0, -g_den * LN10_OVER_20)
    zero = np.zeros_like(k)

    def poly_partials(g, dg):
        d_fc = np.stack([g * dalpha_dfc + 2 * k * dk_dfc,
                         4 * k * dk_dfc,
                         -g * dalpha_dfc + 2 * k * dk_dfc], axis=-1)
        d_q = np.stack([g * dalpha_dq, zero, -g * dalpha_dq], axis=-1)
        d_v = np.stack([alpha * dg, zero, -alpha * dg], axis=-1)
        return np.stack([d_fc, d_q, d_v], axis=-2)

    dnum = poly_partials(g_num, dgnum)
    dden = poly_partials(g_den, dgden)

    d0 = den[..., None, :1]
    dd0 = dden[..., :1]
    num_ = num[..., None, :]
    den_ = den[..., None, :]
    db = (dnum * d0 - num_ * dd0) / (d0 * d0)
    da = (dden * d0 - den_ * dd0) / (d0 * d0)
    da[..., 0] = 0.0
    return db, da


@dataclass(frozen=True)
class BiquadCoeffs:
    b0: float
    b1: float
    b2: float
    a0: float
    a1: float
    a2: float

    @classmethod
    def from_arrays(cls, b: Sequence[float], a: Sequence[float]) -> "BiquadCoeffs":
        return cls(float(b[0]), float(b[1]), float(b[2]), float(a[0]), float(a[1]), float(a[2]))

    @classmethod
    def unity(cls) -> "BiquadCoeffs":
        return cls(1.0, 0.0, 0.0, 1.0, 0.0, 0.0)

    @property
    def b(self) -> np.ndarray:
        return np.array([self.b0, self.b1, self.b2])

    @property
    def a(self) -> np.ndarray:
        return np.array([self.a0, self.a1, self.a2])

    def poles(self) -> np.ndarray:
        return np.roots(self.a)

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))


def design_peaking_section(fc: float, q: float, gain_db: float, fs: float) -> BiquadCoeffs:
    b, a = peaking_coefficients(fc, q, gain_db, fs)
    return BiquadCoeffs.from_arrays(b, a)


@dataclass(frozen=True)
class ParametricSection:
    fc: float
    q: float
    gain_db: float
    band_index: int = 0

    def coefficients(self, fs: float) -> BiquadCoeffs:
        return design_peaking_section(self.fc, self.q, self.gain_db, fs)


@dataclass
class Equalizer:
    """Channel gain followed by a cascade of peaking sections."""

    vs_db: float = 0.0
    sections: List[ParametricSection] = field(default_factory=list)

    def coefficient_arrays(self, fs: float) -> Tuple[np.ndarray, np.ndarray]:
        if not self.sections:
            return np.zeros((0, 3)), np.zeros((0, 3))
        return peaking_coefficients(
            [s.fc for s in self.sections],
            [s.q for s in self.sections],
            [s.gain_db for s in self.sections],
            fs,
        )


@dataclass
class EqualizerBank:
    """Parameters of S equalizers that share one band layout.

    ``fc``, ``q`` and ``gain_db`` have shape (S, n_bands); ``vs_db`` has
    shape (S,). Iterating yields one :class:`Equalizer` per source.
    """

    fc: np.ndarray
    q: np.ndarray
    gain_db: np.ndarray
    vs_db: np.ndarray

    def __post_init__(self) -> None:
        self.fc = np.atleast_2d(np.asarray(self.fc, dtype=float))
        self.q = np.atleast_2d(np.asarray(self.q, dtype=float))
        self.gain_db = np.atleast_2d(np.asarray(self.gain_db, dtype=float))
        self.vs_db = np.atleast_1d(np.asarray(self.vs_db, dtype=float))
        if not (self.fc.shape == self.q.shape == self.gain_db.shape):
            raise ParameterDomainError("fc, Q and gain arrays must share one shape")
        if self.vs_db.shape != (self.fc.shape[0],):
            raise ParameterDomainError("one channel gain per source is required")

    @property
    def n_sources(self) -> int:
        return self.fc.shape[0]

    @property
    def n_bands(self) -> int:
        return self.fc.shape[1]

    def __len__(self) -> int:
        return self.n_sources

    def __getitem__(self, s: int) -> Equalizer:
        sections = [
            ParametricSection(float(self.fc[s, i]), float(self.q[s, i]), float(self.gain_db[s, i]), i)
            for i in range(self.n_bands)
        ]
        return Equalizer(float(self.vs_db[s]), sections)

    def __iter__(self) -> Iterator[Equalizer]:
        for s in range(self.n_sources):
            yield self[s]

    @classmethod
    def from_equalizers(cls, eqs: Sequence[Equalizer]) -> "EqualizerBank":
        counts = {len(eq.sections) for eq in eqs}
        if len(counts) != 1:
            raise ParameterDomainError("equalizers must all have the same number of sections")
        return cls(
            fc=[[s.fc for s in eq.sections] for eq in eqs],
            q=[[s.q for s in eq.sections] for eq in eqs],
            gain_db=[[s.gain_db for s in eq.sections] for eq in eqs],
            vs_db=[eq.vs_db for eq in eqs],
        )

    def coefficients(self, fs: float) -> Tuple[np.ndarray, np.ndarray]:
        """(b, a) arrays of shape (S, n_bands, 3)."""
        return peaking_coefficients(self.fc, self.q, self.gain_db, fs)


# ---------------------------------------------------------------------------
# Parameter ranges and (de)normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamRanges:
    """Physical ranges for every normalized parameter.

    ``fc_bands`` has one ``[fc_min, fc_max]`` row per band. The normalized
    vector holds, per source, ``(fc, Q, V0_dB)`` for each band followed by
    ``Vs_dB``.
    """

    fc_bands: np.ndarray
    q: Tuple[float, float] = (0.05, 5.0)
    gain_db: Tuple[float, float] = (-10.0, 10.0)
    vs_db: Tuple[float, float] = (-20.0, 20.0)

    def __post_init__(self) -> None:
        bands = np.asarray(self.fc_bands, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "fc_bands", bands)
        if np.any(bands[:, 0] >= bands[:, 1]):
            raise ParameterDomainError("every fc band needs fc_min < fc_max")
        if np.any(bands[1:, 0] < bands[:-1, 1]):
            raise ParameterDomainError("fc bands must be sorted and non-overlapping")
        for lo, hi in (self.q, self.gain_db, self.vs_db):
            if not lo < hi:
                raise ParameterDomainError("parameter ranges need min < max")

    @classmethod
    def from_config(cls, fc_bands: np.ndarray, config: Optional[ParamRangeConfig] = None) -> "ParamRanges":
        config = config or ParamRangeConfig()
        return cls(
            fc_bands=fc_bands,
            q=(config.q_min, config.q_max),
            gain_db=(config.gain_min_db, config.gain_max_db),
            vs_db=(config.vs_min_db, config.vs_max_db),
        )

    @property
    def n_bands(self) -> int:
        return self.fc_bands.shape[0]

    @property
    def block_size(self) -> int:
        return PARAMS_PER_SECTION * self.n_bands + 1

    def n_params(self, n_sources: int) -> int:
        return self.block_size * n_sources

    def n_sources_for(self, n_params: int) -> int:
        if n_params % self.block_size:
            raise ParameterDomainError(
                f"{n_params} parameters do not split into blocks of {self.block_size}"
            )
        return n_params // self.block_size

    def bounds(self, n_sources: int) -> Tuple[np.ndarray, np.ndarray]:
        """Lower and upper physical bounds in normalized-vector layout."""
        nb = self.n_bands
        lo = np.empty((nb, PARAMS_PER_SECTION))
        hi = np.empty((nb, PARAMS_PER_SECTION))
        lo[:, 0], hi[:, 0] = self.fc_bands[:, 0], self.fc_bands[:, 1]
        lo[:, 1], hi[:, 1] = self.q
        lo[:, 2], hi[:, 2] = self.gain_db
        block_lo = np.append(lo.ravel(), self.vs_db[0])
        block_hi = np.append(hi.ravel(), self.vs_db[1])
        return np.tile(block_lo, n_sources), np.tile(block_hi, n_sources)

    def half_span(self, n_sources: int) -> np.ndarray:
        lo, hi = self.bounds(n_sources)
        return (hi - lo) / 2.0


def unpack(values: np.ndarray, n_bands: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Split a flat vector in parameter layout into (fc, Q, V0, Vs) arrays."""
    block = PARAMS_PER_SECTION * n_bands + 1
    blocks = np.asarray(values, dtype=float).reshape(-1, block)
    sections = blocks[:, :-1].reshape(blocks.shape[0], n_bands, PARAMS_PER_SECTION)
    return sections[..., 0], sections[..., 1], sections[..., 2], blocks[:, -1]


def pack(fc: np.ndarray, q: np.ndarray, gain_db: np.ndarray, vs_db: np.ndarray) -> np.ndarray:
    sections = np.stack([fc, q, gain_db], axis=-1).reshape(np.shape(fc)[0], -1)
    return np.concatenate([sections, np.asarray(vs_db, dtype=float)[:, None]], axis=1).ravel()


def denormalize(p: np.ndarray, ranges: ParamRanges) -> EqualizerBank:
    """Affine map from [-1, 1] to physical parameters.

    Raises ParameterDomainError when any component leaves [-1, 1], which
    means the producer of ``p`` is broken.
    """
    p = np.asarray(p, dtype=float).ravel()
    if np.any(~np.isfinite(p)) or np.any(np.abs(p) > 1.0):
        raise ParameterDomainError("normalized parameters must lie in [-1, 1]")
    n_sources = ranges.n_sources_for(p.size)
    lo, hi = ranges.bounds(n_sources)
    values = (hi - lo) / 2.0 * p + (hi + lo) / 2.0
    return EqualizerBank(*unpack(values, ranges.n_bands))


def normalize(bank: EqualizerBank, ranges: ParamRanges) -> np.ndarray:
    """Inverse of :func:`denormalize`, clipped to [-1, 1]."""
    if bank.n_bands != ranges.n_bands:
        raise ParameterDomainError(
            f"bank has {bank.n_bands} sections per source, ranges describe {ranges.n_bands} bands"
        )
    values = pack(bank.fc, bank.q, bank.gain_db, bank.vs_db)
    lo, hi = ranges.bounds(bank.n_sources)
    return np.clip((2.0 * values - (hi + lo)) / (hi - lo), -1.0, 1.0)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def section_response(coeffs: BiquadCoeffs, grid: FrequencyGrid) -> np.ndarray:
    return (coeffs.b @ grid.z_powers) / (coeffs.a @ grid.z_powers)


def sos_response(b: np.ndarray, a: np.ndarray, vs_db, grid: FrequencyGrid) -> np.ndarray:
    """Spectrum of a gain-scaled cascade.

    ``b`` and ``a`` have shape (..., n_sections, 3) and ``vs_db`` the
    leading shape; the result has shape (..., n_bins).
    """
    b = np.asarray(b, dtype=float)
    a = np.asarray(a, dtype=float)
    gain = db_to_linear(vs_db)[..., None]
    if b.shape[-2] == 0:
        return np.broadcast_to(gain, gain.shape[:-1] + (grid.n_bins,)).astype(complex)
    ratio = (b @ grid.z_powers) / (a @ grid.z_powers)
    return gain * np.prod(ratio, axis=-2)


def equalizer_response(eq: Equalizer, grid: FrequencyGrid) -> np.ndarray:
    b, a = eq.coefficient_arrays(grid.fs)
    return sos_response(b, a, eq.vs_db, grid)


def bank_response(bank: EqualizerBank, grid: FrequencyGrid) -> np.ndarray:
    """(S, n_bins) spectra of every equalizer in the bank."""
    b, a = bank.coefficients(grid.fs)
    return sos_response(b, a, bank.vs_db, grid)


def sos_filter(b: np.ndarray, a: np.ndarray, vs_db: float, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = x * float(db_to_linear(vs_db))
    if len(b) == 0:
        return y
    return signal.sosfilt(np.concatenate([b, a], axis=-1), y)


def filter_time_domain(eq: Equalizer, x: np.ndarray, fs: float) -> np.ndarray:
    """Run the cascade as direct-form difference equations, then the gain."""
    b, a = eq.coefficient_arrays(fs)
    return sos_filter(b, a, eq.vs_db, x)


# ---------------------------------------------------------------------------
# Coefficient files
# ---------------------------------------------------------------------------

def coefficient_file_name(source: int) -> str:
    return f"source_{source:02d}.txt"


def write_coefficient_file(path: str, vs_db: float, b: np.ndarray, a: np.ndarray) -> None:
    lines = [f"gain_dB {float(vs_db):.17g}"]
    for bi, ai in zip(b, a):
        lines.append(" ".join(f"{float(v):.17g}" for v in (*bi, *ai)))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_coefficient_file(path: str) -> Tuple[float, np.ndarray, np.ndarray]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except OSError as exc:
        raise CoefficientFileError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise CoefficientFileError(f"{path}: empty coefficient file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != "gain_dB":
        raise CoefficientFileError(f"{path}: first line must be 'gain_dB <value>'")
    try:
        vs_db = float(head[1])
        rows = [[float(v) for v in ln.split()] for ln in lines[1:]]
    except ValueError as exc:
        raise CoefficientFileError(f"{path}: {exc}") from exc
    for i, row in enumerate(rows, start=2):
        if len(row) != 6:
            raise CoefficientFileError(f"{path}:{i}: expected 6 coefficients, found {len(row)}")
    arr = np.asarray(rows, dtype=float).reshape(-1, 6)
    if np.any(arr[:, 3] != 1.0):
        raise CoefficientFileError(f"{path}: a0 must be 1")
    return vs_db, arr[:, :3], arr[:, 3:]


def write_bank_coefficients(directory: str, bank: EqualizerBank, fs: float) -> List[str]:
    os.makedirs(directory, exist_ok=True)
    b, a = bank.coefficients(fs)
    paths = []
    for s in range(bank.n_sources):
        path = os.path.join(directory, coefficient_file_name(s))
        write_coefficient_file(path, bank.vs_db[s], b[s], a[s])
        paths.append(path)
    return paths


def read_coefficient_dir(directory: str, n_sources: int, n_sections: Optional[int] = None):
    """Read ``source_XX.txt`` for every source.

    Returns ``(vs_db, b, a)`` with shapes (S,), (S, n, 3), (S, n, 3).
    """
    gains, bs, as_ = [], [], []
    for s in range(n_sources):
        path = os.path.join(directory, coefficient_file_name(s))
        if not os.path.exists(path):
            raise CoefficientFileError(f"missing coefficient file {path}")
        vs_db, b, a = read_coefficient_file(path)
        if n_sections is not None and len(b) != n_sections:
            raise CoefficientFileError(
                f"{path}: {len(b)} sections, the scene has {n_sections} bands"
            )
        gains.append(vs_db)
        bs.append(b)
        as_.append(a)
    if len({len(b) for b in bs}) > 1:
        raise CoefficientFileError("coefficient files disagree on the section count")
    return np.asarray(gains), np.stack(bs), np.stack(as_)
