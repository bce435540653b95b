import warnings
from dataclasses import replace

import numpy as np
import pytest

from conftest import impulse_scene, small_spec
from eqopt.errors import CoefficientFileError, ParameterDomainError, RegularizationError
from eqopt.schemas import BiasNetConfig, DsmConfig, FdConfig
from eqopt.services.acoustic_scene import band_average, build_problem, equalized_response, synth_scene
from eqopt.services.baselines import (
    FirEqualizer,
    dsm_initial_bank,
    dsm_optimize,
    fd_design,
    fd_inverse_spectra,
    fd_target_spectrum,
    fir_equalized_response,
    fir_ops,
    fir_spectra,
    ops_per_sample,
    read_fir_dir,
    sos_ops,
    write_fir_dir,
)
from eqopt.services.biasnet import optimize
from eqopt.services.filter_core import Equalizer, EqualizerBank, ParametricSection
from eqopt.services.loss_grad import compute_loss
from eqopt.services.metrics import mse


@pytest.fixture
def unit_problem():
    return build_problem(impulse_scene(), n_fft=4096)


def test_dsm_without_iterations_returns_start(small_problem):
    config = DsmConfig(iterations=0, seed=4)
    result = dsm_optimize(small_problem, config)
    start = dsm_initial_bank(small_problem, config.init_gain_db, np.random.default_rng(4))
    np.testing.assert_array_equal(result.bank.fc, start.fc)
    np.testing.assert_array_equal(result.bank.gain_db, start.gain_db)
    np.testing.assert_array_equal(result.bank.vs_db, start.vs_db)
    assert result.iterations == 0
    assert len(result.losses) == 1


def test_dsm_initial_bank(small_problem):
    bank = dsm_initial_bank(small_problem, 0.1, np.random.default_rng(0))
    lo, hi = small_problem.ranges.fc_bands.T
    np.testing.assert_allclose(bank.fc[0], np.sqrt(lo * hi))
    np.testing.assert_allclose(bank.q, 1 / np.sqrt(2))
    assert np.all(np.abs(bank.gain_db) <= 0.1)
    assert np.all(bank.gain_db != 0.0)


def test_dsm_history_never_increases(small_problem):
    result = dsm_optimize(small_problem, DsmConfig(iterations=300, seed=1, log_every=100))
    assert np.all(np.diff(result.losses) <= 0.0)
    assert result.losses[-1] < result.losses[0]
    assert result.best.total == result.losses[-1]
    assert [h.iteration for h in result.history] == [0, 100, 200, 300]
    assert compute_loss(small_problem, result.bank).total == pytest.approx(result.best.total, rel=1e-12)


def test_dsm_respects_bounds(small_problem):
    result = dsm_optimize(small_problem, DsmConfig(iterations=200, gamma=0.5, seed=2))
    lo, hi = small_problem.ranges.bounds(small_problem.n_sources)
    bank = result.bank
    values = np.concatenate([
        np.stack([bank.fc, bank.q, bank.gain_db], axis=-1).reshape(bank.n_sources, -1),
        bank.vs_db[:, None],
    ], axis=1).ravel()
    assert np.all(values >= lo) and np.all(values <= hi)


def test_dsm_is_deterministic(small_problem):
    a = dsm_optimize(small_problem, DsmConfig(iterations=50, seed=9))
    b = dsm_optimize(small_problem, DsmConfig(iterations=50, seed=9))
    np.testing.assert_array_equal(a.losses, b.losses)


def test_identity_inversion_gives_centred_impulse(unit_problem):
    ones = np.ones(unit_problem.grid.n_bins)
    g = fd_inverse_spectra(unit_problem, beta=0.0, target_spectrum=ones)
    np.testing.assert_allclose(g, 1.0, atol=1e-12)
    fir = fd_design(unit_problem, fir_len=1024, beta=0.0, config=FdConfig(fir_len=1024, beta=0.0, window_alpha=0.0),
                    target_spectrum=ones)
    assert int(np.argmax(np.abs(fir.taps[0]))) == 512
    assert fir.taps[0, 512] == pytest.approx(1.0, abs=1e-12)
    assert np.max(np.abs(np.delete(fir.taps[0], 512))) < 1e-12


def test_double_gain_path_is_halved(unit_problem):
    doubled = replace(unit_problem, transfer=2.0 * np.ones_like(unit_problem.transfer))
    g = fd_inverse_spectra(doubled, beta=0.0, target_spectrum=np.ones(unit_problem.grid.n_bins))
    np.testing.assert_allclose(g, 0.5, atol=1e-12)


def test_singular_system_needs_regularization(small_problem):
    transfer = small_problem.transfer.copy()
    transfer[1] = transfer[0]
    singular = replace(small_problem, transfer=transfer)
    with pytest.raises(RegularizationError):
        fd_inverse_spectra(singular, beta=0.0)
    g = fd_inverse_spectra(singular, beta=1e-4)
    assert np.all(np.isfinite(g))
    with pytest.raises(ParameterDomainError):
        fd_inverse_spectra(small_problem, beta=-1.0)


def test_regularization_shrinks_the_inverse(unit_problem):
    ones = np.ones(unit_problem.grid.n_bins)
    weak = fd_inverse_spectra(unit_problem, beta=1e-4, target_spectrum=ones)
    strong = fd_inverse_spectra(unit_problem, beta=1.0, target_spectrum=ones)
    np.testing.assert_allclose(strong, 0.5, rtol=1e-12)
    assert np.all(np.abs(strong) < np.abs(weak))


def test_target_spectrum_rolls_off(small_problem):
    d = fd_target_spectrum(small_problem)
    freqs = small_problem.grid.freqs
    inside = (freqs >= small_problem.scene.f_low) & (freqs <= small_problem.scene.f_high)
    np.testing.assert_allclose(d[inside], 1.0)
    assert d[0] == 0.0
    assert np.all(d[freqs > small_problem.scene.f_high * 2 ** (1 / 3)] == 0.0)


def test_fd_flattens_the_colored_scene(siso_problem):
    fir = fd_design(siso_problem, fir_len=4096, beta=1e-4)
    mic, _ = fir_equalized_response(siso_problem, fir)
    mags = band_average(np.abs(mic), siso_problem.bands)
    raw = band_average(np.abs(siso_problem.unequalized_spectra()), siso_problem.bands)
    equalized = mse(mags, siso_problem.target.magnitudes)[1]
    assert equalized <= 1e-3
    assert equalized < mse(raw, siso_problem.target.magnitudes)[1]


def test_longer_filters_equalize_better(siso_problem):
    short = fd_design(siso_problem, fir_len=64, beta=1e-4)
    long = fd_design(siso_problem, fir_len=4096, beta=1e-4)

    def score(fir):
        mic, _ = fir_equalized_response(siso_problem, fir)
        return mse(band_average(np.abs(mic), siso_problem.bands), siso_problem.target.magnitudes)[1]

    assert score(long) < score(short)


def test_fir_length_is_checked(unit_problem):
    with pytest.raises(ParameterDomainError):
        fd_design(unit_problem, fir_len=8192)


def test_unit_impulse_fir_leaves_scene_unchanged(small_problem):
    taps = np.zeros((2, 16))
    taps[:, 0] = 1.0
    mic, _ = fir_equalized_response(small_problem, FirEqualizer(taps))
    np.testing.assert_allclose(mic, small_problem.unequalized_spectra(), atol=1e-12)


def test_fir_response_is_linear_in_taps(small_problem):
    rng = np.random.default_rng(0)
    f1 = FirEqualizer(rng.standard_normal((2, 32)))
    f2 = FirEqualizer(rng.standard_normal((2, 32)))
    grid = small_problem.grid
    np.testing.assert_allclose(fir_spectra(FirEqualizer(2 * f1.taps - f2.taps), grid),
                               2 * fir_spectra(f1, grid) - fir_spectra(f2, grid), atol=1e-10)


def test_reciprocal_fir_flattens_single_path(unit_problem):
    n = unit_problem.grid.n_fft
    h = np.zeros(n)
    h[:3] = [1.0, 0.5, 0.25]
    colored = replace(unit_problem, transfer=np.fft.rfft(h)[None, None, :])
    taps = np.fft.irfft(1.0 / np.fft.rfft(h), n=n)
    mic, _ = equalized_response(colored, fir_spectra(FirEqualizer(taps), unit_problem.grid))
    np.testing.assert_allclose(np.abs(mic[0, unit_problem.bands.bin_index]), 1.0, rtol=1e-9)


@pytest.mark.parametrize("obj,ops", [
    (FirEqualizer(np.zeros((1, 8192))), 16383),
    (FirEqualizer(np.zeros((1, 1024))), 2047),
    (np.zeros(1024), 2047),
    (Equalizer(0.0, [ParametricSection(1000.0, 1.0, 0.0)] * 22), 198),
    (Equalizer(0.0, [ParametricSection(1000.0, 1.0, 0.0)] * 29), 261),
])
def test_operation_counts(obj, ops):
    assert ops_per_sample(obj) == ops


def test_operation_counts_sum_over_sources():
    bank = EqualizerBank(np.full((8, 22), 1000.0), np.ones((8, 22)), np.zeros((8, 22)), np.zeros(8))
    assert ops_per_sample(bank) == 8 * 198
    assert ops_per_sample([np.zeros(4), np.zeros(8)]) == fir_ops(4) + fir_ops(8)
    assert sos_ops(0) == 0


def test_fir_files_round_trip(tmp_path):
    taps = np.random.default_rng(1).standard_normal((2, 100))
    write_fir_dir(str(tmp_path), FirEqualizer(taps))
    assert len((tmp_path / "source_00.txt").read_text().splitlines()) == 100
    np.testing.assert_array_equal(read_fir_dir(str(tmp_path), 2, 100).taps, taps)
    with pytest.raises(CoefficientFileError):
        read_fir_dir(str(tmp_path), 2, 99)
    with pytest.raises(CoefficientFileError):
        read_fir_dir(str(tmp_path), 3)


def test_target_spectrum_is_warning_free(small_problem):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        d = fd_target_spectrum(small_problem)
    assert np.all(np.isfinite(d))


@pytest.mark.slow
def test_method_ordering_on_room_scene():
    problem = build_problem(synth_scene(small_spec(S=8, M=2, f_low=100.0, f_high=14000.0,
                                                   length=None, decay_ms=40.0, seed=1)), n_fft=8192)
    target = problem.target.magnitudes

    def score(mags):
        return mse(mags, target)[1]

    def fir_score(fir_len):
        mic, _ = fir_equalized_response(problem, fd_design(problem, fir_len=fir_len, beta=1e-4))
        return score(band_average(np.abs(mic), problem.bands))

    raw = score(band_average(np.abs(problem.unequalized_spectra()), problem.bands))
    dsm = dsm_optimize(problem, DsmConfig(iterations=10_000, seed=0))
    deep = optimize(problem, BiasNetConfig(iterations=10_000, seed=0))
    fd_long, fd_short = fir_score(8192), fir_score(1024)
    assert np.all(np.diff(dsm.losses) <= 0.0)
    assert score(deep.best.band_magnitudes) <= 2.0 * fd_long
    assert fd_long < fd_short < score(dsm.best.band_magnitudes) < raw
