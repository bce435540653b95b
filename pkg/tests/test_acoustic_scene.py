import json
from dataclasses import replace

import numpy as np
import pytest
import soundfile as sf

from conftest import impulse_scene, small_spec
from eqopt.errors import BandError, SceneError
from eqopt.services.acoustic_scene import (
    BandSet,
    Scene,
    TargetResponse,
    band_average,
    build_problem,
    default_gamma2,
    equalized_response,
    load_scene,
    make_bands,
    noise_band_response,
    preprocess,
    synth_scene,
    write_scene,
)
from eqopt.services.filter_core import (
    FrequencyGrid,
    db_to_linear,
    design_peaking_section,
    peaking_coefficients,
    sos_filter,
    sos_response,
)
from eqopt.services.metrics import mse


def _toy_bands(n_bins: int = 10) -> BandSet:
    return BandSet(
        centers=np.array([1.0]),
        lo=np.array([0.0]),
        hi=np.array([1.0]),
        fc_ranges=np.array([[0.0, 1.0]]),
        start=np.array([0]),
        stop=np.array([n_bins]),
    )


@pytest.mark.parametrize("f_low,f_high,count", [(100.0, 14000.0, 22), (20.0, 14000.0, 29)])
def test_third_octave_band_counts(f_low, f_high, count):
    bands = make_bands(f_low, f_high, FrequencyGrid(16384, 48000.0))
    assert len(bands) == count
    assert np.all(bands.counts >= 1)
    assert np.all(bands.start[1:] >= bands.stop[:-1])
    assert bands.fc_ranges[0, 0] == f_low
    assert bands.fc_ranges[-1, 1] == f_high


def test_narrow_range_gives_one_band():
    bands = make_bands(1000.0, 1000.0 + 1e-6, FrequencyGrid(8192, 48000.0))
    assert len(bands) == 1
    assert bands.centers[0] == pytest.approx(1000.0)
    assert bands.counts[0] >= 1


def test_band_without_bins_is_an_error():
    with pytest.raises(BandError):
        make_bands(20.0, 21.0, FrequencyGrid(64, 48000.0))


def test_band_average():
    bands = _toy_bands()
    np.testing.assert_allclose(band_average(np.full(10, 0.7), bands), [0.7])
    spectrum = np.ones(10)
    spectrum[3] = 0.0
    assert band_average(spectrum, bands)[0] == pytest.approx(np.sqrt(0.9))
    assert band_average(spectrum, bands)[0] == pytest.approx(0.9487, abs=1e-4)


def test_targets():
    bands = make_bands(100.0, 14000.0, FrequencyGrid(16384, 48000.0))
    np.testing.assert_allclose(TargetResponse.flat(bands).magnitudes, 1.0)
    tilt = TargetResponse.tilt(bands, 3.0)
    i = int(np.argmin(np.abs(bands.centers - 1000.0)))
    assert tilt.magnitudes[i] == pytest.approx(1.0)
    assert tilt.magnitudes[i + 3] == pytest.approx(10 ** (3 / 20))
    with pytest.raises(BandError):
        TargetResponse(np.array([1.0, 0.0]))


def test_synthetic_scene_is_deterministic():
    a = synth_scene(small_spec(seed=11))
    b = synth_scene(small_spec(seed=11))
    c = synth_scene(small_spec(seed=12))
    np.testing.assert_array_equal(a.rirs, b.rirs)
    assert not np.array_equal(a.rirs, c.rirs)


def test_uncolored_scene_is_flat():
    scene = synth_scene(small_spec(S=1, M=1, coloration_db=0.0, decay_ms=0.0, f_low=100.0, f_high=14000.0))
    problem = build_problem(scene)
    raw = band_average(np.abs(problem.unequalized_spectra()), problem.bands)
    assert mse(raw, problem.target.magnitudes)[1] < 1e-4


def test_colored_scene_has_room_like_excursion():
    spec = small_spec(S=1, M=1, decay_ms=0.0, coloration_db=7.5, f_low=100.0, f_high=14000.0, length=None, seed=4)
    problem = build_problem(synth_scene(spec))
    levels = 20 * np.log10(band_average(np.abs(problem.unequalized_spectra()), problem.bands))
    assert 5.0 < levels.max() - levels.min() < 30.0


def test_preprocess_finds_delay():
    scene = preprocess(impulse_scene(delay=137))
    assert scene.delays.tolist() == [137]
    assert scene.offset_db == pytest.approx(0.0, abs=1e-9)


def test_equal_sources_share_delay(small_scene):
    rirs = np.repeat(small_scene.rirs[:1], 2, axis=0)
    scene = preprocess(replace(small_scene, rirs=rirs))
    assert scene.delays[0] == scene.delays[1]


def test_scaling_shifts_offset_only(small_scene):
    p1 = build_problem(small_scene, n_fft=4096)
    p2 = build_problem(replace(small_scene, rirs=2.0 * small_scene.rirs), n_fft=4096)
    assert p2.scene.offset_db - p1.scene.offset_db == pytest.approx(-20 * np.log10(2.0), abs=1e-9)
    np.testing.assert_allclose(p2.transfer, p1.transfer, rtol=1e-12, atol=1e-15)


def test_all_zero_response_is_rejected(small_scene):
    rirs = small_scene.rirs.copy()
    rirs[1, 0] = 0.0
    with pytest.raises(SceneError):
        preprocess(replace(small_scene, rirs=rirs))


def test_scene_validation():
    with pytest.raises(SceneError):
        Scene(rirs=np.ones((1, 1, 8)), fs=48000.0, f_low=100.0, f_high=30000.0)
    with pytest.raises(SceneError):
        Scene(rirs=np.ones((1, 8)), fs=48000.0)


def test_subset_remaps_reference():
    scene = synth_scene(small_spec(S=3, M=2))
    sub = replace(scene, reference_source=2, reference_mic=1).subset([2, 0], [1])
    assert sub.rirs.shape == (2, 1, scene.length)
    assert sub.reference_source == 0
    assert sub.reference_mic == 0
    np.testing.assert_array_equal(sub.rirs[1, 0], scene.rirs[0, 1])
    with pytest.raises(SceneError):
        scene.subset([5])


def test_default_gamma2():
    assert default_gamma2(8, 2) == 4.0
    assert default_gamma2(1, 1) == 0.0


def test_unity_equalizers_give_summed_response(small_problem):
    ones = np.ones((small_problem.n_sources, small_problem.grid.n_bins))
    mic, path = equalized_response(small_problem, ones)
    np.testing.assert_array_equal(mic, small_problem.transfer.sum(axis=0))
    assert path.shape == small_problem.transfer.shape


def test_cut_twin_flattens_single_peak():
    fs = 48000.0
    x = np.zeros(4096)
    x[0] = 1.0
    b, a = peaking_coefficients([1000.0], [1.0], [6.0], fs)
    h = sos_filter(b, a, 0.0, x)
    scene = Scene(rirs=h[None, None, :], fs=fs, f_low=200.0, f_high=5000.0)
    problem = build_problem(scene)
    cut_b, cut_a = peaking_coefficients([1000.0], [1.0], [-6.0], fs)
    eq = sos_response(cut_b, cut_a, 0.0, problem.grid)[None, :]
    mic, _ = equalized_response(problem, eq)
    level = float(db_to_linear(problem.scene.offset_db))
    in_band = problem.bands.bin_index
    np.testing.assert_allclose(np.abs(mic[0, in_band]), level, rtol=1e-6)


def test_silenced_source_leaves_other_path(small_problem):
    eq = np.ones((2, small_problem.grid.n_bins))
    eq[1] *= 1e-10  # -200 dB
    mic, _ = equalized_response(small_problem, eq)
    np.testing.assert_allclose(mic, small_problem.transfer[0], atol=1e-8)


def test_response_is_linear_in_sources(small_problem):
    rng = np.random.default_rng(0)
    eq = rng.standard_normal((2, small_problem.grid.n_bins)) + 1j * rng.standard_normal((2, small_problem.grid.n_bins))
    mic, path = equalized_response(small_problem, eq)
    np.testing.assert_allclose(mic, path[0] + path[1])


def test_shifting_all_paths_keeps_band_response(small_scene):
    pad = np.zeros(small_scene.rirs.shape[:2] + (40,))
    shifted = np.concatenate([pad, small_scene.rirs], axis=-1)
    p1 = build_problem(small_scene, n_fft=4096)
    p2 = build_problem(replace(small_scene, rirs=shifted), n_fft=4096)
    assert (p2.scene.delays - p1.scene.delays).tolist() == [40, 40]
    m1 = band_average(np.abs(p1.unequalized_spectra()), p1.bands)
    m2 = band_average(np.abs(p2.unequalized_spectra()), p2.bands)
    np.testing.assert_allclose(m1, m2, rtol=1e-9)


def _write_wav(path, data, fs):
    sf.write(str(path), data, fs, subtype="FLOAT")


def test_load_single_path(tmp_path):
    h = np.zeros(512)
    h[10] = 0.5
    _write_wav(tmp_path / "h.wav", h, 48000)
    manifest = {"fs": 48000, "rirs": [{"source": 0, "mic": 0, "path": "h.wav"}]}
    (tmp_path / "scene.json").write_text(json.dumps(manifest))
    scene = load_scene(str(tmp_path / "scene.json"))
    assert (scene.n_sources, scene.n_mics) == (1, 1)
    assert scene.label == "scene"
    np.testing.assert_allclose(scene.rirs[0, 0], h)


def test_load_written_scene(tmp_path):
    scene = synth_scene(small_spec(S=8, M=2, length=256, max_delay=100, decay_ms=0.0))
    loaded = load_scene(write_scene(str(tmp_path), scene))
    assert (loaded.n_sources, loaded.n_mics) == (8, 2)
    np.testing.assert_array_equal(loaded.rirs, scene.rirs.astype(np.float32).astype(float))


def test_write_needs_integer_sample_rate(tmp_path):
    scene = impulse_scene(fs=44100.5)
    with pytest.raises(SceneError):
        write_scene(str(tmp_path / "scene"), scene)
    assert not (tmp_path / "scene").exists()


def test_load_rejects_bad_manifests(tmp_path):
    h = np.zeros(64)
    h[0] = 1.0
    _write_wav(tmp_path / "a.wav", h, 48000)
    _write_wav(tmp_path / "b.wav", h, 44100)

    mixed = {"fs": 48000, "rirs": [{"source": 0, "mic": 0, "path": "a.wav"},
                                   {"source": 0, "mic": 1, "path": "b.wav"}]}
    (tmp_path / "mixed.json").write_text(json.dumps(mixed))
    with pytest.raises(SceneError):
        load_scene(str(tmp_path / "mixed.json"))

    missing = {"fs": 48000, "rirs": [{"source": 0, "mic": 0, "path": "a.wav"},
                                     {"source": 1, "mic": 1, "path": "a.wav"}]}
    (tmp_path / "missing.json").write_text(json.dumps(missing))
    with pytest.raises(SceneError):
        load_scene(str(tmp_path / "missing.json"))

    (tmp_path / "empty.json").write_text(json.dumps({"fs": 48000, "rirs": []}))
    with pytest.raises(SceneError):
        load_scene(str(tmp_path / "empty.json"))

    with pytest.raises(SceneError):
        load_scene(str(tmp_path / "nope.json"))


def test_noise_measurement_matches_impulse_response():
    spec = small_spec(S=1, M=1, seed=5)
    problem = build_problem(synth_scene(spec), n_fft=4096)
    rng = np.random.default_rng(1)
    nb = problem.n_bands
    b, a = peaking_coefficients(
        np.sqrt(problem.ranges.fc_bands[:, 0] * problem.ranges.fc_bands[:, 1]),
        np.full(nb, 1.0),
        rng.uniform(-3, 3, nb),
        problem.grid.fs,
    )
    b, a, vs = b[None], a[None], np.array([1.0])
    mic, _ = equalized_response(problem, sos_response(b, a, vs, problem.grid))
    impulse = band_average(np.abs(mic), problem.bands)
    measured = noise_band_response(problem, b, a, vs, seconds=4.0, seed=0)
    assert np.max(np.abs(20 * np.log10(measured / impulse[0]))) < 2.0


def test_design_section_matches_array_design():
    c = design_peaking_section(750.0, 1.3, -2.0, 48000.0)
    b, a = peaking_coefficients(750.0, 1.3, -2.0, 48000.0)
    np.testing.assert_array_equal(c.b, b)
    np.testing.assert_array_equal(c.a, a)
