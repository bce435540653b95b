from dataclasses import replace

import numpy as np
import pytest

from conftest import small_spec
from eqopt.errors import NonFiniteGradientError, ParameterDomainError
from eqopt.schemas import BiasNetConfig
from eqopt.services.acoustic_scene import Scene, band_average, build_problem, synth_scene
from eqopt.services.biasnet import (
    AdamState,
    Network,
    backward,
    forward,
    forward_with_cache,
    init_network,
    optimize,
    parameter_count,
)
from eqopt.services.filter_core import peaking_coefficients, sos_filter
from eqopt.services.loss_grad import compute_loss
from eqopt.services.metrics import mse, sigma


@pytest.mark.parametrize("layers,count", [
    ((1024, 512, 256, 128), 758_784),
    ((256,), 137_728),
    ((128,), 68_864),
    ((256, 256, 256), 268_800),
    ((32,), 17_216),
    ((16, 32, 64, 128, 256, 512, 256, 128, 64, 32, 16), 357_792),
    ((), 536),
])
def test_parameter_counts(layers, count):
    assert parameter_count(layers, 536) == count


def test_network_size_matches_count():
    net = init_network((8, 4), 12, seed=0)
    assert net.n_params == parameter_count((8, 4), 12)
    with_bias = init_network((8, 4), 12, seed=0, layer_bias=True)
    assert with_bias.n_params == parameter_count((8, 4), 12, layer_bias=True) == net.n_params + 4 + 12


def test_bias_only_needs_flag():
    with pytest.raises(ParameterDomainError):
        init_network((), 10)
    net = init_network((), 10, allow_bias_only=True)
    assert net.n_params == 10
    np.testing.assert_array_equal(forward(net), np.sin(net.params["b0"]))


def test_same_seed_same_network():
    a = init_network((8, 4), 6, seed=3)
    b = init_network((8, 4), 6, seed=3)
    c = init_network((8, 4), 6, seed=4)
    for key in a.params:
        np.testing.assert_array_equal(a.params[key], b.params[key])
    assert not np.array_equal(a.params["W0"], c.params["W0"])


def test_zero_network_outputs_zero():
    net = init_network((8, 4), 6, seed=0, layer_bias=True)
    net.params = {k: np.zeros_like(v) for k, v in net.params.items()}
    np.testing.assert_array_equal(forward(net), np.zeros(6))


def test_first_preactivation_is_b0():
    net = init_network((8,), 5, seed=1)
    _, pre, _ = forward_with_cache(net)
    np.testing.assert_array_equal(pre[0], net.params["b0"])


def test_outputs_stay_in_unit_range():
    rng = np.random.default_rng(0)
    worst = 0.0
    for seed in range(200):
        net = init_network((16, 8), 32, seed=seed, omega=float(rng.uniform(0.01, 1.0)))
        worst = max(worst, float(np.max(np.abs(forward(net)))))
    assert worst <= 1.0


def test_b0_moves_output():
    net = init_network((8,), 5, seed=2)
    before = forward(net)
    net.params["b0"][0] += 1e-3
    assert not np.array_equal(before, forward(net))


def _flatten(net: Network) -> np.ndarray:
    return np.concatenate([net.params[k].ravel() for k in sorted(net.params)])


def _assign(net: Network, flat: np.ndarray) -> None:
    i = 0
    for k in sorted(net.params):
        n = net.params[k].size
        net.params[k] = flat[i:i + n].reshape(net.params[k].shape).copy()
        i += n


@pytest.mark.parametrize("layer_bias", [False, True])
def test_backward_matches_differences(layer_bias):
    net = init_network((2,), 2, seed=5, layer_bias=layer_bias)
    v = np.array([0.7, -1.3])
    grads = backward(net, v)
    analytic = np.concatenate([grads[k].ravel() for k in sorted(net.params)])
    x0 = _flatten(net)
    numeric = np.zeros_like(x0)
    h = 1e-6
    for j in range(x0.size):
        up, dn = x0.copy(), x0.copy()
        up[j] += h
        dn[j] -= h
        _assign(net, up)
        f_up = v @ forward(net)
        _assign(net, dn)
        f_dn = v @ forward(net)
        numeric[j] = (f_up - f_dn) / (2 * h)
    _assign(net, x0)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-7, atol=1e-9)


def test_backward_zero_upstream_gives_zero():
    net = init_network((8, 4), 6, seed=0)
    grads = backward(net, np.zeros(6))
    assert all(not np.any(g) for g in grads.values())
    with pytest.raises(ParameterDomainError):
        backward(net, np.zeros(5))


def test_b0_gradient_is_backpropagated_signal():
    net = init_network((4,), 3, seed=7)
    v = np.array([1.0, -2.0, 0.5])
    _, pre, _ = forward_with_cache(net)
    delta_out = v * np.cos(pre[1])
    expected = (net.params["W0"].T @ delta_out) * np.cos(net.params["b0"])
    np.testing.assert_allclose(backward(net, v)["b0"], expected)


def test_adam_first_step_is_learning_rate():
    params = {"x": np.array([1.0, -2.0, 3.0])}
    AdamState(lr=1e-3).step(params, {"x": np.array([5.0, -0.2, 1e-3])})
    np.testing.assert_allclose(params["x"], [1.0 - 1e-3, -2.0 + 1e-3, 3.0 - 1e-3], rtol=0, atol=1e-7)


def test_adam_zero_gradient_keeps_parameters():
    params = {"x": np.array([1.0, 2.0])}
    AdamState().step(params, {"x": np.zeros(2)})
    np.testing.assert_array_equal(params["x"], [1.0, 2.0])


def test_adam_rejects_non_finite():
    params = {"x": np.array([1.0])}
    adam = AdamState()
    with pytest.raises(NonFiniteGradientError):
        adam.step(params, {"x": np.array([np.nan])})
    assert adam.t == 0
    assert params["x"][0] == 1.0


@pytest.fixture
def quick_config():
    return BiasNetConfig(layers=(32, 16), iterations=60, lr=1e-3, log_every=20, seed=3)


def test_optimize_is_deterministic(siso_problem, quick_config):
    a = optimize(siso_problem, quick_config)
    b = optimize(siso_problem, quick_config)
    np.testing.assert_array_equal(a.p, b.p)
    np.testing.assert_array_equal(a.losses, b.losses)


def test_optimize_keeps_best_parameters(siso_problem, quick_config):
    result = optimize(siso_problem, quick_config)
    assert result.iterations == 60
    assert len(result.losses) == 60
    assert result.best.total == np.min(result.losses)
    assert result.losses[result.best_iteration - 1] == result.best.total
    assert result.losses.min() < result.losses[0]
    assert [h.iteration for h in result.history] == [1, 20, 40, 60]
    best_so_far = [h.best_total for h in result.history]
    assert best_so_far == sorted(best_so_far, reverse=True)
    assert np.all(np.abs(result.p) <= 1.0)


def test_patience_stops_early(siso_problem):
    config = BiasNetConfig(layers=(8,), iterations=500, lr=10.0, patience=3, seed=0)
    result = optimize(siso_problem, config)
    assert result.iterations < 500
    assert len(result.losses) == result.iterations


def test_callback_sees_every_iteration(siso_problem):
    seen = []
    optimize(siso_problem, BiasNetConfig(layers=(8,), iterations=5), callback=lambda it, b: seen.append(it))
    assert seen == [1, 2, 3, 4, 5]


def raw_mse(problem) -> float:
    raw = band_average(np.abs(problem.unequalized_spectra()), problem.bands)
    return mse(raw, problem.target.magnitudes)[1]


@pytest.mark.slow
def test_single_peak_scene_is_equalized():
    fs = 48000.0
    x = np.zeros(4096)
    x[0] = 1.0
    b, a = peaking_coefficients([1000.0], [1.4], [6.0], fs)
    scene = Scene(rirs=sos_filter(b, a, 0.0, x)[None, None, :], fs=fs, f_low=100.0, f_high=14000.0)
    problem = build_problem(scene)
    raw = raw_mse(problem)
    result = optimize(problem, BiasNetConfig(iterations=10_000, seed=0))
    final = mse(result.best.band_magnitudes, problem.target.magnitudes)[1]
    assert final <= 1e-4
    assert final <= raw * 1e-3


@pytest.mark.slow
def test_room_scene_improves_by_orders_of_magnitude():
    problem = build_problem(synth_scene(small_spec(S=8, M=2, f_low=100.0, f_high=14000.0,
                                                   length=None, decay_ms=40.0, seed=1)), n_fft=8192)
    assert problem.n_params == 536
    raw = raw_mse(problem)
    result = optimize(problem, BiasNetConfig(iterations=10_000, seed=0))
    final = mse(result.best.band_magnitudes, problem.target.magnitudes)[1]
    assert raw > 1e-2
    assert final <= raw * 1e-4
    assert result.best.ratios.max_relative_deviation < 0.1
    assert sigma(result.best.band_magnitudes)[1] <= 0.1


@pytest.mark.slow
def test_bias_only_model_is_worse():
    problem = build_problem(synth_scene(small_spec(S=8, M=2, f_low=100.0, f_high=14000.0,
                                                   length=None, seed=1)), n_fft=8192)
    deep = optimize(problem, BiasNetConfig(iterations=10_000, seed=0))
    flat = optimize(problem, BiasNetConfig(layers=(), allow_bias_only=True, iterations=10_000, seed=0))
    deep_mse = mse(deep.best.band_magnitudes, problem.target.magnitudes)[1]
    flat_mse = mse(flat.best.band_magnitudes, problem.target.magnitudes)[1]
    assert flat_mse > 10 * deep_mse


@pytest.mark.slow
def test_larger_network_reaches_threshold_sooner():
    problem = build_problem(synth_scene(small_spec(S=2, M=2, seed=4)), n_fft=4096)
    threshold = 0.25 * compute_loss(problem, np.zeros(problem.n_params)).total
    budget = 3000

    def iterations_to_threshold(layers, seed):
        losses = optimize(problem, BiasNetConfig(layers=layers, iterations=budget, seed=seed)).losses
        reached = np.flatnonzero(losses <= threshold)
        return int(reached[0]) + 1 if reached.size else budget + 1

    seeds = range(5)
    large = np.median([iterations_to_threshold((1024, 512, 256, 128), s) for s in seeds])
    small = np.median([iterations_to_threshold((256,), s) for s in seeds])
    assert large <= budget
    assert large < small


def test_energy_ratio_term_keeps_balance():
    problem = build_problem(synth_scene(small_spec(S=4, M=2, seed=5)))
    config = BiasNetConfig(layers=(64, 32), iterations=1500, lr=1e-3, seed=0)
    balanced = optimize(problem, config)
    unconstrained = optimize(replace(problem, gamma2=0.0), config)
    assert problem.gamma2 == pytest.approx(3.0)
    assert balanced.best.ratios.max_relative_deviation < 0.1
    assert unconstrained.best.ratios.max_relative_deviation > 0.1
