"""
BiasNet: a feedforward sine network without external input.

The learnable vector ``b0`` plays the role of the input layer's bias, so
the forward pass is a trainable constant generator. Its output, squashed
into [-1, 1] by a final sine, is the normalized parameter vector consumed
by :func:`eqopt.services.filter_core.denormalize`. Training is plain Adam
on the analytic loss gradient, one full-scene evaluation per iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import NonFiniteGradientError, ParameterDomainError
from ..schemas import BiasNetConfig, HistoryEntry
from .acoustic_scene import Problem
from .filter_core import EqualizerBank, denormalize
from .loss_grad import LossBreakdown, loss_and_gradient
from .metrics import mse

logger = logging.getLogger(__name__)


def parameter_count(layer_sizes: Sequence[int], out_dim: int, layer_bias: bool = False) -> int:
    """Number of learnable scalars.

    With hidden layers: ``b0`` and the inert null-input weights (both the
    size of the first layer), every weight matrix, and the per-layer biases
    when enabled. Without hidden layers only ``b0`` (of size ``out_dim``).
    """
    sizes = list(layer_sizes)
    if not sizes:
        return out_dim
    dims = sizes + [out_dim]
    weights = sum(dims[i] * dims[i + 1] for i in range(len(dims) - 1))
    biases = sum(dims[1:]) if layer_bias else 0
    return 2 * sizes[0] + weights + biases


@dataclass
class Network:
    """Learnable tensors keyed by name, plus the layer layout.

    Keys: ``b0``, ``w_null`` (only with hidden layers), ``W{l}`` and, when
    layer biases are enabled, ``c{l}`` for l = 0 .. n_layers - 1.
    """

    layer_sizes: Tuple[int, ...]
    out_dim: int
    params: Dict[str, np.ndarray]
    layer_bias: bool = False

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes)

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "Network":
        return Network(self.layer_sizes, self.out_dim, {k: v.copy() for k, v in self.params.items()}, self.layer_bias)


def init_network(
    layer_sizes: Sequence[int],
    out_dim: int,
    seed: int = 0,
    layer_bias: bool = False,
    omega: float = 1.0,
    allow_bias_only: bool = False,
) -> Network:
    """Seeded uniform initialization.

    ``b0`` ~ U(-1, 1); weights ~ U(+-sqrt(6 / fan_in) / omega); layer
    biases ~ U(+-1 / sqrt(fan_in)).
    """
    if out_dim < 1:
        raise ParameterDomainError("output dimension must be at least 1")
    sizes = tuple(int(n) for n in layer_sizes)
    if not sizes and not allow_bias_only:
        raise ParameterDomainError("an empty layer list needs allow_bias_only=True")
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    if not sizes:
        params["b0"] = rng.uniform(-1.0, 1.0, out_dim)
        return Network(sizes, out_dim, params, layer_bias)

    params["b0"] = rng.uniform(-1.0, 1.0, sizes[0])
    params["w_null"] = rng.uniform(-np.sqrt(6.0) / omega, np.sqrt(6.0) / omega, sizes[0])
    dims = list(sizes) + [out_dim]
    for l in range(len(dims) - 1):
        fan_in, fan_out = dims[l], dims[l + 1]
        bound = np.sqrt(6.0 / fan_in) / omega
        params[f"W{l}"] = rng.uniform(-bound, bound, (fan_out, fan_in))
        if layer_bias:
            cb = 1.0 / np.sqrt(fan_in)
            params[f"c{l}"] = rng.uniform(-cb, cb, fan_out)
    logger.debug("BiasNet %s -> %d with %d learnable scalars", sizes, out_dim, parameter_count(sizes, out_dim, layer_bias))
    return Network(sizes, out_dim, params, layer_bias)


def forward_with_cache(net: Network) -> Tuple[np.ndarray, List[np.ndarray], List[np.ndarray]]:
    """Output plus pre-activations and activations of every layer."""
    x = net.params["b0"]
    pre = [x]
    h = np.sin(x)
    act = [h]
    n_mats = net.n_layers
    for l in range(n_mats):
        x = net.params[f"W{l}"] @ h
        if net.layer_bias:
            x = x + net.params[f"c{l}"]
        h = np.sin(x)
        pre.append(x)
        act.append(h)
    return h, pre, act


def forward(net: Network) -> np.ndarray:
    return forward_with_cache(net)[0]


def backward(
    net: Network,
    dl_dp: np.ndarray,
    cache: Optional[Tuple[List[np.ndarray], List[np.ndarray]]] = None,
) -> Dict[str, np.ndarray]:
    """Gradients of ``dl_dp . p(net)`` for every learnable tensor."""
    dl_dp = np.asarray(dl_dp, dtype=float)
    if dl_dp.shape != (net.out_dim,):
        raise ParameterDomainError(f"expected a gradient of length {net.out_dim}, got {dl_dp.shape}")
    if cache is None:
        _, pre, act = forward_with_cache(net)
    else:
        pre, act = cache
    grads: Dict[str, np.ndarray] = {}
    delta = dl_dp * np.cos(pre[-1])
    for l in range(net.n_layers - 1, -1, -1):
        grads[f"W{l}"] = np.outer(delta, act[l])
        if net.layer_bias:
            grads[f"c{l}"] = delta.copy()
        delta = (net.params[f"W{l}"].T @ delta) * np.cos(pre[l])
    grads["b0"] = delta
    if "w_null" in net.params:
        grads["w_null"] = np.zeros_like(net.params["w_null"])
    return grads


class AdamState:
    """Bias-corrected Adam over a dict of tensors, updated in place."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient in {k} at Adam step {self.t + 1}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = self.lr / bc1
        for k in params:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] *= self.beta1
            self.m[k] += (1.0 - self.beta1) * g
            self.v[k] *= self.beta2
            self.v[k] += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(self.v[k] * (1.0 / bc2)) + self.eps
            params[k] -= step_size * self.m[k] / denom


def adam_step(net: Network, state: AdamState, grads: Dict[str, np.ndarray]) -> Network:
    state.step(net.params, grads)
    return net


@dataclass
class OptimizationResult:
    method: str
    p: np.ndarray
    bank: EqualizerBank
    best: LossBreakdown
    best_iteration: int
    iterations: int
    losses: np.ndarray
    history: List[HistoryEntry] = field(default_factory=list)


def optimize(
    problem: Problem,
    config: Optional[BiasNetConfig] = None,
    callback: Optional[Callable[[int, LossBreakdown], None]] = None,
) -> OptimizationResult:
    """Train a BiasNet on ``problem`` and keep the best parameters seen."""
    config = config or BiasNetConfig()
    net = init_network(
        config.layers,
        problem.n_params,
        seed=config.seed,
        layer_bias=config.layer_bias,
        omega=config.omega,
        allow_bias_only=config.allow_bias_only,
    )
    adam = AdamState(config.lr, config.beta1, config.beta2, config.eps)
    logger.info(
        "BiasNet %s: %d learnable scalars, %d outputs, %d iterations",
        tuple(config.layers), net.n_params, problem.n_params, config.iterations,
    )

    losses = np.empty(config.iterations)
    history: List[HistoryEntry] = []
    best_total = np.inf
    best_p = None
    best_breakdown = None
    best_it = 0
    it = 0
    for it in range(1, config.iterations + 1):
        p, pre, act = forward_with_cache(net)
        breakdown, grad_p = loss_and_gradient(problem, p)
        total = breakdown.total
        losses[it - 1] = total
        if total < best_total:
            best_total, best_p, best_breakdown, best_it = total, p.copy(), breakdown, it
        if callback is not None:
            callback(it, breakdown)
        if it == 1 or it % config.log_every == 0 or it == config.iterations:
            entry = HistoryEntry(
                iteration=it,
                l1=breakdown.l1,
                l2=breakdown.l2,
                total=total,
                mse=mse(breakdown.band_magnitudes, problem.target.magnitudes)[1],
                best_total=best_total,
            )
            history.append(entry)
            logger.info(
                "iter %6d  L1 %.4e  L2 %.4e  total %.4e  MSE %.4e",
                it, entry.l1, entry.l2, entry.total, entry.mse,
            )
        if config.patience is not None and it - best_it >= config.patience:
            logger.info("Stopping early at iteration %d (best at %d)", it, best_it)
            break
        grads = backward(net, grad_p, (pre, act))
        adam_step(net, adam, grads)

    return OptimizationResult(
        method="biasnet",
        p=best_p,
        bank=denormalize(best_p, problem.ranges),
        best=best_breakdown,
        best_iteration=best_it,
        iterations=it,
        losses=losses[:it],
        history=history,
    )
