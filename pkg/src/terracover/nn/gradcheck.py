"""Central finite-difference checks of every layer kind and both networks.

Each check runs in float64 with the scalar objective ``sum(r * f(x))`` for a
fixed random ``r``, and compares the analytic gradient of every input and
parameter against central differences. The reported error is
``||analytic - numeric|| / max(||analytic||, ||numeric||)``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .layers import (ConcatSkip, Conv2d, Dense, GlobalAvgPool, MaxPool2, ReLU, ResidualBlock,
                     Sigmoid, SoftmaxPixelwise, Upsample2Nearest)
from .network import EncoderSpec, build_classifier, build_encoder, build_unet

STEP = 1e-5
TOLERANCE = 1e-4
NETWORK_SAMPLES = 40


def relative_error(analytic, numeric) -> float:
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def numeric_grad(f: Callable[[], float], array: np.ndarray, step: float = STEP,
                 indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. elements of ``array`` (in place).

    ``indices`` restricts the flat positions evaluated; others stay 0.
    """
    grad = np.zeros_like(array)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def _to64(layer):
    for p in layer.parameters():
        p.astype(np.float64)
        p.zero_grad()
    return layer


def _perturb_params(layer, rng):
    # nonzero biases so bias gradients are exercised through relu kinks
    for p in layer.parameters():
        if p.name.endswith(".bias"):
            p.value = rng.normal(0, 0.1, p.shape)


def check_layer(layer, inputs: list[np.ndarray], rng) -> float:
    """Max relative error over the inputs and parameters of one layer."""
    _to64(layer)
    _perturb_params(layer, rng)
    out = layer.forward(*inputs)
    r = rng.standard_normal(out.shape)

    def objective():
        return float(np.sum(r * layer.forward(*inputs)))

    layer.forward(*inputs)
    dx = layer.backward(r)
    dx = list(dx) if isinstance(dx, tuple) else [dx]
    errors = []
    for x, g in zip(inputs, dx):
        errors.append(relative_error(g, numeric_grad(objective, x)))
    for p in layer.parameters():
        errors.append(relative_error(p.grad, numeric_grad(objective, p.value)))
    return max(errors)


def _layer_cases(rng):
    def x(*shape):
        return rng.standard_normal(shape)

    seed = int(rng.integers(1 << 31))
    return {
        "conv2d": [
            (Conv2d("c3", 3, 4, 3, seed=seed), [x(2, 3, 6, 6)]),
            (Conv2d("c3s2", 2, 3, 3, stride=2, seed=seed), [x(2, 2, 7, 7)]),
            (Conv2d("c1", 3, 2, 1, seed=seed), [x(2, 3, 4, 4)]),
        ],
        "relu": [(ReLU(), [x(2, 3, 4, 4)])],
        "maxpool2": [(MaxPool2(), [x(2, 3, 6, 6)])],
        "upsample2_nearest": [(Upsample2Nearest(), [x(2, 3, 3, 3)])],
        "concat_skip": [(ConcatSkip(), [x(2, 3, 4, 4), x(2, 2, 4, 4)])],
        "residual_block": [
            (ResidualBlock("rb_proj", 2, 3, seed=seed), [x(2, 2, 5, 5)]),
            (ResidualBlock("rb_id", 3, 3, seed=seed), [x(1, 3, 5, 5)]),
        ],
        "global_avg_pool": [(GlobalAvgPool(), [x(2, 3, 4, 5)])],
        "dense": [(Dense("d", 5, 3, seed=seed), [x(4, 5)])],
        "sigmoid": [(Sigmoid(), [x(3, 4)])],
        "softmax_pixelwise": [(SoftmaxPixelwise(), [x(2, 4, 3, 3)])],
    }


class _NetworkAdapter:
    """Presents a whole network (plus its input) through the layer-check interface."""

    def __init__(self, net):
        self.net = net

    def parameters(self):
        return self.net.parameters()

    def forward(self, x):
        return self.net.forward(x)

    def backward(self, dy):
        self.net.backward(dy)
        return np.zeros(0)


def check_network(task: str, rng) -> float:
    """Whole-network check on up to NETWORK_SAMPLES coordinates per parameter."""
    spec = EncoderSpec(channels=(2, 3, 3, 4), seed=int(rng.integers(1 << 31)))
    encoder = build_encoder(spec)
    net = build_classifier(encoder, 3) if task == "classify" else build_unet(encoder, 3)
    adapter = _NetworkAdapter(net)
    _to64(adapter)
    _perturb_params(adapter, rng)
    x = rng.standard_normal((2, 3, 8, 8))
    r = rng.standard_normal(net.forward(x).shape)

    def objective():
        return float(np.sum(r * net.forward(x)))

    net.forward(x)
    net.backward(r)
    errors = []
    for p in net.parameters():
        size = p.value.size
        idx = np.sort(rng.choice(size, min(size, NETWORK_SAMPLES), replace=False))
        num = numeric_grad(objective, p.value, indices=idx)
        errors.append(relative_error(p.grad.reshape(-1)[idx], num.reshape(-1)[idx]))
    return max(errors)


def run_gradcheck(seeds=range(10)) -> dict[str, float]:
    """Max relative error per layer kind (and per network) over ``seeds``."""
    worst: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for kind, cases in _layer_cases(rng).items():
            for layer, inputs in cases:
                worst[kind] = max(worst.get(kind, 0.0), check_layer(layer, inputs, rng))
        for task in ("classify", "segment"):
            key = f"network_{task}"
            worst[key] = max(worst.get(key, 0.0), check_network(task, rng))
    return worst
