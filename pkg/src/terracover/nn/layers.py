"""Differentiable layers on NCHW numpy arrays.

Every layer records what it needs during :meth:`forward` and consumes it in
:meth:`backward`, which returns the input gradient and accumulates parameter
gradients into :attr:`Parameter.grad`. Frozen parameters are skipped.
"""

from __future__ import annotations

import zlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NetworkError


class Parameter:
    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.frozen = False

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def astype(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def param_rng(seed: int, name: str) -> np.random.Generator:
    """RNG keyed on (seed, parameter name) so init is independent of build order."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def he_normal(seed, name, shape, fan_in, dtype=np.float32):
    return (param_rng(seed, name).standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Layer:
    kind = "layer"

    def __init__(self, name: str = ""):
        self.name = name or self.kind
        self._cache = None

    def parameters(self) -> list[Parameter]:
        return []

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise NetworkError(f"{self.name}: backward called before forward")
        cache, self._cache = self._cache, None
        return cache

    def __call__(self, x):
        return self.forward(x)


class Conv2d(Layer):
    """2-D convolution with zero "same" padding (``kernel // 2``)."""

    kind = "conv2d"

    def __init__(self, name, in_channels, out_channels, kernel=3, stride=1, seed=0):
        super().__init__(name)
        if kernel % 2 != 1:
            raise NetworkError(f"{name}: kernel size must be odd")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.pad = kernel, stride, kernel // 2
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(f"{name}.weight", he_normal(
            seed, f"{name}.weight", (out_channels, in_channels, kernel, kernel), fan_in))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_channels, np.float32))

    def parameters(self):
        return [self.weight, self.bias]

    def _out_size(self, n):
        return (n + 2 * self.pad - self.kernel) // self.stride + 1

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise NetworkError(
                f"{self.name}: expected input [B,{self.in_channels},H,W], got {list(x.shape)}")
        b, c, h, w = x.shape
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = self._out_size(h), self._out_size(w)
        if k == 1 and s == 1:
            cols = x.transpose(0, 2, 3, 1).reshape(-1, c)
        else:
            xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
            win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
            cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
        wmat = self.weight.value.reshape(self.out_channels, -1)
        y = cols @ wmat.T + self.bias.value
        self._cache = (cols, x.shape)
        return y.reshape(b, ho, wo, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, dy):
        cols, (b, c, h, w) = self._take_cache()
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = dy.shape[2], dy.shape[3]
        dyf = dy.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        if not self.weight.frozen:
            self.weight.grad += (dyf.T @ cols).reshape(self.weight.shape)
        if not self.bias.frozen:
            self.bias.grad += dyf.sum(0)
        dcols = dyf @ self.weight.value.reshape(self.out_channels, -1)
        if k == 1 and s == 1:
            return dcols.reshape(b, h, w, c).transpose(0, 3, 1, 2)
        dcols = dcols.reshape(b, ho, wo, c, k, k)
        dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + h, p:p + w]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._take_cache()


class MaxPool2(Layer):
    """2x2 max pooling, stride 2. Ties route the gradient to the first maximum."""

    kind = "maxpool2"

    def forward(self, x):
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise NetworkError(f"{self.name}: spatial size {h}x{w} is not even")
        win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(b, c, h // 2, w // 2, 4)
        idx = win.argmax(-1)
        self._cache = (idx, x.shape)
        return np.take_along_axis(win, idx[..., None], -1)[..., 0]

    def backward(self, dy):
        idx, (b, c, h, w) = self._take_cache()
        onehot = (np.arange(4) == idx[..., None]) * dy[..., None]
        dx = onehot.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return dx.reshape(b, c, h, w)


class Upsample2Nearest(Layer):
    kind = "upsample2_nearest"

    def forward(self, x):
        self._cache = True
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, dy):
        self._take_cache()
        b, c, h, w = dy.shape
        return dy.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


class ConcatSkip(Layer):
    """Channel concatenation of a decoder tensor with an encoder skip tensor."""

    kind = "concat_skip"

    def forward(self, x, skip):
        if x.shape[0] != skip.shape[0] or x.shape[2:] != skip.shape[2:]:
            raise NetworkError(f"{self.name}: skip resolution {list(skip.shape)} does not "
                               f"match decoder tensor {list(x.shape)}")
        self._cache = x.shape[1]
        return np.concatenate([x, skip], axis=1)

    def __call__(self, x, skip):
        return self.forward(x, skip)

    def backward(self, dy):
        c = self._take_cache()
        return dy[:, :c], dy[:, c:]


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def forward(self, x):
        self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        b, c, h, w = self._take_cache()
        return np.broadcast_to((dy / (h * w))[:, :, None, None], (b, c, h, w)).copy()


class Dense(Layer):
    kind = "dense"

    def __init__(self, name, in_features, out_features, seed=0):
        super().__init__(name)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(f"{name}.weight", he_normal(
            seed, f"{name}.weight", (out_features, in_features), in_features))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_features, np.float32))

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise NetworkError(
                f"{self.name}: expected input [B,{self.in_features}], got {list(x.shape)}")
        self._cache = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, dy):
        x = self._take_cache()
        if not self.weight.frozen:
            self.weight.grad += dy.T @ x
        if not self.bias.frozen:
            self.bias.grad += dy.sum(0)
        return dy @ self.weight.value


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softmax(z, axis=1):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        s = sigmoid(x)
        self._cache = s
        return s

    def backward(self, dy):
        s = self._take_cache()
        return dy * s * (1 - s)


class SoftmaxPixelwise(Layer):
    """Softmax over the channel axis at every pixel."""

    kind = "softmax_pixelwise"

    def forward(self, x):
        s = softmax(x, axis=1)
        self._cache = s
        return s

    def backward(self, dy):
        s = self._take_cache()
        return s * (dy - (dy * s).sum(axis=1, keepdims=True))


class ResidualBlock(Layer):
    """conv3x3-relu-conv3x3 plus shortcut, then relu.

    The shortcut is the identity when channel counts match and a 1x1
    projection otherwise.
    """

    kind = "residual_block"

    def __init__(self, name, in_channels, out_channels, seed=0):
        super().__init__(name)
        self.conv1 = Conv2d(f"{name}.conv1", in_channels, out_channels, 3, seed=seed)
        self.relu1 = ReLU(f"{name}.relu1")
        self.conv2 = Conv2d(f"{name}.conv2", out_channels, out_channels, 3, seed=seed)
        self.proj = (Conv2d(f"{name}.proj", in_channels, out_channels, 1, seed=seed)
                     if in_channels != out_channels else None)
        self.relu2 = ReLU(f"{name}.relu2")

    def parameters(self):
        params = self.conv1.parameters() + self.conv2.parameters()
        if self.proj is not None:
            params += self.proj.parameters()
        return params

    def forward(self, x):
        h = self.conv2(self.relu1(self.conv1(x)))
        shortcut = self.proj(x) if self.proj is not None else x
        self._cache = True
        return self.relu2(h + shortcut)

    def backward(self, dy):
        self._take_cache()
        d = self.relu2.backward(dy)
        dx = self.conv1.backward(self.relu1.backward(self.conv2.backward(d)))
        return dx + (self.proj.backward(d) if self.proj is not None else d)


LAYER_KINDS = {cls.kind: cls for cls in (
    Conv2d, ReLU, MaxPool2, Upsample2Nearest, ConcatSkip, ResidualBlock,
    GlobalAvgPool, Dense, Sigmoid, SoftmaxPixelwise)}
