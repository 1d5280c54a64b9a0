"""Single-sample neural-network engine.

Float32 layers with exact analytic gradients, softmax cross-entropy, and
SGD with momentum. There is deliberately no batch axis: every forward and
backward call processes one sample, so FullyConnected works on rank-1
inputs and Conv2D on rank-3 ``[channels, height, width]`` inputs.

Conv2D uses valid padding and stride 1. The momentum update is
``v = momentum * v + g`` followed by ``w = w - lr * v``.
"""

from __future__ import annotations

import numpy as np

F32 = np.float32

__all__ = [
    "Layer",
    "FullyConnected",
    "Conv2D",
    "ReLU",
    "Flatten",
    "SgdMomentum",
    "softmax_cross_entropy",
    "init_layers",
    "forward_layers",
    "backward_layers",
    "collect_params",
    "collect_grads",
    "set_params",
]


def as_f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=F32)


class Layer:
    """Base class. Subclasses implement forward/backward and expose their
    learnable parameters through params()/grads() in a fixed order."""

    kind = "base"

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list:
        return []

    def grads(self) -> list:
        return []

    def clone(self) -> "Layer":
        raise NotImplementedError


class FullyConnected(Layer):
    """y = W x + b with W of shape [out, in] and b of shape [out]."""

    kind = "fc"

    def __init__(self, in_features: int, out_features: int):
        if in_features < 1 or out_features < 1:
            raise ValueError(f"fc dimensions must be positive, got {in_features}->{out_features}")
        self.in_features = in_features
        self.out_features = out_features
        self.weights = np.zeros((out_features, in_features), dtype=F32)
        self.bias = np.zeros(out_features, dtype=F32)
        self.grad_weights = None
        self.grad_bias = None
        self._cache = None

    def forward(self, x):
        if x.shape != (self.in_features,):
            raise ValueError(
                f"fc({self.in_features}->{self.out_features}) expects input shape "
                f"({self.in_features},), got {x.shape}"
            )
        self._cache = x
        return self.weights @ x + self.bias

    def backward(self, grad_out):
        if grad_out.shape != (self.out_features,):
            raise ValueError(
                f"fc({self.in_features}->{self.out_features}) expects gradient shape "
                f"({self.out_features},), got {grad_out.shape}"
            )
        x = self._cache
        if x is None:
            raise ValueError("backward called before forward")
        self.grad_weights = np.outer(grad_out, x)
        self.grad_bias = grad_out.copy()
        return self.weights.T @ grad_out

    def params(self):
        return [self.weights, self.bias]

    def grads(self):
        return [self.grad_weights, self.grad_bias]

    def fan_in(self):
        return self.in_features

    def clone(self):
        out = FullyConnected(self.in_features, self.out_features)
        out.weights = self.weights.copy()
        out.bias = self.bias.copy()
        return out


class Conv2D(Layer):
    """Valid-padding, stride-1 convolution on [in_ch, H, W] inputs.

    Weights have shape [out_ch, in_ch, kh, kw]; output is
    [out_ch, H - kh + 1, W - kw + 1].
    """

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kh: int, kw: int):
        if min(in_channels, out_channels, kh, kw) < 1:
            raise ValueError("conv2d dimensions must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kh = kh
        self.kw = kw
        self.weights = np.zeros((out_channels, in_channels, kh, kw), dtype=F32)
        self.bias = np.zeros(out_channels, dtype=F32)
        self.grad_weights = None
        self.grad_bias = None
        self._cache = None

    def _check_input(self, x):
        if x.ndim != 3 or x.shape[0] != self.in_channels:
            raise ValueError(
                f"conv2d({self.in_channels}->{self.out_channels}) expects input "
                f"[{self.in_channels}, H, W], got shape {x.shape}"
            )
        if x.shape[1] < self.kh or x.shape[2] < self.kw:
            raise ValueError(
                f"conv2d kernel {self.kh}x{self.kw} does not fit input "
                f"{x.shape[1]}x{x.shape[2]}"
            )

    def forward(self, x):
        self._check_input(x)
        _, h, w = x.shape
        ho, wo = h - self.kh + 1, w - self.kw + 1
        # im2col: [ho*wo, in_ch*kh*kw] so the convolution is one matmul
        windows = np.lib.stride_tricks.sliding_window_view(x, (self.kh, self.kw), axis=(1, 2))
        cols = np.ascontiguousarray(windows.transpose(1, 2, 0, 3, 4)).reshape(
            ho * wo, self.in_channels * self.kh * self.kw
        )
        wmat = self.weights.reshape(self.out_channels, -1)
        y = cols @ wmat.T + self.bias
        self._cache = (x.shape, cols)
        return np.ascontiguousarray(y.reshape(ho, wo, self.out_channels).transpose(2, 0, 1))

    def backward(self, grad_out):
        if self._cache is None:
            raise ValueError("backward called before forward")
        in_shape, cols = self._cache
        _, h, w = in_shape
        ho, wo = h - self.kh + 1, w - self.kw + 1
        if grad_out.shape != (self.out_channels, ho, wo):
            raise ValueError(
                f"conv2d expects gradient shape {(self.out_channels, ho, wo)}, "
                f"got {grad_out.shape}"
            )
        gmat = grad_out.transpose(1, 2, 0).reshape(ho * wo, self.out_channels)
        wmat = self.weights.reshape(self.out_channels, -1)
        self.grad_weights = (gmat.T @ cols).reshape(self.weights.shape)
        self.grad_bias = gmat.sum(axis=0, dtype=F32)
        dcols = (gmat @ wmat).reshape(ho, wo, self.in_channels, self.kh, self.kw)
        grad_in = np.zeros(in_shape, dtype=F32)
        for ki in range(self.kh):
            for kj in range(self.kw):
                grad_in[:, ki : ki + ho, kj : kj + wo] += dcols[:, :, :, ki, kj].transpose(2, 0, 1)
        return grad_in

    def params(self):
        return [self.weights, self.bias]

    def grads(self):
        return [self.grad_weights, self.grad_bias]

    def fan_in(self):
        return self.in_channels * self.kh * self.kw

    def clone(self):
        out = Conv2D(self.in_channels, self.out_channels, self.kh, self.kw)
        out.weights = self.weights.copy()
        out.bias = self.bias.copy()
        return out


class ReLU(Layer):
    kind = "relu"

    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, F32(0.0))

    def backward(self, grad_out):
        if self._mask is None:
            raise ValueError("backward called before forward")
        if grad_out.shape != self._mask.shape:
            raise ValueError(f"relu expects gradient shape {self._mask.shape}, got {grad_out.shape}")
        return np.where(self._mask, grad_out, F32(0.0))

    def clone(self):
        return ReLU()


class Flatten(Layer):
    kind = "flatten"

    def __init__(self):
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(-1)

    def backward(self, grad_out):
        if self._shape is None:
            raise ValueError("backward called before forward")
        if grad_out.size != int(np.prod(self._shape)):
            raise ValueError(
                f"flatten expects gradient of {int(np.prod(self._shape))} elements, "
                f"got {grad_out.size}"
            )
        return grad_out.reshape(self._shape)

    def clone(self):
        return Flatten()


def softmax_cross_entropy(logits: np.ndarray, label: int):
    """Loss and logit gradient for one sample.

    Softmax is computed with max subtraction; the gradient is
    ``softmax(logits) - one_hot(label)`` and sums to zero.
    """
    n = logits.shape[0]
    if logits.ndim != 1:
        raise ValueError(f"logits must be rank 1, got shape {logits.shape}")
    if not 0 <= label < n:
        raise ValueError(f"label {label} out of range [0, {n})")
    z = logits - logits.max()
    e = np.exp(z)
    total = e.sum(dtype=F32)
    loss = np.log(total) - z[label]
    grad = e / total
    grad[label] -= F32(1.0)
    return float(loss), grad


class SgdMomentum:
    """SGD with momentum over a fixed parameter list, updated in place.

    v = momentum * v + g ; w = w - lr * v. Velocity buffers persist for
    the lifetime of the optimizer.
    """

    def __init__(self, params: list, learning_rate: float, momentum: float = 0.0):
        if learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = params
        self.learning_rate = F32(learning_rate)
        self.momentum = F32(momentum)
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads: list):
        if len(grads) != len(self.params):
            raise ValueError(f"expected {len(self.params)} gradients, got {len(grads)}")
        for p, g, v in zip(self.params, grads, self.velocity):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            np.multiply(v, self.momentum, out=v)
            v += g
            p -= self.learning_rate * v


def init_layers(layers: list, rng: np.random.Generator):
    """Initialize weights uniformly in +-sqrt(6 / fan_in); biases stay zero.

    Layers are visited in order, so the same generator state always
    produces the same weights.
    """
    for layer in layers:
        if not layer.params():
            continue
        bound = float(np.sqrt(6.0 / layer.fan_in()))
        layer.weights[...] = rng.uniform(-bound, bound, size=layer.weights.shape).astype(F32)
        layer.bias[...] = 0.0


def forward_layers(layers: list, x: np.ndarray) -> np.ndarray:
    for layer in layers:
        x = layer.forward(x)
    return x


def backward_layers(layers: list, grad: np.ndarray) -> np.ndarray:
    for layer in reversed(layers):
        grad = layer.backward(grad)
    return grad


def collect_params(layers: list) -> list:
    out = []
    for layer in layers:
        out.extend(layer.params())
    return out


def collect_grads(layers: list) -> list:
    out = []
    for layer in layers:
        out.extend(layer.grads())
    return out


def set_params(layers: list, values: list):
    """Copy values into the layers' parameter tensors, preserving identity
    (optimizer velocity buffers keep pointing at the same arrays)."""
    params = collect_params(layers)
    if len(values) != len(params):
        raise ValueError(f"expected {len(params)} tensors, got {len(values)}")
    for p, v in zip(params, values):
        if v.shape != p.shape:
            raise ValueError(f"tensor shape {v.shape} does not match parameter {p.shape}")
        np.copyto(p, v.astype(F32, copy=False))
