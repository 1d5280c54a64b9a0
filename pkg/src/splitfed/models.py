"""The three split network topologies and their client/server halves.

model1_mlp  : FC(650->25) | FC(25->7), split after the first layer.
model2_cnn  : Conv(1->12, 3x3)+ReLU | Conv(12->16, 3x3)+ReLU+Flatten+FC(6624->128)+ReLU+FC(128->7)
model3_cnn  : same client; server uses Conv(12->30, 3x3) and FC(12420->256).

All convolutions are valid-padding stride-1, so the client conv output is
[12, 48, 11] for a [1, 50, 13] feature map. ReLU follows every conv and
every hidden FC in the CNN models; the MLP is the plain two-layer stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Conv2D, Flatten, FullyConnected, Layer, ReLU, forward_layers, init_layers

MODEL_NAMES = ("model1_mlp", "model2_cnn", "model3_cnn")

NUM_CLASSES = 7
FEATURE_FRAMES = 50
FEATURE_COEFFS = 13

_INIT_STREAM = 1


@dataclass
class ModelSpec:
    name: str
    layers: list
    split_index: int
    input_shape: tuple

    @property
    def client_layers(self) -> list:
        return self.layers[: self.split_index]

    @property
    def server_layers(self) -> list:
        return self.layers[self.split_index :]


@dataclass
class SplitModel:
    client: list
    server: list

    @property
    def layers(self) -> list:
        return self.client + self.server


def is_mlp(name: str) -> bool:
    return name == "model1_mlp"


def build(name: str, seed: int | None = None) -> ModelSpec:
    """Build a model spec with initialized weights (zeros when seed is None,
    so checkpoint loaders can fill them in)."""
    if name == "model1_mlp":
        layers: list[Layer] = [FullyConnected(650, 25), FullyConnected(25, 7)]
        split_index = 1
        input_shape = (650,)
    elif name == "model2_cnn":
        layers = [
            Conv2D(1, 12, 3, 3),
            ReLU(),
            Conv2D(12, 16, 3, 3),
            ReLU(),
            Flatten(),
            FullyConnected(16 * 46 * 9, 128),
            ReLU(),
            FullyConnected(128, 7),
        ]
        split_index = 2
        input_shape = (1, FEATURE_FRAMES, FEATURE_COEFFS)
    elif name == "model3_cnn":
        layers = [
            Conv2D(1, 12, 3, 3),
            ReLU(),
            Conv2D(12, 30, 3, 3),
            ReLU(),
            Flatten(),
            FullyConnected(30 * 46 * 9, 256),
            ReLU(),
            FullyConnected(256, 7),
        ]
        split_index = 2
        input_shape = (1, FEATURE_FRAMES, FEATURE_COEFFS)
    else:
        raise ValueError(f"unknown model {name!r}; expected one of {MODEL_NAMES}")
    if seed is not None:
        init_layers(layers, np.random.default_rng([int(seed), _INIT_STREAM]))
    return ModelSpec(name=name, layers=layers, split_index=split_index, input_shape=input_shape)


def split(spec: ModelSpec) -> SplitModel:
    return SplitModel(client=spec.client_layers, server=spec.server_layers)


def clone_layers(layers: list) -> list:
    return [layer.clone() for layer in layers]


def prepare_input(name: str, features: np.ndarray) -> np.ndarray:
    """Reshape a [frames, coeffs] feature map to the model's input layout."""
    if features.shape != (FEATURE_FRAMES, FEATURE_COEFFS):
        raise ValueError(
            f"features must have shape {(FEATURE_FRAMES, FEATURE_COEFFS)}, got {features.shape}"
        )
    if is_mlp(name):
        return features.reshape(-1)
    return features.reshape(1, FEATURE_FRAMES, FEATURE_COEFFS)


def param_count(layers, include_bias: bool = True) -> int:
    """Total parameter elements over a layer list (or a ModelSpec)."""
    if isinstance(layers, ModelSpec):
        layers = layers.layers
    total = 0
    for layer in layers:
        params = layer.params()
        if not params:
            continue
        total += params[0].size
        if include_bias:
            total += params[1].size
    return total


def param_summary(spec: ModelSpec) -> dict:
    """Per-half and total counts, with and without biases."""
    return {
        "total": param_count(spec.layers),
        "total_no_bias": param_count(spec.layers, include_bias=False),
        "client": param_count(spec.client_layers),
        "client_no_bias": param_count(spec.client_layers, include_bias=False),
        "server": param_count(spec.server_layers),
        "server_no_bias": param_count(spec.server_layers, include_bias=False),
    }


def output_logits(spec: ModelSpec, features: np.ndarray) -> np.ndarray:
    return forward_layers(spec.layers, prepare_input(spec.name, features))
