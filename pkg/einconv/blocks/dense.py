import math

import numpy as np

from einconv.blocks.models import Block, Params
from einconv.errors import ConfigError


class FullyConnected(Block):
    """Affine map of the flattened sample: x @ weight + bias."""

    def __init__(self, units: int):
        if units < 1:
            raise ConfigError(f"FC needs a positive unit count, got {units}")
        self.units = units

    @property
    def name(self) -> str:
        return "FC"

    def describe(self) -> str:
        return f"FC({self.units})"

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return (self.units,)

    def init_params(self, input_shape: tuple[int, ...], rng: np.random.Generator) -> Params:
        fan_in = math.prod(input_shape)
        bound = math.sqrt(6.0 / fan_in)
        return {
            "weight": rng.uniform(-bound, bound, size=(fan_in, self.units)),
            "bias": np.zeros(self.units),
        }

    def forward(self, params: Params, x: np.ndarray):
        flat = x.reshape(x.shape[0], -1)
        return flat @ params["weight"] + params["bias"], (x.shape, flat)

    def backward(self, params: Params, cache, grad_out: np.ndarray):
        shape, flat = cache
        grads = {"weight": flat.T @ grad_out, "bias": grad_out.sum(axis=0)}
        return (grad_out @ params["weight"].T).reshape(shape), grads


class ReLU(Block):
    @property
    def name(self) -> str:
        return "ReLU"

    def forward(self, params: Params, x: np.ndarray):
        return np.maximum(x, 0.0), x > 0

    def backward(self, params: Params, cache, grad_out: np.ndarray):
        return grad_out * cache, {}


class Softmax(Block):
    """Softmax over the last axis."""

    @property
    def name(self) -> str:
        return "Softmax"

    def forward(self, params: Params, x: np.ndarray):
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=-1, keepdims=True)
        return p, p

    def backward(self, params: Params, cache, grad_out: np.ndarray):
        p = cache
        return p * (grad_out - (grad_out * p).sum(axis=-1, keepdims=True)), {}
