import abc
from typing import Any

import numpy as np

Params = dict[str, np.ndarray]


class Block(abc.ABC):
    """Abstract base class for network blocks.

    Activations are plain arrays shaped (batch, spatial..., channels) or
    (batch, features). Blocks hold configuration only; parameters live in the
    dict returned by ``init_params`` so optimizers can treat them uniformly.
    """

    @property
    def name(self) -> str:
        raise NotImplementedError

    def describe(self) -> str:
        """The recipe token this block was parsed from."""
        return self.name

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Shape of one sample after this block, batch axis excluded."""
        return input_shape

    def init_params(self, input_shape: tuple[int, ...], rng: np.random.Generator) -> Params:
        return {}

    @abc.abstractmethod
    def forward(self, params: Params, x: np.ndarray) -> tuple[np.ndarray, Any]:
        """Return the output and whatever ``backward`` needs."""

    @abc.abstractmethod
    def backward(self, params: Params, cache: Any, grad_out: np.ndarray) -> tuple[np.ndarray, Params]:
        """Return the gradient w.r.t. the input and w.r.t. each parameter."""
