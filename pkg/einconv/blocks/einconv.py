from typing import Optional

import numpy as np

from einconv.blocks.models import Block, Params
from einconv.errors import ConfigError
from einconv.graph import ConvGeometry, EinconvGraph
from einconv.layer import (
    LayerInstance,
    backward,
    forward_with_tape,
    init_params,
    input_labels,
    output_labels,
)
from einconv.tensor import DenseTensor


def _param_key(k: int) -> str:
    return f"v{k}"


class Einconv(Block):
    """A convolution whose kernel is the tensor network of ``template``.

    The template fixes the structure and rank dims; spatial size and channel
    counts are rebound to whatever reaches the block. Padding keeps the
    spatial size.
    """

    def __init__(self, out_channels: int, template: Optional[EinconvGraph] = None, kind: Optional[str] = None):
        if out_channels < 1:
            raise ConfigError(f"Einconv needs a positive channel count, got {out_channels}")
        self.out_channels = out_channels
        self.template = template
        self.kind = kind

    @property
    def name(self) -> str:
        return "Einconv"

    def describe(self) -> str:
        if self.kind:
            return f"Einconv({self.out_channels},{self.kind})"
        return f"Einconv({self.out_channels})"

    def graph_for(self, input_shape: tuple[int, ...]) -> EinconvGraph:
        if self.template is None:
            raise ConfigError("Einconv block has no layer graph")
        *spatial, channels = input_shape
        if len(spatial) != self.template.geometry.ndim:
            raise ConfigError(
                f"Einconv layer is {self.template.geometry.ndim}D but receives shape {input_shape}"
            )
        geometry = ConvGeometry.same(tuple(spatial), self.template.effective_filter, channels, self.out_channels)
        return self.template.with_geometry(geometry)

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return input_shape[:-1] + (self.out_channels,)

    def init_params(self, input_shape: tuple[int, ...], rng: np.random.Generator) -> Params:
        seed = int(rng.integers(2**31))
        layer = init_params(self.graph_for(input_shape), seed=seed)
        return {_param_key(k): t.data.copy() for k, t in layer.params.items()}

    def _layer(self, params: Params, input_shape: tuple[int, ...]) -> LayerInstance:
        graph = self.graph_for(input_shape)
        tensors = {
            k: DenseTensor._wrap(graph.vertices[k].labels, params[_param_key(k)])
            for k in graph.param_indices
        }
        return LayerInstance(graph, tensors)

    def forward(self, params: Params, x: np.ndarray):
        layer = self._layer(params, x.shape[1:])
        out, tape = forward_with_tape(layer, DenseTensor._wrap(input_labels(layer.graph), x))
        return out.data, (layer, tape)

    def backward(self, params: Params, cache, grad_out: np.ndarray):
        layer, tape = cache
        upstream = DenseTensor._wrap(output_labels(layer.graph), grad_out)
        grad_x, grads = backward(layer, tape, upstream)
        grad_x = grad_x.transpose_to(input_labels(layer.graph))
        return grad_x.data, {_param_key(k): g.data for k, g in grads.items()}
