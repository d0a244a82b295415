"""Runnable layers built from an Einconv graph.

The forward pass walks the graph stage by stage: each stage contracts its
vertices with the running intermediate, which carries the batch label ``n``
and every label still needed downstream. A ReLU follows a stage when its
activation flag is set.
"""
import itertools
import json
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from einconv.errors import ValidationError
from einconv.graph import (
    AXES,
    CHANNEL_IN,
    CHANNEL_OUT,
    ConvGeometry,
    EinconvGraph,
    out_label,
    validate,
)
from einconv.tensor import (
    ContractionExpr,
    ContractionPlan,
    DenseTensor,
    DummyTensor,
    contract,
    grad_contract,
    plan_greedy,
)

logger = logging.getLogger(__name__)

BATCH = "n"


@dataclass(frozen=True)
class StagePlan:
    vertices: tuple[int, ...]
    expr: ContractionExpr
    plan: ContractionPlan
    relu: bool


@lru_cache(maxsize=1024)
def stage_plans(graph: EinconvGraph, batch: int = 1) -> tuple[StagePlan, ...]:
    """Contraction expression and plan of every stage; operand 0 is the running tensor."""
    dims = dict(graph.dims)
    dims[BATCH] = batch
    running = (BATCH,) + graph.vertices[graph.input_index].labels
    outer = set(graph.outer_names)

    plans = []
    for s, stage in enumerate(graph.stages):
        later = {l for st in graph.stages[s + 1:] for k in st for l in graph.vertices[k].labels}
        operands = (running,) + tuple(graph.vertices[k].labels for k in stage)
        dummies = tuple(
            (pos + 1, *graph.vertices[k].labels)
            for pos, k in enumerate(stage)
            if graph.vertices[k].kind.is_dummy
        )
        present = dict.fromkeys(l for op in operands for l in op)
        needed = {BATCH} | outer | later
        output = tuple(l for l in present if l in needed)
        expr = ContractionExpr(operands, output, dummies)
        relu = s < len(graph.stages) - 1 and graph.activations[s]
        plans.append(StagePlan(tuple(stage), expr, plan_greedy(expr, dims), relu))
        running = output
    return tuple(plans)


@lru_cache(maxsize=1024)
def build_dummies(graph: EinconvGraph) -> dict[int, DummyTensor]:
    dims = graph.dims
    dummies = {}
    for k in graph.dummy_indices:
        src, dst, flt = graph.vertices[k].labels
        stride, padding = graph.dummy_geometry(k)
        dummies[k] = DummyTensor(src, dst, flt, dims[src], dims[dst], dims[flt], stride, padding)
    return dummies


def output_labels(graph: EinconvGraph) -> tuple[str, ...]:
    return (BATCH,) + graph.outer_names


def input_labels(graph: EinconvGraph) -> tuple[str, ...]:
    return (BATCH,) + graph.vertices[graph.input_index].labels


@dataclass(frozen=True, eq=False)
class LayerInstance:
    graph: EinconvGraph
    params: Mapping[int, DenseTensor]

    def __post_init__(self):
        for k in self.graph.param_indices:
            if k not in self.params:
                raise ValidationError(f"No tensor for parameter vertex {k}")
            tensor, labels = self.params[k], self.graph.vertices[k].labels
            if set(tensor.labels) != set(labels):
                raise ValidationError(f"Vertex {k} tensor has labels {tensor.labels}, expected {labels}")
            for label, dim in tensor.dims.items():
                if self.graph.dims[label] != dim:
                    raise ValidationError(
                        f"dimension mismatch for label {label}: {dim} vs {self.graph.dims[label]}"
                    )

    @property
    def geometry(self) -> ConvGeometry:
        return self.graph.geometry

    @property
    def dummies(self) -> dict[int, DummyTensor]:
        return build_dummies(self.graph)

    def vertex_tensor(self, k: int) -> DenseTensor:
        return self.dummies[k] if k in self.dummies else self.params[k]

    def with_params(self, params: Mapping[int, DenseTensor]) -> "LayerInstance":
        return LayerInstance(self.graph, dict(params))

    def with_geometry(self, geometry: ConvGeometry) -> "LayerInstance":
        return LayerInstance(self.graph.with_geometry(geometry), dict(self.params))


def init_params(
    graph: EinconvGraph,
    geometry: Optional[ConvGeometry] = None,
    seed: int = 0,
) -> LayerInstance:
    """Uniform on [-b, b], b = sqrt(6 / fan_in); fan_in is the product of the
    vertex's non-output label dims."""
    if geometry is not None and geometry != graph.geometry:
        graph = graph.with_geometry(geometry)
    report = validate(graph)
    if not report.ok:
        raise ValidationError("Invalid graph: " + "; ".join(report.violations))

    rng = np.random.default_rng(seed)
    outer = set(graph.outer_names)
    params = {}
    for k in graph.param_indices:
        labels = graph.vertices[k].labels
        shape = [graph.dims[l] for l in labels]
        fan_in = math.prod(graph.dims[l] for l in labels if l not in outer)
        bound = math.sqrt(6.0 / fan_in)
        params[k] = DenseTensor(labels, rng.uniform(-bound, bound, size=shape))
    return LayerInstance(graph, params)


@dataclass(frozen=True)
class StageRecord:
    stage: StagePlan
    operands: tuple[DenseTensor, ...]
    result: DenseTensor


def _check_input(layer: LayerInstance, x: DenseTensor) -> DenseTensor:
    expected = input_labels(layer.graph)
    if set(x.labels) != set(expected):
        raise ValidationError(f"Input labels {x.labels} do not match {expected}")
    x = x.transpose_to(expected)
    dims = layer.graph.dims
    for label, dim in zip(expected[1:], x.shape[1:]):
        if dims[label] != dim:
            raise ValidationError(f"dimension mismatch for label {label}: {dim} vs {dims[label]}")
    return x


def forward_with_tape(layer: LayerInstance, x: DenseTensor) -> tuple[DenseTensor, list[StageRecord]]:
    x = _check_input(layer, x)
    running = x
    tape = []
    for stage in stage_plans(layer.graph, x.shape[0]):
        operands = (running,) + tuple(layer.vertex_tensor(k) for k in stage.vertices)
        result = contract(stage.expr, operands, stage.plan)
        tape.append(StageRecord(stage, operands, result))
        running = relu(result) if stage.relu else result
    return running.transpose_to(output_labels(layer.graph)), tape


def forward(layer: LayerInstance, x: DenseTensor) -> DenseTensor:
    """Labels in: (n, h, w[, d], c). Labels out: (n, h', w'[, d'], c')."""
    return forward_with_tape(layer, x)[0]


def backward(
    layer: LayerInstance,
    tape: Sequence[StageRecord],
    upstream: DenseTensor,
) -> tuple[DenseTensor, dict[int, DenseTensor]]:
    """Gradients with respect to the layer input and every parameter vertex."""
    grads: dict[int, DenseTensor] = {}
    for record in reversed(tape):
        stage = record.stage
        upstream = upstream.transpose_to(record.result.labels)
        if stage.relu:
            mask = record.result.data > 0
            upstream = DenseTensor._wrap(upstream.labels, upstream.data * mask)
        wrt = [0] + [
            pos + 1 for pos, k in enumerate(stage.vertices) if k in layer.params
        ]
        stage_grads = grad_contract(stage.expr, record.operands, upstream, wrt)
        for pos, k in enumerate(stage.vertices):
            if k in layer.params:
                grads[k] = stage_grads[pos + 1].transpose_to(layer.params[k].labels)
        upstream = stage_grads[0]
    return upstream, grads


def relu(t: DenseTensor) -> DenseTensor:
    return DenseTensor._wrap(t.labels, np.maximum(t.data, 0.0))


def complexity(layer: Union[LayerInstance, EinconvGraph]) -> tuple[int, int]:
    """(parameter count, FLOPs of the planned forward at batch 1)."""
    graph = layer.graph if isinstance(layer, LayerInstance) else layer
    flops = sum(stage.plan.est_flops for stage in stage_plans(graph, 1))
    return graph.param_count(), flops


def _kernel_labels(ndim: int) -> tuple[str, ...]:
    return tuple("ijk"[:ndim]) + (CHANNEL_IN, CHANNEL_OUT)


def effective_kernel(layer: LayerInstance) -> DenseTensor:
    """Dense kernel (i, j[, k], c, c') of a linear layer, read off impulse responses."""
    graph = layer.graph
    if not graph.is_linear:
        raise ValidationError("Effective kernel is only defined for linear layers")
    geo = graph.geometry
    impulse_geo = ConvGeometry(geo.filter, geo.filter, 0, 1, geo.channels_in, geo.channels_out)
    probe = layer.with_geometry(impulse_geo)

    n_in = math.prod(geo.filter) * geo.channels_in
    x = np.eye(n_in).reshape((n_in,) + geo.filter + (geo.channels_in,))
    z = forward(probe, DenseTensor._wrap(input_labels(probe.graph), x))
    kernel = z.data.reshape(geo.filter + (geo.channels_in, geo.channels_out))
    return DenseTensor._wrap(_kernel_labels(geo.ndim), kernel)


def _as_array(x: Union[DenseTensor, np.ndarray]) -> np.ndarray:
    return x.data if isinstance(x, DenseTensor) else np.asarray(x, dtype=np.float64)


def _oracle_positions(geometry: ConvGeometry):
    return itertools.product(*(range(s) for s in geometry.spatial_out))


def _source(out_pos, offset, geometry: ConvGeometry):
    src = tuple(o * geometry.stride + f - geometry.padding for o, f in zip(out_pos, offset))
    inside = all(0 <= s < size for s, size in zip(src, geometry.spatial_in))
    return src if inside else None


def direct_conv_oracle(
    x: Union[DenseTensor, np.ndarray],
    kernel: Union[DenseTensor, np.ndarray],
    geometry: ConvGeometry,
) -> DenseTensor:
    """Nested-loop convolution; x is (n, spatial..., c), kernel (filter..., c, c')."""
    xa, ka = _as_array(x), _as_array(kernel)
    if xa.shape[1:] != geometry.spatial_in + (geometry.channels_in,):
        raise ValidationError(f"Input shape {xa.shape} does not match geometry")
    if ka.shape != geometry.filter + (geometry.channels_in, geometry.channels_out):
        raise ValidationError(f"Kernel shape {ka.shape} does not match geometry")

    out = np.zeros((xa.shape[0],) + geometry.spatial_out + (geometry.channels_out,))
    for n in range(xa.shape[0]):
        for out_pos in _oracle_positions(geometry):
            acc = np.zeros(geometry.channels_out)
            for offset in itertools.product(*(range(f) for f in geometry.filter)):
                src = _source(out_pos, offset, geometry)
                if src is None:
                    continue
                for c in range(geometry.channels_in):
                    acc += xa[(n,) + src + (c,)] * ka[offset + (c,)]
            out[(n,) + out_pos] = acc
    labels = (BATCH,) + tuple(out_label(a) for a in AXES[: geometry.ndim]) + (CHANNEL_OUT,)
    return DenseTensor._wrap(labels, out)


def direct_depthwise_oracle(
    x: Union[DenseTensor, np.ndarray],
    kernel: Union[DenseTensor, np.ndarray],
    geometry: ConvGeometry,
) -> DenseTensor:
    """Nested-loop depthwise convolution; kernel is (filter..., c), output keeps c."""
    xa, ka = _as_array(x), _as_array(kernel)
    if ka.shape != geometry.filter + (geometry.channels_in,):
        raise ValidationError(f"Kernel shape {ka.shape} does not match geometry")

    out = np.zeros((xa.shape[0],) + geometry.spatial_out + (geometry.channels_in,))
    for n in range(xa.shape[0]):
        for out_pos in _oracle_positions(geometry):
            for c in range(geometry.channels_in):
                acc = 0.0
                for offset in itertools.product(*(range(f) for f in geometry.filter)):
                    src = _source(out_pos, offset, geometry)
                    if src is not None:
                        acc += xa[(n,) + src + (c,)] * ka[offset + (c,)]
                out[(n,) + out_pos + (c,)] = acc
    labels = (BATCH,) + tuple(out_label(a) for a in AXES[: geometry.ndim]) + (CHANNEL_IN,)
    return DenseTensor._wrap(labels, out)


def _write_blob(path: Path, tensor: DenseTensor) -> None:
    header = np.array((tensor.data.ndim,) + tensor.shape, dtype="<u4")
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def _read_blob(path: Path, labels: Sequence[str]) -> DenseTensor:
    raw = path.read_bytes()
    if len(raw) < 4:
        raise ValidationError(f"{path} is truncated")
    ndim = int(np.frombuffer(raw[:4], dtype="<u4")[0])
    if len(raw) < 4 * (ndim + 1):
        raise ValidationError(f"{path} is truncated")
    shape = tuple(int(d) for d in np.frombuffer(raw[4:4 * (ndim + 1)], dtype="<u4"))
    body = raw[4 * (ndim + 1):]
    if len(body) != 8 * math.prod(shape):
        raise ValidationError(f"{path} holds {len(body)} data bytes, expected {8 * math.prod(shape)}")
    return DenseTensor(labels, np.frombuffer(body, dtype="<f8").reshape(shape))


def save_layer(layer: LayerInstance, directory: Union[str, Path]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    directory.joinpath("graph.json").write_text(layer.graph.to_json())
    for k in layer.graph.param_indices:
        tensor = layer.params[k].transpose_to(layer.graph.vertices[k].labels)
        _write_blob(directory.joinpath(f"vertex_{k}.bin"), tensor)


def load_layer(directory: Union[str, Path]) -> LayerInstance:
    directory = Path(directory)
    graph = EinconvGraph.from_json(directory.joinpath("graph.json").read_text())
    params = {
        k: _read_blob(directory.joinpath(f"vertex_{k}.bin"), graph.vertices[k].labels)
        for k in graph.param_indices
    }
    return LayerInstance(graph, params)


def layer_summary(layer: LayerInstance) -> dict:
    params, flops = complexity(layer)
    return {
        "params": params,
        "flops": flops,
        "stages": len(layer.graph.stages),
        "geometry": json.dumps(layer.geometry.to_dict()),
    }
