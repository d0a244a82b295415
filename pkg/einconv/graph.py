"""Hypergraph model of a convolutional layer.

A layer is a set of vertices, each a set of index labels. The input vertex
carries the spatial labels and ``c``; binary dummy vertices ``{h, h', i}``
couple input rows, output rows and filter rows; parameter vertices are free
tensors. Every inner label defines a hyperedge over the vertices holding it.
Outer labels (``h'``, ``w'``, [``d'``], ``c'``) are the layer output.
"""
import hashlib
import itertools
import json
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from functools import cached_property
from typing import Mapping, Optional, Sequence

from einconv.errors import ValidationError
from einconv.tensor import IndexLabel

logger = logging.getLogger(__name__)

AXES = ("h", "w", "d")
FILTER_LETTERS = {"h": "i", "w": "j", "d": "k"}
CHANNEL_IN = "c"
CHANNEL_OUT = "c'"

# Canonicalization tries every order of rank labels with equal signatures up to this many
_MAX_CANONICAL_PERMUTATIONS = 40320


class VertexKind(Enum):
    PARAMETER = "parameter"
    INPUT = "input"
    DUMMY_VERTICAL = "dummy-vertical"
    DUMMY_HORIZONTAL = "dummy-horizontal"
    DUMMY_DEPTH = "dummy-depth"

    @property
    def is_dummy(self) -> bool:
        return self.value.startswith("dummy")


DUMMY_KINDS = {
    "h": VertexKind.DUMMY_VERTICAL,
    "w": VertexKind.DUMMY_HORIZONTAL,
    "d": VertexKind.DUMMY_DEPTH,
}


def out_label(axis: str) -> str:
    return f"{axis}'"


def filter_label(axis: str, factor: int, n_factors: int) -> str:
    letter = FILTER_LETTERS[axis]
    return letter if n_factors == 1 else f"{letter}{factor + 1}"


def chain_labels(axis: str, n_factors: int) -> list[tuple[str, str, str]]:
    """(in, out, filter) labels of each dummy along one axis, input side first."""
    labels = []
    for m in range(n_factors):
        src = axis if m == 0 else f"{axis}{m}"
        dst = out_label(axis) if m == n_factors - 1 else f"{axis}{m + 1}"
        labels.append((src, dst, filter_label(axis, m, n_factors)))
    return labels


@dataclass(frozen=True)
class Vertex:
    """Dummy vertices keep their labels in (in, out, filter) order."""
    labels: tuple[str, ...]
    kind: VertexKind = VertexKind.PARAMETER

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", VertexKind(self.kind))


@dataclass(frozen=True)
class ConvGeometry:
    spatial_in: tuple[int, ...]
    filter: tuple[int, ...]
    padding: int = 0
    stride: int = 1
    channels_in: int = 1
    channels_out: int = 1

    def __post_init__(self):
        object.__setattr__(self, "spatial_in", tuple(int(s) for s in self.spatial_in))
        object.__setattr__(self, "filter", tuple(int(f) for f in self.filter))
        if len(self.spatial_in) != len(self.filter) or len(self.filter) not in (1, 2, 3):
            raise ValidationError(
                f"Spatial dims {self.spatial_in} and filter {self.filter} must have equal length 1-3"
            )
        if any(f < 1 or f % 2 == 0 for f in self.filter):
            raise ValidationError(f"Filter sizes must be odd and positive, got {self.filter}")
        if self.padding < 0 or self.stride < 1:
            raise ValidationError(f"Invalid padding {self.padding} / stride {self.stride}")
        if self.channels_in < 1 or self.channels_out < 1 or min(self.spatial_in) < 1:
            raise ValidationError("Channels and spatial sizes must be positive")
        for size, f in zip(self.spatial_in, self.filter):
            span = size + 2 * self.padding - f
            if span < 0 or span % self.stride:
                raise ValidationError(
                    f"non-integer output spatial size: ({size} + 2*{self.padding} - {f})/{self.stride} + 1"
                )

    @classmethod
    def same(
        cls,
        spatial_in: Sequence[int],
        filter: Sequence[int],
        channels_in: int,
        channels_out: int,
    ) -> "ConvGeometry":
        """Size-preserving geometry: stride 1, padding (I - 1) / 2."""
        if len(set(filter)) != 1:
            raise ValidationError(f"Same padding needs equal filter sizes, got {tuple(filter)}")
        return cls(tuple(spatial_in), tuple(filter), (filter[0] - 1) // 2, 1, channels_in, channels_out)

    @classmethod
    def parse(cls, spec: str, filter: Sequence[int]) -> "ConvGeometry":
        """Parse ``HxW[xD]:C:C'[:P[:S]]``."""
        try:
            parts = spec.split(":")
            spatial = tuple(int(s) for s in parts[0].lower().split("x"))
            channels_in, channels_out = int(parts[1]), int(parts[2])
            padding = int(parts[3]) if len(parts) > 3 else (max(filter) - 1) // 2
            stride = int(parts[4]) if len(parts) > 4 else 1
        except (IndexError, ValueError) as e:
            raise ValidationError(f"Bad geometry spec {spec!r}, expected HxW[xD]:C:C'[:P[:S]]") from e
        return cls(spatial, tuple(filter), padding, stride, channels_in, channels_out)

    @property
    def ndim(self) -> int:
        return len(self.spatial_in)

    @property
    def spatial_out(self) -> tuple[int, ...]:
        return tuple(
            (size + 2 * self.padding - f) // self.stride + 1
            for size, f in zip(self.spatial_in, self.filter)
        )

    def to_dict(self) -> dict:
        return {
            "spatial_in": list(self.spatial_in),
            "filter": list(self.filter),
            "padding": self.padding,
            "stride": self.stride,
            "channels_in": self.channels_in,
            "channels_out": self.channels_out,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConvGeometry":
        return cls(
            tuple(d["spatial_in"]),
            tuple(d["filter"]),
            int(d.get("padding", 0)),
            int(d.get("stride", 1)),
            int(d["channels_in"]),
            int(d["channels_out"]),
        )


def _chain_dims(
    axis_size: int,
    factors: Sequence[int],
    labels: Sequence[tuple[str, str, str]],
    geometry: ConvGeometry,
) -> dict[str, int]:
    # Padding goes on the first factor, stride on the last; the composition then
    # equals a single convolution of the effective filter size.
    dims = {}
    size = axis_size
    for m, ((src, dst, flt), f) in enumerate(zip(labels, factors)):
        pad = geometry.padding if m == 0 else 0
        stride = geometry.stride if m == len(factors) - 1 else 1
        span = size + 2 * pad - f
        if span < 0 or span % stride:
            raise ValidationError(f"non-integer output spatial size at {dst}")
        dims[src] = size
        dims[flt] = f
        size = span // stride + 1
        dims[dst] = size
    return dims


@dataclass(frozen=True)
class EinconvGraph:
    outer: tuple[IndexLabel, ...]
    inner: tuple[IndexLabel, ...]
    vertices: tuple[Vertex, ...]
    geometry: ConvGeometry
    stages: tuple[tuple[int, ...], ...] = ()
    activations: tuple[bool, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "outer", tuple(self.outer))
        object.__setattr__(self, "inner", tuple(self.inner))
        object.__setattr__(self, "vertices", tuple(self.vertices))
        if not self.stages:
            # Single stage: a fully linear layer
            stage = tuple(k for k, v in enumerate(self.vertices) if v.kind != VertexKind.INPUT)
            object.__setattr__(self, "stages", (stage,))
        else:
            object.__setattr__(self, "stages", tuple(tuple(s) for s in self.stages))
        if not self.activations:
            object.__setattr__(self, "activations", (False,) * (len(self.stages) - 1))
        else:
            object.__setattr__(self, "activations", tuple(bool(a) for a in self.activations))

    @cached_property
    def dims(self) -> dict[str, int]:
        return {label.name: label.dim for label in self.outer + self.inner}

    @property
    def axes(self) -> tuple[str, ...]:
        return AXES[: self.geometry.ndim]

    @property
    def outer_names(self) -> tuple[str, ...]:
        return tuple(label.name for label in self.outer)

    @cached_property
    def input_index(self) -> int:
        for k, v in enumerate(self.vertices):
            if v.kind == VertexKind.INPUT:
                return k
        raise ValidationError("Graph has no input vertex")

    @property
    def param_indices(self) -> tuple[int, ...]:
        return tuple(k for k, v in enumerate(self.vertices) if v.kind == VertexKind.PARAMETER)

    @property
    def dummy_indices(self) -> tuple[int, ...]:
        return tuple(k for k, v in enumerate(self.vertices) if v.kind.is_dummy)

    @cached_property
    def structural_labels(self) -> frozenset[str]:
        labels = {CHANNEL_IN, CHANNEL_OUT}
        for v in self.vertices:
            if v.kind != VertexKind.PARAMETER:
                labels.update(v.labels)
        return frozenset(labels)

    @cached_property
    def rank_labels(self) -> tuple[str, ...]:
        return tuple(sorted(l.name for l in self.inner if l.name not in self.structural_labels))

    @property
    def rank_dims(self) -> dict[str, int]:
        return {r: self.dims[r] for r in self.rank_labels}

    @cached_property
    def filter_labels(self) -> tuple[str, ...]:
        return tuple(self.vertices[k].labels[2] for k in self.dummy_indices)

    def axis_chain(self, axis: str) -> list[int]:
        """Dummy vertex indices along one axis, ordered from the input side."""
        kind = DUMMY_KINDS[axis]
        by_src = {
            self.vertices[k].labels[0]: k
            for k in self.dummy_indices
            if self.vertices[k].kind == kind
        }
        chain, label = [], axis
        while label in by_src and len(chain) <= len(by_src):
            k = by_src[label]
            chain.append(k)
            label = self.vertices[k].labels[1]
        return chain

    def factors(self, axis: str) -> tuple[int, ...]:
        return tuple(self.dims[self.vertices[k].labels[2]] for k in self.axis_chain(axis))

    @property
    def effective_filter(self) -> tuple[int, ...]:
        return tuple(1 + sum(f - 1 for f in self.factors(axis)) for axis in self.axes)

    def dummy_geometry(self, k: int) -> tuple[int, int]:
        """(stride, padding) of dummy vertex k."""
        axis = next(a for a in self.axes if self.vertices[k].kind == DUMMY_KINDS[a])
        chain = self.axis_chain(axis)
        pos = chain.index(k)
        stride = self.geometry.stride if pos == len(chain) - 1 else 1
        padding = self.geometry.padding if pos == 0 else 0
        return stride, padding

    def with_geometry(self, geometry: ConvGeometry) -> "EinconvGraph":
        """Rebind spatial/channel dims to a new geometry; rank dims are kept."""
        if geometry.ndim != self.geometry.ndim:
            raise ValidationError(f"Geometry has {geometry.ndim} axes, graph has {self.geometry.ndim}")
        if tuple(geometry.filter) != self.effective_filter:
            raise ValidationError(
                f"Geometry filter {geometry.filter} differs from graph filter {self.effective_filter}"
            )
        factors = {axis: self.factors(axis) for axis in self.axes}
        params = [self.vertices[k].labels for k in self.param_indices]
        return build_graph(
            params,
            geometry,
            factors,
            self.rank_dims,
            stages=self.stages,
            activations=self.activations,
            vertex_order=self.vertices,
        )

    def with_stages(
        self, stages: Sequence[Sequence[int]], activations: Sequence[bool]
    ) -> "EinconvGraph":
        return replace(
            self,
            stages=tuple(tuple(s) for s in stages),
            activations=tuple(activations) or (False,) * (len(stages) - 1),
        )

    def linear(self) -> "EinconvGraph":
        """The same graph as a single linear stage."""
        return replace(self, stages=(), activations=())

    @property
    def is_linear(self) -> bool:
        return not any(self.activations)

    def param_count(self) -> int:
        return sum(math.prod(self.dims[l] for l in self.vertices[k].labels) for k in self.param_indices)

    def to_dict(self) -> dict:
        return {
            "outer": [label.name for label in self.outer],
            "inner": [{"name": label.name, "dim": label.dim} for label in self.inner],
            "vertices": [{"labels": list(v.labels), "kind": v.kind.value} for v in self.vertices],
            "stages": [list(s) for s in self.stages],
            "activations": list(self.activations),
            "geometry": self.geometry.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping) -> "EinconvGraph":
        try:
            geometry = ConvGeometry.from_dict(d["geometry"])
            inner = tuple(IndexLabel(x["name"], int(x["dim"])) for x in d["inner"])
            vertices = tuple(Vertex(tuple(v["labels"]), VertexKind(v["kind"])) for v in d["vertices"])
            axes = AXES[: geometry.ndim]
            outer_dims = dict(zip((out_label(a) for a in axes), geometry.spatial_out))
            outer_dims[CHANNEL_OUT] = geometry.channels_out
            outer = tuple(IndexLabel(name, outer_dims[name]) for name in d["outer"])
            return cls(
                outer,
                inner,
                vertices,
                geometry,
                tuple(tuple(s) for s in d.get("stages", ())),
                tuple(d.get("activations", ())),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"Malformed graph JSON: {e}") from e

    @classmethod
    def from_json(cls, text: str) -> "EinconvGraph":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ValidationError(f"Malformed graph JSON: {e}") from e


def build_graph(
    param_vertices: Sequence[Sequence[str]],
    geometry: ConvGeometry,
    factors: Optional[Mapping[str, Sequence[int]]] = None,
    rank_dims: Optional[Mapping[str, int]] = None,
    stages: Sequence[Sequence[int]] = (),
    activations: Sequence[bool] = (),
    vertex_order: Optional[Sequence[Vertex]] = None,
) -> EinconvGraph:
    """Assemble a graph from its parameter vertices.

    Vertices are laid out as input, then dummies axis by axis, then parameters,
    unless ``vertex_order`` gives an existing layout to keep.
    """
    axes = AXES[: geometry.ndim]
    factors = {a: tuple((factors or {}).get(a, (geometry.filter[n],))) for n, a in enumerate(axes)}
    rank_dims = dict(rank_dims or {})

    dims: dict[str, int] = {CHANNEL_IN: geometry.channels_in}
    input_vertex = Vertex(tuple(axes) + (CHANNEL_IN,), VertexKind.INPUT)
    dummies = []
    for n, axis in enumerate(axes):
        if 1 + sum(f - 1 for f in factors[axis]) != geometry.filter[n]:
            raise ValidationError(
                f"Factors {factors[axis]} on axis {axis} do not compose to filter {geometry.filter[n]}"
            )
        labels = chain_labels(axis, len(factors[axis]))
        dims.update(_chain_dims(geometry.spatial_in[n], factors[axis], labels, geometry))
        dummies.extend(Vertex(triple, DUMMY_KINDS[axis]) for triple in labels)

    params = [Vertex(tuple(p)) for p in param_vertices]
    if vertex_order is not None:
        vertices = tuple(vertex_order)
        # parameter vertices keep their slots; structural vertices are rebuilt
        structural = {v.labels: v for v in [input_vertex] + dummies}
        vertices = tuple(structural.get(v.labels, v) for v in vertices)
    else:
        vertices = (input_vertex, *dummies, *params)

    outer_names = tuple(out_label(a) for a in axes) + (CHANNEL_OUT,)
    outer_dims = dict(zip(outer_names, geometry.spatial_out + (geometry.channels_out,)))
    outer = tuple(IndexLabel(name, outer_dims[name]) for name in outer_names)

    used = [l for v in vertices for l in v.labels]
    inner_names = list(dict.fromkeys(l for l in used if l not in outer_dims))
    for name in inner_names:
        if name not in dims:
            if name not in rank_dims:
                raise ValidationError(f"missing rank: no dim given for index {name}")
            dims[name] = rank_dims[name]
    inner = tuple(IndexLabel(name, dims[name]) for name in inner_names)
    return EinconvGraph(outer, inner, vertices, geometry, tuple(stages), tuple(activations))


def derive_hyperedges(g: EinconvGraph) -> dict[str, frozenset[int]]:
    """e_r = {v : r in v} for every label, outer labels included."""
    edges: dict[str, set[int]] = {label.name: set() for label in g.outer + g.inner}
    for k, v in enumerate(g.vertices):
        for label in v.labels:
            edges.setdefault(label, set()).add(k)
    return {label: frozenset(ks) for label, ks in edges.items()}


def is_connected(g: EinconvGraph) -> bool:
    """True when every vertex reaches the input through shared inner labels."""
    outer = set(g.outer_names)
    parent = list(range(len(g.vertices)))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for label, ks in derive_hyperedges(g).items():
        if label in outer or not ks:
            continue
        first, *rest = sorted(ks)
        for k in rest:
            parent[find(k)] = find(first)
    return len({find(k) for k in range(len(g.vertices))}) == 1


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...]
    effective_filter: tuple[int, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


def validate(g: EinconvGraph) -> ValidationReport:
    """Check the structural invariants of a graph. Never raises."""
    violations: list[str] = []
    names = [label.name for label in g.outer + g.inner]
    if len(set(names)) != len(names):
        violations.append("duplicate label declarations")
    declared = set(names)
    axes = g.axes

    for k, v in enumerate(g.vertices):
        if len(set(v.labels)) != len(v.labels):
            violations.append(f"self-loop: vertex {k} repeats a label in {v.labels}")
        if undeclared := [l for l in v.labels if l not in declared]:
            violations.append(f"vertex {k} uses undeclared labels {undeclared}")
        if v.kind == VertexKind.PARAMETER and not v.labels:
            violations.append(f"vertex {k} is an empty parameter vertex")

    inputs = [v for v in g.vertices if v.kind == VertexKind.INPUT]
    if len(inputs) != 1:
        violations.append(f"expected exactly one input vertex, found {len(inputs)}")
    elif set(inputs[0].labels) != set(axes) | {CHANNEL_IN} or len(inputs[0].labels) != len(axes) + 1:
        violations.append(f"input vertex must carry exactly {set(axes) | {CHANNEL_IN}}")

    effective = []
    for axis in axes:
        kind = DUMMY_KINDS[axis]
        dummies = [k for k, v in enumerate(g.vertices) if v.kind == kind]
        chain = g.axis_chain(axis)
        if not dummies:
            violations.append(f"axis {axis} has no dummy vertex")
        if sorted(chain) != sorted(dummies):
            violations.append(f"dummies on axis {axis} do not form a chain from {axis} to {out_label(axis)}")
        elif chain and g.vertices[chain[-1]].labels[1] != out_label(axis):
            violations.append(f"dummy chain on axis {axis} does not end at {out_label(axis)}")
        for k in dummies:
            if len(g.vertices[k].labels) != 3:
                violations.append(f"dummy vertex {k} must carry exactly (in, out, filter)")
        try:
            sizes = g.factors(axis)
        except KeyError:
            sizes = ()
        if any(f % 2 == 0 for f in sizes):
            violations.append(f"even filter size on axis {axis}: {sizes}")
        effective.append(1 + sum(f - 1 for f in sizes))

    if tuple(effective) != tuple(g.geometry.filter):
        violations.append(
            f"effective filter {tuple(effective)} differs from geometry filter {g.geometry.filter}"
        )

    edges = derive_hyperedges(g)
    for label in g.outer + g.inner:
        if not edges.get(label.name):
            violations.append(f"label {label.name} appears in no vertex")

    staged = sorted(k for s in g.stages for k in s)
    non_input = [k for k, v in enumerate(g.vertices) if v.kind != VertexKind.INPUT]
    if staged != non_input:
        violations.append("stages do not partition the non-input vertices")
    if any(not s for s in g.stages):
        violations.append("empty stage")
    if len(g.activations) != len(g.stages) - 1:
        violations.append("activation flags must sit between consecutive stages")

    return ValidationReport(tuple(violations), tuple(effective))


def _canonical_encoding(g: EinconvGraph, mapping: Mapping[str, str]) -> str:
    vertices = []
    for v in g.vertices:
        if v.kind == VertexKind.PARAMETER:
            labels = tuple(sorted(mapping.get(l, l) for l in v.labels))
        else:
            labels = v.labels
        vertices.append((v.kind.value, labels))
    payload = {
        "vertices": sorted(vertices),
        "ranks": sorted((mapping[r], g.dims[r]) for r in g.rank_labels),
        "filters": sorted((f, g.dims[f]) for f in g.filter_labels),
        "ndim": g.geometry.ndim,
    }
    return json.dumps(payload, separators=(",", ":"))


def canonical_form(g: EinconvGraph) -> bytes:
    """Identical for graphs equal up to vertex order, label order inside
    vertices and renaming of rank indices. Dims of ranks and filters count;
    geometry and stages do not."""
    ranks = g.rank_labels
    rank_set = set(ranks)

    def signature(r: str):
        members = []
        for v in g.vertices:
            if r in v.labels:
                fixed = tuple(sorted(l for l in v.labels if l not in rank_set))
                members.append((fixed, sum(1 for l in v.labels if l in rank_set)))
        return tuple(sorted(members)), g.dims[r]

    ordered = sorted(ranks, key=signature)
    groups = [list(grp) for _, grp in itertools.groupby(ordered, key=signature)]
    n_perms = math.prod(math.factorial(len(grp)) for grp in groups)
    if n_perms > _MAX_CANONICAL_PERMUTATIONS:
        logger.warning("Canonical form of %d rank labels falls back to signature order", len(ranks))
        groups = [[r] for r in ordered]

    best = None
    for choice in itertools.product(*(itertools.permutations(grp) for grp in groups)):
        order = [r for grp in choice for r in grp]
        mapping = {r: f"r{n + 1}" for n, r in enumerate(order)}
        encoding = _canonical_encoding(g, mapping)
        if best is None or encoding < best:
            best = encoding
    if best is None:
        best = _canonical_encoding(g, {})
    return best.encode()


def canonical_hash(g: EinconvGraph) -> str:
    return hashlib.sha1(canonical_form(g)).hexdigest()[:16]


def canonical_graph(g: EinconvGraph) -> EinconvGraph:
    """Copy of ``g`` with rank labels renamed to r1, r2, ... in canonical order."""
    encoding = json.loads(canonical_form(g))
    ranks = g.rank_labels
    # Recover the mapping by matching the canonical encoding
    for perm in itertools.permutations(ranks):
        mapping = {r: f"r{n + 1}" for n, r in enumerate(perm)}
        if json.loads(_canonical_encoding(g, mapping)) == encoding:
            return rename_labels(g, mapping)
        if math.factorial(len(ranks)) > _MAX_CANONICAL_PERMUTATIONS:
            break
    return g


def rename_labels(g: EinconvGraph, mapping: Mapping[str, str]) -> EinconvGraph:
    vertices = tuple(Vertex(tuple(mapping.get(l, l) for l in v.labels), v.kind) for v in g.vertices)
    inner = tuple(IndexLabel(mapping.get(l.name, l.name), l.dim) for l in g.inner)
    return replace(g, vertices=vertices, inner=inner)


# Parameter vertices of each named layer. Tokens: "F" expands to every filter
# label, "F0"/"F1"/"F2" to one axis. Stage groups list ("p", n) parameter
# vertices and ("d", axis position) dummy chains.
_NAMED = {
    "standard": (2, (), [("F", "c", "c'")], [[("d", 0), ("d", 1), ("p", 0)]]),
    "depthwise_separable": (
        2, (), [("F", "c"), ("c", "c'")],
        [[("d", 0), ("d", 1), ("p", 0)], [("p", 1)]],
    ),
    "bottleneck": (
        2, ("a", "b"), [("c", "a"), ("F", "a", "b"), ("b", "c'")],
        [[("p", 0)], [("d", 0), ("d", 1), ("p", 1)], [("p", 2)]],
    ),
    "inverted_bottleneck": (
        2, ("a",), [("c", "a"), ("F", "a"), ("a", "c'")],
        [[("p", 0)], [("d", 0), ("d", 1), ("p", 1)], [("p", 2)]],
    ),
    "flattened": (
        2, (), [("F0", "c'"), ("F1", "c'"), ("c", "c'")],
        [[("d", 0), ("d", 1), ("p", 0), ("p", 1), ("p", 2)]],
    ),
    "cp": (
        2, ("g",), [("F0", "g"), ("F1", "g"), ("c", "g"), ("g", "c'")],
        [[("d", 0), ("d", 1), ("p", 0), ("p", 1), ("p", 2), ("p", 3)]],
    ),
    "low_rank": (
        2, ("a",), [("F0", "c", "a"), ("F1", "a", "c'")],
        [[("d", 0), ("p", 0)], [("d", 1), ("p", 1)]],
    ),
    "standard3d": (3, (), [("F", "c", "c'")], [[("d", 0), ("d", 1), ("d", 2), ("p", 0)]]),
    "depthwise_separable3d": (
        3, (), [("F", "c"), ("c", "c'")],
        [[("d", 0), ("d", 1), ("d", 2), ("p", 0)], [("p", 1)]],
    ),
    "two_plus_one_d": (
        3, ("a",), [("F0", "F1", "c", "a"), ("F2", "a", "c'")],
        [[("d", 0), ("d", 1), ("p", 0)], [("d", 2), ("p", 1)]],
    ),
}

NAMED_KINDS = tuple(_NAMED) + ("factoring",)
NAMED_2D = tuple(k for k in NAMED_KINDS if k == "factoring" or _NAMED[k][0] == 2)
NAMED_3D = tuple(k for k in NAMED_KINDS if k != "factoring" and _NAMED[k][0] == 3)

# Rank names each named layer needs
REQUIRED_RANKS = {kind: spec[1] for kind, spec in _NAMED.items()}


def _expand_tokens(tokens: Sequence[str], filters: Sequence[str]) -> tuple[str, ...]:
    labels = []
    for token in tokens:
        if token == "F":
            labels.extend(filters)
        elif token in ("F0", "F1", "F2"):
            labels.append(filters[int(token[1])])
        else:
            labels.append(token)
    return tuple(labels)


def _make_factoring(geom: ConvGeometry, ranks: Mapping[str, int], nonlinear: bool) -> EinconvGraph:
    axes = AXES[: geom.ndim]
    n_factors = {(f - 1) // 2 for f in geom.filter}
    if len(n_factors) != 1 or min(geom.filter) < 5:
        raise ValidationError(f"Factoring needs equal filter sizes >= 5, got {geom.filter}")
    (m,) = n_factors
    rank_names = ["a"] if m == 2 else [f"a{n + 1}" for n in range(m - 1)]
    if missing := [r for r in rank_names[: m - 1] if r not in ranks]:
        raise ValidationError(f"missing rank {missing} for factoring")
    links = [CHANNEL_IN] + rank_names[: m - 1] + [CHANNEL_OUT]

    params = []
    for n in range(m):
        filters = tuple(filter_label(a, n, m) for a in axes)
        params.append(filters + (links[n], links[n + 1]))
    factors = {a: (3,) * m for a in axes}
    g = build_graph(params, geom, factors, {r: ranks[r] for r in rank_names[: m - 1]})
    if not nonlinear:
        return g

    # One stage per 3x3 convolution, each holding its dummies
    stages = []
    first_param = len(g.vertices) - m
    for n in range(m):
        stage = [g.axis_chain(a)[n] for a in axes] + [first_param + n]
        stages.append(tuple(stage))
    return g.with_stages(stages, (True,) * (m - 1))


def make_named(
    kind: str,
    geom: ConvGeometry,
    ranks: Optional[Mapping[str, int]] = None,
    nonlinear: bool = False,
) -> EinconvGraph:
    """Build one of the named layers.

    ``nonlinear`` splits the layer into one stage per consecutive convolution
    with a ReLU between stages.
    """
    ranks = dict(ranks or {})
    if kind == "factoring":
        return _make_factoring(geom, ranks, nonlinear)
    if kind not in _NAMED:
        raise ValidationError(f"Unknown layer kind {kind!r}; choose from {', '.join(NAMED_KINDS)}")

    ndim, needed, tokens, stage_tokens = _NAMED[kind]
    if geom.ndim != ndim:
        raise ValidationError(f"{kind} needs a {ndim}D geometry, got {geom.ndim}D")
    if missing := [r for r in needed if r not in ranks]:
        raise ValidationError(f"missing rank {missing} for {kind}")

    axes = AXES[:ndim]
    filters = [filter_label(a, 0, 1) for a in axes]
    params = []
    for vertex_tokens in tokens:
        labels = _expand_tokens(vertex_tokens, filters)
        # Filter labels of size 1 carry no structure
        labels = tuple(
            l for l in labels if not (l in filters and geom.filter[filters.index(l)] == 1)
        )
        params.append(labels)
    g = build_graph(params, geom, None, {r: ranks[r] for r in needed})
    if not nonlinear or len(stage_tokens) == 1:
        return g

    first_param = len(g.vertices) - len(params)
    stages = []
    for group in stage_tokens:
        stage = []
        for token, n in group:
            stage.extend(g.axis_chain(axes[n]) if token == "d" else [first_param + n])
        stages.append(tuple(stage))
    return g.with_stages(stages, (True,) * (len(stages) - 1))
