"""Rewrite rules that remove redundancy from an Einconv graph.

Three rules, each returning the graph unchanged when it does not apply:

* ``rank1``: a rank index of dim 1, or held by a single vertex, is deleted.
* ``parallel_edge``: two rank indices held by the same vertices merge into one
  index whose dim is the product.
* ``subset_vertex``: a parameter vertex contained in another parameter vertex
  of the same stage is absorbed by it.

Each rewrite leaves the set of representable kernels unchanged.
"""
import logging
import math
from dataclasses import dataclass, replace
from functools import cache
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from einconv.errors import ValidationError
from einconv.graph import EinconvGraph, Vertex, VertexKind, canonical_form, validate
from einconv.tensor import ContractionExpr, DenseTensor, IndexLabel, contract

logger = logging.getLogger(__name__)

RULES = ("rank1", "parallel_edge", "subset_vertex")


@dataclass(frozen=True)
class ReductionStep:
    rule: str
    labels: tuple[str, ...] = ()
    vertices: tuple[int, ...] = ()


@dataclass(frozen=True)
class ReductionTrace:
    steps: tuple[ReductionStep, ...]
    result: EinconvGraph

    def as_rows(self) -> list[dict]:
        return [
            {"step": n, "rule": s.rule, "labels": ",".join(s.labels), "vertices": ",".join(map(str, s.vertices))}
            for n, s in enumerate(self.steps)
        ]


def remove_vertices(g: EinconvGraph, removed: set[int]) -> EinconvGraph:
    if not removed:
        return g
    remap = {}
    vertices = []
    for k, v in enumerate(g.vertices):
        if k not in removed:
            remap[k] = len(vertices)
            vertices.append(v)

    stages, kept_at = [], []
    for n, stage in enumerate(g.stages):
        kept = tuple(remap[k] for k in stage if k in remap)
        if kept:
            stages.append(kept)
            kept_at.append(n)
    # Flags around a dropped stage collapse into one
    activations = [any(g.activations[a:b]) for a, b in zip(kept_at, kept_at[1:])]

    used = {l for v in vertices for l in v.labels}
    inner = tuple(l for l in g.inner if l.name in used)
    return replace(g, vertices=tuple(vertices), inner=inner, stages=tuple(stages), activations=tuple(activations))


def drop_label(g: EinconvGraph, label: str) -> EinconvGraph:
    vertices = tuple(Vertex(tuple(l for l in v.labels if l != label), v.kind) for v in g.vertices)
    inner = tuple(l for l in g.inner if l.name != label)
    g = replace(g, vertices=vertices, inner=inner)
    emptied = {k for k, v in enumerate(vertices) if v.kind == VertexKind.PARAMETER and not v.labels}
    return remove_vertices(g, emptied)


def _rank_holders(g: EinconvGraph) -> dict[str, frozenset[int]]:
    holders = {r: set() for r in g.rank_labels}
    for k, v in enumerate(g.vertices):
        for label in v.labels:
            if label in holders:
                holders[label].add(k)
    return {r: frozenset(ks) for r, ks in holders.items()}


def _rank1_candidates(g: EinconvGraph) -> list[ReductionStep]:
    return [
        ReductionStep("rank1", (r,), tuple(sorted(ks)))
        for r, ks in sorted(_rank_holders(g).items())
        if g.dims[r] == 1 or len(ks) <= 1
    ]


def _parallel_candidates(g: EinconvGraph) -> list[ReductionStep]:
    holders = sorted(_rank_holders(g).items())
    steps = []
    for n, (a, ea) in enumerate(holders):
        for b, eb in holders[n + 1:]:
            if ea == eb:
                steps.append(ReductionStep("parallel_edge", (a, b), tuple(sorted(ea))))
    return steps


def _subset_candidates(g: EinconvGraph) -> list[ReductionStep]:
    stage_of = {k: n for n, stage in enumerate(g.stages) for k in stage}
    params = g.param_indices
    steps = []
    for m in params:
        vm = set(g.vertices[m].labels)
        for n in params:
            if m == n or stage_of.get(m) != stage_of.get(n):
                continue
            vn = set(g.vertices[n].labels)
            # Of two equal vertices the later one goes
            if vm < vn or (vm == vn and m > n):
                steps.append(ReductionStep("subset_vertex", tuple(sorted(vm)), (m, n)))
                break
    return steps


_CANDIDATES = {
    "rank1": _rank1_candidates,
    "parallel_edge": _parallel_candidates,
    "subset_vertex": _subset_candidates,
}


def apply_step(g: EinconvGraph, step: ReductionStep) -> EinconvGraph:
    if step.rule == "rank1":
        return drop_label(g, step.labels[0])
    if step.rule == "parallel_edge":
        a, b = step.labels
        merged = g.dims[a] * g.dims[b]
        g = drop_label(g, b)
        inner = tuple(IndexLabel(a, merged) if l.name == a else l for l in g.inner)
        return replace(g, inner=inner)
    if step.rule == "subset_vertex":
        return remove_vertices(g, {step.vertices[0]})
    raise ValidationError(f"Unknown reduction rule {step.rule!r}")


def _apply_first(g: EinconvGraph, rule: str) -> tuple[EinconvGraph, Optional[ReductionStep]]:
    candidates = _CANDIDATES[rule](g)
    if not candidates:
        return g, None
    return apply_step(g, candidates[0]), candidates[0]


def reduce_rank1(g: EinconvGraph) -> EinconvGraph:
    return _apply_first(g, "rank1")[0]


def reduce_subset_vertex(g: EinconvGraph) -> EinconvGraph:
    return _apply_first(g, "subset_vertex")[0]


def merge_parallel_edges(g: EinconvGraph) -> EinconvGraph:
    return _apply_first(g, "parallel_edge")[0]


def reduce_with_order(g: EinconvGraph, order: Sequence[str] = RULES) -> ReductionTrace:
    """Apply the first applicable rule in ``order``, restarting after every rewrite."""
    steps = []
    while True:
        for rule in order:
            g, step = _apply_first(g, rule)
            if step is not None:
                steps.append(step)
                break
        else:
            return ReductionTrace(tuple(steps), g)


def reduce_to_fixpoint(g: EinconvGraph) -> ReductionTrace:
    return reduce_with_order(g, RULES)


def applicable_steps(g: EinconvGraph) -> list[ReductionStep]:
    return [step for rule in RULES for step in _CANDIDATES[rule](g)]


def iter_fixpoints(g: EinconvGraph, limit: int = 10_000) -> Iterator[EinconvGraph]:
    """Every fixpoint reachable by some maximal rewrite sequence, one per canonical form."""
    seen, emitted = set(), set()
    stack = [g]
    while stack:
        current = stack.pop()
        key = (current.to_json(),)
        if key in seen:
            continue
        seen.add(key)
        if len(seen) > limit:
            raise ValidationError(f"More than {limit} intermediate graphs while exploring rewrites")
        steps = applicable_steps(current)
        if not steps:
            form = canonical_form(current)
            if form not in emitted:
                emitted.add(form)
                yield current
        stack.extend(apply_step(current, step) for step in steps)


def is_nonredundant(g: EinconvGraph) -> bool:
    return validate(g).ok and not applicable_steps(g)


@cache
def partition_count(n: int) -> int:
    """Number of integer partitions of n."""
    if n < 0:
        raise ValidationError(f"partition_count needs n >= 0, got {n}")
    counts = [1] + [0] * n
    for part in range(1, n + 1):
        for total in range(part, n + 1):
            counts[total] += counts[total - part]
    return counts[n]


def _partitions(n: int, largest: int) -> Iterator[list[int]]:
    if n == 0:
        yield []
        return
    for part in range(min(n, largest), 0, -1):
        for rest in _partitions(n - part, part):
            yield [part] + rest


def filter_factorizations(filter_dim: int) -> list[list[int]]:
    """Odd factor sizes whose consecutive application spans ``filter_dim``.

    Each partition p of (filter_dim - 1) / 2 gives factors 2p + 1. Sizes come
    in descending order, the single-factor case first.
    """
    if filter_dim < 1 or filter_dim % 2 == 0:
        raise ValidationError(f"Filter size must be odd and positive, got {filter_dim}")
    if filter_dim == 1:
        return [[1]]
    half = (filter_dim - 1) // 2
    return [[2 * p + 1 for p in parts] for parts in _partitions(half, half)]


def kernel_labels(g: EinconvGraph) -> tuple[str, ...]:
    """Labels of the tensor the parameter vertices contract to: every non-rank label they hold."""
    ranks = set(g.rank_labels)
    labels = [l for k in g.param_indices for l in g.vertices[k].labels if l not in ranks]
    return tuple(dict.fromkeys(labels))


def kernel_tensor(g: EinconvGraph, params: Mapping[int, DenseTensor]) -> DenseTensor:
    ids = list(g.param_indices)
    expr = ContractionExpr(tuple(g.vertices[k].labels for k in ids), kernel_labels(g))
    return contract(expr, [params[k] for k in ids])


def _design_matrix(g: EinconvGraph, params: dict[int, DenseTensor], k: int, output: tuple[str, ...]) -> np.ndarray:
    # Kernel as a linear map of vertex k: contract with every basis tensor at once
    labels = g.vertices[k].labels
    shape = tuple(g.dims[l] for l in labels)
    size = math.prod(shape)
    basis = DenseTensor._wrap(("_basis",) + labels, np.eye(size).reshape((size,) + shape))
    ids = list(g.param_indices)
    tensors = [basis if j == k else params[j] for j in ids]
    operands = tuple(t.labels for t in tensors)
    expr = ContractionExpr(operands, ("_basis",) + output)
    return contract(expr, tensors).data.reshape(size, -1).T


def fit_kernel(
    g: EinconvGraph,
    target: DenseTensor,
    iterations: int = 50,
    restarts: int = 5,
    tol: float = 1e-6,
    seed: int = 0,
) -> float:
    """Fit the parameter vertices of ``g`` to ``target`` by alternating least squares.

    Returns the best relative Frobenius residual over all restarts.
    """
    output = kernel_labels(g)
    if set(target.labels) != set(output):
        raise ValidationError(f"Target labels {target.labels} do not match kernel labels {output}")
    goal = target.transpose_to(output).data.reshape(-1)
    scale = float(np.linalg.norm(goal)) or 1.0
    rng = np.random.default_rng(seed)

    best = math.inf
    for restart in range(restarts):
        params = {
            k: DenseTensor(g.vertices[k].labels, rng.standard_normal([g.dims[l] for l in g.vertices[k].labels]))
            for k in g.param_indices
        }
        residual = math.inf
        for _ in range(iterations):
            for k in g.param_indices:
                design = _design_matrix(g, params, k, output)
                solution, *_ = np.linalg.lstsq(design, goal, rcond=None)
                shape = [g.dims[l] for l in g.vertices[k].labels]
                params[k] = DenseTensor(g.vertices[k].labels, solution.reshape(shape))
            fitted = kernel_tensor(g, params).transpose_to(output).data.reshape(-1)
            residual = float(np.linalg.norm(fitted - goal)) / scale
            if residual < tol:
                break
        logger.debug("ALS restart %d finished with residual %.3g", restart, residual)
        best = min(best, residual)
        if best < tol:
            break
    return best
