"""Labelled dense tensors and a generalized einsum engine.

Operands name their axes; a label shared by two or more operands and absent
from the output is a hyperedge and is summed once across all of them. A
contraction is executed from a ``ContractionPlan``: an ordered list of
pairwise steps, each lowered to a transpose-reshape-matmul, plus zero-cost
gathers for the binary dummy tensors that encode convolution windows.
"""
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from itertools import combinations
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from einconv.errors import ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class IndexLabel:
    name: str
    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError(f"Index {self.name} has dim {self.dim}; dims must be >= 1")


class DenseTensor:
    """A float64 array whose axes are named. Immutable after construction."""

    def __init__(self, labels: Sequence[str], data):
        labels = tuple(labels)
        if len(set(labels)) != len(labels):
            raise ValidationError(f"Repeated label in {labels}")

        arr = np.array(data, dtype=np.float64)
        if arr.ndim != len(labels):
            raise ValidationError(
                f"Array of rank {arr.ndim} does not match labels {labels}"
            )
        arr.flags.writeable = False
        self._labels = labels
        self._data = arr

    @classmethod
    def _wrap(cls, labels: Sequence[str], arr: np.ndarray) -> "DenseTensor":
        """Build without copying; the tensor holds a read-only view of ``arr``."""
        obj = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64).view()
        arr.flags.writeable = False
        obj._labels = tuple(labels)
        obj._data = arr
        return obj

    @classmethod
    def from_flat(cls, labels: Sequence[IndexLabel], flat: Sequence[float]) -> "DenseTensor":
        shape = tuple(label.dim for label in labels)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != math.prod(shape):
            raise ValidationError(
                f"Flat data of length {flat.size} does not fill shape {shape}"
            )
        return cls([label.name for label in labels], flat.reshape(shape))

    @property
    def labels(self) -> tuple[str, ...]:
        return self._labels

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def dims(self) -> dict[str, int]:
        return dict(zip(self._labels, self._data.shape))

    @property
    def index_labels(self) -> tuple[IndexLabel, ...]:
        return tuple(IndexLabel(n, d) for n, d in zip(self._labels, self._data.shape))

    def flat(self) -> np.ndarray:
        return self._data.reshape(-1)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self._data).all())

    def transpose_to(self, labels: Sequence[str]) -> "DenseTensor":
        labels = tuple(labels)
        if labels == self._labels:
            return self
        if set(labels) != set(self._labels):
            raise ValidationError(f"Cannot transpose {self._labels} to {labels}")
        perm = [self._labels.index(label) for label in labels]
        return DenseTensor._wrap(labels, self._data.transpose(perm))

    def relabel(self, mapping: Mapping[str, str]) -> "DenseTensor":
        return DenseTensor._wrap([mapping.get(l, l) for l in self._labels], self._data)

    def __repr__(self) -> str:
        dims = ", ".join(f"{n}={d}" for n, d in self.dims.items())
        return f"DenseTensor({dims})"


class DummyTensor(DenseTensor):
    """Binary tensor p[h, h', i] = 1 iff h = h' * stride + i - padding (0-based).

    Out-of-range ``h`` (the zero padding) simply has no nonzero.
    """

    def __init__(
        self,
        in_label: str,
        out_label: str,
        filter_label: str,
        in_dim: int,
        out_dim: int,
        filter_dim: int,
        stride: int = 1,
        padding: int = 0,
    ):
        self.in_label = in_label
        self.out_label = out_label
        self.filter_label = filter_label
        self.stride = stride
        self.padding = padding

        out_pos = np.arange(out_dim)[:, None]
        filt_pos = np.arange(filter_dim)[None, :]
        src = out_pos * stride + filt_pos - padding
        valid = (src >= 0) & (src < in_dim)
        self.source_index = np.where(valid, src, -1)
        self.source_index.flags.writeable = False

        dense = np.zeros((in_dim, out_dim, filter_dim))
        o_idx, f_idx = np.nonzero(valid)
        dense[src[valid], o_idx, f_idx] = 1.0
        super().__init__((in_label, out_label, filter_label), dense)

    @property
    def roles(self) -> tuple[str, str, str]:
        return self.in_label, self.out_label, self.filter_label

    @property
    def nnz(self) -> int:
        return int((self.source_index >= 0).sum())


@dataclass(frozen=True)
class ContractionExpr:
    """Operand label-sets, the output label-set and which operands are dummies.

    ``dummies`` holds ``(operand index, in label, out label, filter label)``.
    """
    operands: tuple[tuple[str, ...], ...]
    output: tuple[str, ...]
    dummies: tuple[tuple[int, str, str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "operands", tuple(tuple(op) for op in self.operands))
        object.__setattr__(self, "output", tuple(self.output))
        for op in self.operands:
            if len(set(op)) != len(op):
                raise ValidationError(f"self-loop: operand {op} repeats a label")
        if len(set(self.output)) != len(self.output):
            raise ValidationError(f"Output {self.output} repeats a label")
        union = set().union(*self.operands) if self.operands else set()
        if missing := [label for label in self.output if label not in union]:
            raise ValidationError(f"Output labels {missing} are absent from all operands")

    @classmethod
    def for_tensors(cls, tensors: Sequence[DenseTensor], output: Sequence[str]) -> "ContractionExpr":
        dummies = tuple(
            (k, *t.roles) for k, t in enumerate(tensors) if isinstance(t, DummyTensor)
        )
        return cls(tuple(t.labels for t in tensors), tuple(output), dummies)

    @cached_property
    def dummy_roles(self) -> dict[int, tuple[str, str, str]]:
        return {k: (i, o, f) for k, i, o, f in self.dummies}

    @cached_property
    def hyperedges(self) -> dict[str, tuple[int, ...]]:
        edges: dict[str, list[int]] = {}
        for k, op in enumerate(self.operands):
            for label in op:
                edges.setdefault(label, []).append(k)
        return {label: tuple(v) for label, v in edges.items()}


@dataclass(frozen=True)
class PlanStep:
    kind: str  # "pair", "gather" or "reduce"
    operands: tuple[int, ...]
    result: tuple[str, ...]
    flops: int


@dataclass(frozen=True)
class ContractionPlan:
    """Steps refer to operands by id: inputs are 0..n-1, step k produces n+k."""
    n_operands: int
    steps: tuple[PlanStep, ...]
    output: tuple[str, ...]

    @property
    def est_flops(self) -> int:
        return sum(step.flops for step in self.steps)


def check_tensors(expr: ContractionExpr, tensors: Sequence[DenseTensor]) -> dict[str, int]:
    """Return the label→dim map, raising on any inconsistency."""
    if len(tensors) != len(expr.operands):
        raise ValidationError(
            f"Expression has {len(expr.operands)} operands but {len(tensors)} tensors were given"
        )
    dims: dict[str, int] = {}
    for k, (tensor, op) in enumerate(zip(tensors, expr.operands)):
        if set(tensor.labels) != set(op):
            raise ValidationError(f"Operand {k} has labels {tensor.labels}, expected {op}")
        for label, dim in tensor.dims.items():
            if dims.setdefault(label, dim) != dim:
                raise ValidationError(
                    f"dimension mismatch for label {label}: {dims[label]} vs {dim}"
                )
    return dims


def _size(labels: Iterable[str], dims: Mapping[str, int]) -> int:
    return math.prod(dims[label] for label in labels)


def _pair_result(la: Sequence[str], lb: Sequence[str], keep: set[str]) -> tuple[str, ...]:
    batch = [l for l in la if l in lb and l in keep]
    a_free = [l for l in la if l not in lb and l in keep]
    b_free = [l for l in lb if l not in la and l in keep]
    return tuple(batch + a_free + b_free)


def _gather_result(labels: Sequence[str], roles: tuple[str, str, str]) -> tuple[str, ...]:
    in_label, out_label, filter_label = roles
    axis = labels.index(in_label)
    return tuple(labels[:axis]) + (out_label, filter_label) + tuple(labels[axis + 1:])


def _pair_flops(
    la: Sequence[str],
    lb: Sequence[str],
    dims: Mapping[str, int],
    dummy_in_labels: Sequence[str],
) -> int:
    union = set(la) | set(lb)
    flops = 2 * _size(union, dims)
    # A binary dummy has one nonzero per (out, filter) pair
    for in_label in dummy_in_labels:
        flops //= dims[in_label]
    return flops


def _absorb_dummies(
    expr: ContractionExpr,
    live: dict[int, tuple[str, ...]],
    steps: list[PlanStep],
    next_id: int,
) -> int:
    roles = expr.dummy_roles
    output = set(expr.output)
    changed = True
    while changed:
        changed = False
        for d in sorted(k for k in live if k in roles):
            in_label, out_label, filter_label = roles[d]
            holders = [k for k, labels in live.items() if k != d and in_label in labels]
            if len(holders) != 1 or in_label in output:
                continue
            other = holders[0]
            if other in roles or out_label in live[other] or filter_label in live[other]:
                continue
            result = _gather_result(live[other], roles[d])
            steps.append(PlanStep("gather", (other, d), result, 0))
            del live[other], live[d]
            live[next_id] = result
            next_id += 1
            changed = True
            break
    return next_id


def _finish(
    expr: ContractionExpr,
    live: dict[int, tuple[str, ...]],
    steps: list[PlanStep],
    next_id: int,
    dims: Mapping[str, int],
) -> ContractionPlan:
    if live:
        (last, labels), = live.items()
        if set(labels) != set(expr.output):
            result = tuple(l for l in labels if l in set(expr.output))
            steps.append(PlanStep("reduce", (last,), result, _size(labels, dims)))
    return ContractionPlan(len(expr.operands), tuple(steps), expr.output)


def _needed(expr: ContractionExpr, live: Mapping[int, tuple[str, ...]], exclude: set[int]) -> set[str]:
    needed = set(expr.output)
    for k, labels in live.items():
        if k not in exclude:
            needed.update(labels)
    return needed


def _pair_step(
    expr: ContractionExpr,
    live: dict[int, tuple[str, ...]],
    a: int,
    b: int,
    dims: Mapping[str, int],
) -> PlanStep:
    keep = _needed(expr, live, {a, b})
    result = _pair_result(live[a], live[b], keep)
    dummy_ins = [expr.dummy_roles[k][0] for k in (a, b) if k in expr.dummy_roles]
    return PlanStep("pair", (a, b), result, _pair_flops(live[a], live[b], dims, dummy_ins))


def plan_greedy(expr: ContractionExpr, dims: Mapping[str, int]) -> ContractionPlan:
    """Greedy pairwise plan.

    Dummies are first gathered into the single operand holding their input
    spatial label. Then, repeatedly, the pair of operands sharing a label whose
    result is smallest is contracted, ties going to the lowest operand ids.
    """
    live = dict(enumerate(expr.operands))
    steps: list[PlanStep] = []
    next_id = _absorb_dummies(expr, live, steps, len(expr.operands))

    while len(live) > 1:
        ids = sorted(live)
        pairs = [
            (a, b) for a, b in combinations(ids, 2) if set(live[a]) & set(live[b])
        ] or list(combinations(ids, 2))

        best = None
        for a, b in pairs:
            keep = _needed(expr, live, {a, b})
            size = _size(_pair_result(live[a], live[b], keep), dims)
            if best is None or (size, a, b) < best:
                best = (size, a, b)

        _, a, b = best
        step = _pair_step(expr, live, a, b, dims)
        steps.append(step)
        del live[a], live[b]
        live[next_id] = step.result
        next_id += 1

    return _finish(expr, live, steps, next_id, dims)


def plan_sequential(expr: ContractionExpr, dims: Mapping[str, int]) -> ContractionPlan:
    """Left-to-right plan with no dummy gathers; a second, independent valid plan."""
    live = dict(enumerate(expr.operands))
    steps: list[PlanStep] = []
    next_id = len(expr.operands)
    while len(live) > 1:
        a, b = sorted(live)[:2]
        step = _pair_step(expr, live, a, b, dims)
        steps.append(step)
        del live[a], live[b]
        live[next_id] = step.result
        next_id += 1
    return _finish(expr, live, steps, next_id, dims)


def estimate_flops(plan: ContractionPlan) -> int:
    return plan.est_flops


def _sum_out(t: DenseTensor, keep: set[str]) -> DenseTensor:
    drop = tuple(k for k, label in enumerate(t.labels) if label not in keep)
    if not drop:
        return t
    labels = [label for label in t.labels if label in keep]
    return DenseTensor._wrap(labels, t.data.sum(axis=drop))


def _pair(a: DenseTensor, b: DenseTensor, keep: set[str]) -> DenseTensor:
    # Labels private to one side and not needed later are summed first
    a = _sum_out(a, keep | set(b.labels))
    b = _sum_out(b, keep | set(a.labels))
    dims = {**a.dims, **b.dims}

    batch = [l for l in a.labels if l in b.labels and l in keep]
    contracted = [l for l in a.labels if l in b.labels and l not in keep]
    a_free = [l for l in a.labels if l not in b.labels]
    b_free = [l for l in b.labels if l not in a.labels]

    a_mat = a.transpose_to(batch + a_free + contracted).data.reshape(
        _size(batch, dims), _size(a_free, dims), _size(contracted, dims)
    )
    b_mat = b.transpose_to(batch + contracted + b_free).data.reshape(
        _size(batch, dims), _size(contracted, dims), _size(b_free, dims)
    )
    out_labels = batch + a_free + b_free
    out = np.matmul(a_mat, b_mat).reshape([dims[l] for l in out_labels])
    return DenseTensor._wrap(out_labels, out)


def _gather(t: DenseTensor, dummy: DummyTensor) -> DenseTensor:
    axis = t.labels.index(dummy.in_label)
    in_dim = t.shape[axis]
    pad_shape = list(t.shape)
    pad_shape[axis] = 1
    padded = np.concatenate([t.data, np.zeros(pad_shape)], axis=axis)
    idx = np.where(dummy.source_index < 0, in_dim, dummy.source_index)
    out = np.take(padded, idx, axis=axis)
    return DenseTensor._wrap(_gather_result(t.labels, dummy.roles), out)


def _validate_plan(plan: ContractionPlan, n_operands: int) -> None:
    if plan.n_operands != n_operands:
        raise ValidationError(f"Plan is for {plan.n_operands} operands, got {n_operands}")
    live = set(range(n_operands))
    for k, step in enumerate(plan.steps):
        if not set(step.operands) <= live:
            raise ValidationError(f"Plan step {k} uses operands {step.operands} that are not live")
        live -= set(step.operands)
        live.add(n_operands + k)
    if len(live) != 1:
        raise ValidationError(f"Plan leaves {len(live)} operands uncontracted")


def contract(
    expr: ContractionExpr,
    tensors: Sequence[DenseTensor],
    plan: Optional[ContractionPlan] = None,
) -> DenseTensor:
    """Sum over every non-output label of the product of all operands."""
    dims = check_tensors(expr, tensors)
    if plan is None:
        plan = plan_greedy(expr, dims)
    _validate_plan(plan, len(tensors))

    env: dict[int, DenseTensor] = dict(enumerate(tensors))
    for k, step in enumerate(plan.steps):
        keep = set(step.result)
        if step.kind == "reduce":
            (src,) = step.operands
            result = _sum_out(env.pop(src), keep)
        elif step.kind == "gather":
            other, d = step.operands
            t, dummy = env.pop(other), env.pop(d)
            if isinstance(dummy, DummyTensor):
                result = _gather(t, dummy)
            else:
                result = _pair(t, dummy, keep)
        else:
            a, b = step.operands
            result = _pair(env.pop(a), env.pop(b), keep)
        env[plan.n_operands + k] = result

    (final,) = env.values()
    final = _sum_out(final, set(expr.output))
    return final.transpose_to(expr.output)


def grad_contract(
    expr: ContractionExpr,
    tensors: Sequence[DenseTensor],
    upstream: DenseTensor,
    wrt: Optional[Iterable[int]] = None,
) -> list[Optional[DenseTensor]]:
    """Gradient of <contract(expr, tensors), upstream> with respect to each operand.

    Each gradient is the contraction of ``upstream`` with the other operands;
    labels of the operand seen nowhere else are broadcast. Entries outside
    ``wrt`` are returned as None.
    """
    dims = check_tensors(expr, tensors)
    if set(upstream.labels) != set(expr.output):
        raise ValidationError(f"Upstream labels {upstream.labels} do not match output {expr.output}")
    for label, dim in upstream.dims.items():
        if dims[label] != dim:
            raise ValidationError(f"dimension mismatch for label {label}: {dims[label]} vs {dim}")

    targets = set(range(len(tensors)) if wrt is None else wrt)
    grads: list[Optional[DenseTensor]] = []
    for k, tensor in enumerate(tensors):
        if k not in targets:
            grads.append(None)
            continue

        others = [t for j, t in enumerate(tensors) if j != k] + [upstream]
        available = set().union(*(t.labels for t in others))
        present = tuple(label for label in tensor.labels if label in available)
        partial = contract(ContractionExpr.for_tensors(others, present), others)

        if present != tensor.labels:
            expanded = partial.data.reshape(
                [dims[l] if l in present else 1 for l in tensor.labels]
            )
            full = np.broadcast_to(expanded, tensor.shape).copy()
            grads.append(DenseTensor._wrap(tensor.labels, full))
        else:
            grads.append(partial)
    return grads
