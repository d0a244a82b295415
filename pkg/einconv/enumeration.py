"""Enumerate the nonredundant Einconv graphs for a filter size and rank budget.

For every factorization of the filter, the parameter vertices are drawn as
antichains over the kernel labels: the filter labels, ``c``, ``c'`` and up to
``max_rank_indices`` rank labels. Candidates breaking a redundancy rule are
rejected while they are generated; survivors are reduced, canonicalized and
deduplicated.
"""
import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Iterator, Optional, Sequence

import pandas as pd
from tqdm import tqdm

from einconv.config import Config
from einconv.errors import BudgetExceededError, ValidationError
from einconv.graph import (
    AXES,
    CHANNEL_IN,
    CHANNEL_OUT,
    ConvGeometry,
    EinconvGraph,
    build_graph,
    canonical_form,
    canonical_graph,
    canonical_hash,
    chain_labels,
)
from einconv.reduction import filter_factorizations, is_nonredundant, reduce_to_fixpoint

logger = logging.getLogger(__name__)

# Reference counts for 3x3 (2D, two rank indices) and 3x3x3 (3D, one rank index)
REFERENCE_COUNTS = {(2, 2): 901, (3, 1): 492}


@dataclass(frozen=True)
class EnumerationRules:
    """Interpretation switches for which candidates count as distinct and nonredundant."""
    # Each filter label sits in exactly one parameter vertex
    spatial_once: bool = True
    # Every group of parameter vertices linked by labels other than c' holds a filter label or c
    require_connected: bool = True
    # A parameter vertex inside a dummy vertex ({i} alone) is absorbed
    subset_of_fixed: bool = False
    # Graphs that differ by swapping the spatial axes count once
    identify_axis_swap: bool = False


def enumerate_vertex_sets(
    labels: Sequence[str],
    required: Optional[Sequence[str]] = None,
    exactly_once: Sequence[str] = (),
    at_least_twice: Sequence[str] = (),
    cap: Optional[int] = None,
) -> Iterator[tuple[frozenset[str], ...]]:
    """Antichains of nonempty subsets of ``labels`` covering ``required`` (all labels by default)."""
    labels = list(labels)
    masks = _MaskSpace(labels, required, exactly_once, at_least_twice)
    count = 0
    for chosen in masks.antichains():
        count += 1
        if cap is not None and count > cap:
            raise BudgetExceededError(f"More than {cap} candidate vertex sets", count - 1)
        yield tuple(frozenset(masks.decode(m)) for m in chosen)


class _MaskSpace:
    """Label subsets as bitmasks, bit n standing for ``labels[n]``."""

    def __init__(
        self,
        labels: Sequence[str],
        required: Optional[Sequence[str]],
        exactly_once: Sequence[str],
        at_least_twice: Sequence[str],
    ):
        self.labels = list(labels)
        self.bit = {label: 1 << n for n, label in enumerate(self.labels)}
        self.required = self._mask(self.labels if required is None else required)
        self.once = self._mask(exactly_once)
        self.twice = [self.bit[l] for l in at_least_twice]
        self.subsets = list(range(1, 1 << len(self.labels)))

    def _mask(self, labels: Sequence[str]) -> int:
        mask = 0
        for label in labels:
            mask |= self.bit[label]
        return mask

    def decode(self, mask: int) -> list[str]:
        return [l for l in self.labels if mask & self.bit[l]]

    def _complete(self, chosen: list[int], union: int) -> bool:
        if union & self.required != self.required:
            return False
        return all(sum(1 for c in chosen if c & b) >= 2 for b in self.twice)

    def extend(self, start: int, chosen: list[int], union: int) -> Iterator[list[int]]:
        if chosen and self._complete(chosen, union):
            yield list(chosen)
        for n in range(start, len(self.subsets)):
            s = self.subsets[n]
            if s & union & self.once:
                continue
            if any(s & c == s or s & c == c for c in chosen):
                continue
            chosen.append(s)
            yield from self.extend(n + 1, chosen, union | s)
            chosen.pop()

    def antichains(self) -> Iterator[list[int]]:
        yield from self.extend(0, [], 0)


def _bit_permutations(
    labels: Sequence[str], ranks: Sequence[str], axis_groups: Sequence[Sequence[str]]
) -> list[list[int]]:
    """Bit maps for every renaming of ranks, optionally combined with axis swaps."""
    position = {l: n for n, l in enumerate(labels)}
    renamings = []
    for perm in itertools.permutations(ranks):
        base = dict(zip(ranks, perm))
        swaps = [dict()] + [dict(zip(a, b)) | dict(zip(b, a)) for a, b in axis_groups]
        for swap in swaps:
            mapping = base | swap
            renamings.append([position[mapping.get(l, l)] for l in labels])
    return renamings


def _permute(mask: int, targets: Sequence[int]) -> int:
    out = 0
    n = 0
    while mask:
        if mask & 1:
            out |= 1 << targets[n]
        mask >>= 1
        n += 1
    return out


@dataclass(frozen=True)
class _Chunk:
    labels: tuple[str, ...]
    filters: tuple[str, ...]
    ranks: tuple[str, ...]
    first: int
    rules: EnumerationRules
    axis_groups: tuple[tuple[str, ...], ...]
    cap: int


def _accept(chosen: Sequence[int], space: _MaskSpace, chunk: _Chunk) -> bool:
    # No two ranks may be held by exactly the same vertices
    holders = [tuple(n for n, c in enumerate(chosen) if c & space.bit[r]) for r in chunk.ranks]
    if len(set(holders)) != len(holders):
        return False

    if chunk.rules.subset_of_fixed:
        filter_bits = [space.bit[f] for f in chunk.filters]
        if any(c in filter_bits for c in chosen):
            return False

    if chunk.rules.require_connected:
        anchors = space._mask(chunk.filters) | space.bit[CHANNEL_IN]
        link = ~space.bit[CHANNEL_OUT]
        parent = list(range(len(chosen)))

        def find(x: int) -> int:
            while parent[x] != x:
                x = parent[x]
            return x

        for a, b in itertools.combinations(range(len(chosen)), 2):
            if chosen[a] & chosen[b] & link:
                parent[find(a)] = find(b)
        anchored = {find(n) for n, c in enumerate(chosen) if c & anchors}
        if {find(n) for n in range(len(chosen))} - anchored:
            return False
    return True


def _enumerate_chunk(chunk: _Chunk) -> tuple[int, dict[tuple[int, ...], tuple[tuple[str, ...], ...]]]:
    """Candidates whose first vertex is ``subsets[chunk.first]``, keyed up to rank renaming."""
    space = _MaskSpace(
        chunk.labels,
        None,
        chunk.filters if chunk.rules.spatial_once else (),
        chunk.ranks,
    )
    renamings = _bit_permutations(chunk.labels, chunk.ranks, chunk.axis_groups)
    first = space.subsets[chunk.first]
    found: dict[tuple[int, ...], tuple[tuple[str, ...], ...]] = {}
    count = 0
    for chosen in space.extend(chunk.first + 1, [first], first):
        count += 1
        if count > chunk.cap:
            break
        if not _accept(chosen, space, chunk):
            continue
        key = min(tuple(sorted(_permute(c, r) for c in chosen)) for r in renamings)
        if key not in found:
            found[key] = tuple(tuple(space.decode(c)) for c in chosen)
    return count, found


def _factor_combinations(filter: Sequence[int]) -> list[dict[str, tuple[int, ...]]]:
    per_axis = [filter_factorizations(f) for f in filter]
    return [
        {axis: tuple(fs) for axis, fs in zip(AXES, combo)}
        for combo in itertools.product(*per_axis)
    ]


def enumeration_geometry(spatial_dims: int, filter: Sequence[int], config: Config) -> ConvGeometry:
    return ConvGeometry.same(
        (config.enum_spatial,) * spatial_dims,
        tuple(filter),
        config.enum_channels,
        config.enum_channels,
    )


def _run_chunks(chunks: list[_Chunk], jobs: int, progress: bool) -> tuple[int, dict]:
    total = 0
    found: dict = {}
    bar = tqdm(total=len(chunks), desc="Enumerating", unit="chunk", disable=not progress)
    if jobs <= 1:
        results = (_enumerate_chunk(c) for c in chunks)
        for count, part in results:
            total += count
            found.update((k, v) for k, v in part.items() if k not in found)
            bar.update(1)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_enumerate_chunk, c) for c in chunks]
            for future in futures:
                count, part = future.result()
                total += count
                found.update((k, v) for k, v in part.items() if k not in found)
                bar.update(1)
    bar.close()
    return total, found


def enumerate_graphs(
    spatial_dims: int,
    filter: Sequence[int],
    max_rank_indices: int,
    rank_dims: Optional[int] = None,
    config: Optional[Config] = None,
    rules: EnumerationRules = EnumerationRules(),
    progress: bool = False,
) -> list[EinconvGraph]:
    """All nonredundant graphs with at most ``max_rank_indices`` rank labels.

    Rank dims are fixed to ``rank_dims`` (``Config.rank_dim`` by default).
    Graphs come back canonicalized and sorted by rank count, vertex count, hash.
    """
    config = config or Config.load_or_default()
    rank_dim = rank_dims if rank_dims is not None else config.rank_dim
    if spatial_dims not in (2, 3) or len(filter) != spatial_dims:
        raise ValidationError(f"Need a {spatial_dims}D filter, got {tuple(filter)}")
    if max_rank_indices < 0:
        raise ValidationError("max_rank_indices must be >= 0")
    geometry = enumeration_geometry(spatial_dims, filter, config)
    axes = AXES[:spatial_dims]

    graphs: dict[bytes, EinconvGraph] = {}
    total = 0
    for factors in _factor_combinations(filter):
        # Size-1 filter labels carry no structure and stay out of parameter vertices
        filters = tuple(
            flt
            for axis in axes
            for (_, _, flt), size in zip(chain_labels(axis, len(factors[axis])), factors[axis])
            if size > 1
        )
        axis_groups = ()
        if rules.identify_axis_swap and spatial_dims == 2 and factors["h"] == factors["w"]:
            axis_groups = ((tuple(f for f in filters if f[0] == "i"), tuple(f for f in filters if f[0] == "j")),)

        for n_ranks in range(max_rank_indices + 1):
            ranks = tuple(f"r{n + 1}" for n in range(n_ranks))
            labels = filters + (CHANNEL_IN, CHANNEL_OUT) + ranks
            n_subsets = (1 << len(labels)) - 1
            chunks = [
                _Chunk(labels, filters, ranks, first, rules, axis_groups, config.candidate_cap)
                for first in range(n_subsets)
            ]
            count, found = _run_chunks(chunks, config.jobs, progress)
            total += count
            if total > config.candidate_cap:
                raise BudgetExceededError(
                    f"Enumeration passed the cap of {config.candidate_cap} candidate vertex sets",
                    total,
                )
            logger.info("factors %s, %d ranks: %d candidates, %d kept", factors, n_ranks, count, len(found))

            for params in found.values():
                g = build_graph(
                    params,
                    geometry,
                    {a: factors[a] for a in axes},
                    {r: rank_dim for r in ranks},
                )
                g = reduce_to_fixpoint(g).result
                if not is_nonredundant(g):
                    continue
                graphs.setdefault(canonical_form(g), canonical_graph(g))

    ordered = sorted(
        graphs.values(),
        key=lambda g: (len(g.rank_labels), len(g.param_indices), canonical_hash(g)),
    )
    logger.info("Enumerated %d graphs from %d candidates", len(ordered), total)
    return ordered


def summary_rows(graphs: Sequence[EinconvGraph]) -> pd.DataFrame:
    from einconv.layer import complexity

    rows = []
    for g in graphs:
        params, flops = complexity(g)
        rows.append({
            "canonical_hash": canonical_hash(g),
            "n_vertices": len(g.param_indices),
            "n_rank_indices": len(g.rank_labels),
            "params": params,
            "flops": flops,
        })
    return pd.DataFrame(rows, columns=["canonical_hash", "n_vertices", "n_rank_indices", "params", "flops"])


def count_summary(graphs: Sequence[EinconvGraph]) -> pd.DataFrame:
    """Graph counts by vertex count, rank count and parameter count."""
    columns = ["n_vertices", "n_rank_indices", "params"]
    if not graphs:
        return pd.DataFrame(columns=columns + ["count"])
    df = summary_rows(graphs)
    return (
        df.groupby(columns)
        .size()
        .reset_index(name="count")
        .sort_values(columns)
        .reset_index(drop=True)
    )


RULE_VARIANTS = {
    "default": EnumerationRules(),
    "spatial-anywhere": EnumerationRules(spatial_once=False),
    "allow-disconnected": EnumerationRules(require_connected=False),
    "absorb-into-dummy": EnumerationRules(subset_of_fixed=True),
    "axis-swap-identified": EnumerationRules(identify_axis_swap=True),
}


def rule_variant_report(
    config: Optional[Config] = None,
    variants: Optional[Sequence[str]] = None,
    settings: Sequence[tuple[int, int]] = ((2, 2), (3, 1)),
) -> pd.DataFrame:
    """Counts under each rule interpretation, next to the reference counts.

    ``settings`` lists (spatial dims, max rank indices) pairs; filters are 3 per axis.
    """
    rows = []
    for name in variants or RULE_VARIANTS:
        rules = RULE_VARIANTS[name]
        for spatial_dims, max_ranks in settings:
            graphs = enumerate_graphs(spatial_dims, (3,) * spatial_dims, max_ranks, config=config, rules=rules)
            reference = REFERENCE_COUNTS.get((spatial_dims, max_ranks))
            rows.append({
                "variant": name,
                "spatial_dims": spatial_dims,
                "max_rank_indices": max_ranks,
                "count": len(graphs),
                "reference": reference,
                "matches": reference is not None and len(graphs) == reference,
                **{f"rule_{k}": v for k, v in asdict(rules).items()},
            })
    return pd.DataFrame(rows)
