"""Mutation-only NSGA-II over Einconv layer graphs.

Objectives are (accuracy, parameter count): accuracy is maximized and the
parameter count minimized. Children come from binary tournaments followed by a
single mutation; survivors are chosen by nondominated rank, then crowding.
"""
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
from tqdm import tqdm

from einconv.config import Config
from einconv.datasets import Dataset
from einconv.errors import EinconvError, ValidationError
from einconv.graph import (
    CHANNEL_IN,
    CHANNEL_OUT,
    NAMED_2D,
    NAMED_3D,
    REQUIRED_RANKS,
    ConvGeometry,
    EinconvGraph,
    Vertex,
    canonical_form,
    canonical_graph,
    canonical_hash,
    make_named,
    validate,
)
from einconv.layer import complexity
from einconv.reduction import drop_label, is_nonredundant, reduce_to_fixpoint, remove_vertices
from einconv.tensor import IndexLabel
from einconv.trainer import NetworkSpec, TrainConfig, param_count, train

logger = logging.getLogger(__name__)

MAX_RESAMPLES = 20
# Structural bounds that keep mutated layers trainable at desk scale
MAX_PARAM_VERTICES = 6
MAX_RANK_INDICES = 3
MAX_RANK_DIM = 64
MIN_RANK_DIM = 2


@dataclass(frozen=True)
class Genome:
    graph: EinconvGraph
    # Permutes vertices inside each stage, which steers contraction tie-breaks
    order_seed: int = 0

    @property
    def eval_key(self) -> str:
        """Identifies genomes that train identically: canonical structure, dims, stages, flags."""
        canon = canonical_graph(self.graph)
        stages = sorted(
            sorted(tuple(sorted(canon.vertices[k].labels)) for k in stage if k in canon.param_indices)
            for stage in canon.stages
        )
        payload = canonical_form(self.graph) + json.dumps([stages, list(canon.activations)]).encode()
        return hashlib.sha1(payload).hexdigest()[:16]

    def ordered_graph(self) -> EinconvGraph:
        rng = np.random.default_rng(self.order_seed)
        stages = [tuple(int(k) for k in rng.permutation(stage)) for stage in self.graph.stages]
        return self.graph.with_stages(stages, self.graph.activations)


@dataclass
class Individual:
    genome: Genome
    accuracy: Optional[float] = None
    params: Optional[int] = None
    flops: Optional[int] = None
    generation: int = 0
    rank: int = 0
    crowding: float = 0.0
    failed: bool = False

    @property
    def evaluated(self) -> bool:
        return self.accuracy is not None and self.params is not None

    def objectives(self) -> np.ndarray:
        """Sign-normalized so that larger is better in every coordinate."""
        if not self.evaluated:
            raise ValidationError("Individual has not been evaluated")
        return np.array([self.accuracy, -float(self.params)])


@dataclass(frozen=True)
class Evaluation:
    accuracy: float
    params: int
    flops: int
    failed: bool = False


class Evaluator(Protocol):
    def __call__(self, genome: Genome) -> Evaluation: ...


# Mutation operators. Each returns None when it does not apply to the genome.

def _param_universe(g: EinconvGraph) -> list[str]:
    labels = list(g.filter_labels) + [CHANNEL_IN, CHANNEL_OUT] + list(g.rank_labels)
    filter_dims = {f: g.dims[f] for f in g.filter_labels}
    return [l for l in labels if filter_dims.get(l, 2) > 1]


def add_vertex(genome: Genome, rng: np.random.Generator) -> Optional[EinconvGraph]:
    g = genome.graph
    if len(g.param_indices) >= MAX_PARAM_VERTICES:
        return None
    universe = _param_universe(g)
    chosen = tuple(l for l in universe if rng.random() < 0.5)
    if not chosen:
        return None
    stage = int(rng.integers(len(g.stages)))
    new_index = len(g.vertices)
    stages = [s + (new_index,) if n == stage else s for n, s in enumerate(g.stages)]
    return replace(g, vertices=g.vertices + (Vertex(chosen),), stages=tuple(stages))


def remove_vertex(genome: Genome, rng: np.random.Generator) -> Optional[EinconvGraph]:
    params = genome.graph.param_indices
    if len(params) < 2:
        return None
    return remove_vertices(genome.graph, {int(rng.choice(params))})


def add_rank(genome: Genome, rng: np.random.Generator) -> Optional[EinconvGraph]:
    g = genome.graph
    params = g.param_indices
    if len(params) < 2 or len(g.rank_labels) >= MAX_RANK_INDICES:
        return None
    used = {l.name for l in g.inner}
    name = next(f"r{n}" for n in range(1, len(used) + 2) if f"r{n}" not in used)
    size = int(rng.integers(2, len(params) + 1))
    holders = {int(k) for k in rng.choice(params, size=size, replace=False)}
    vertices = tuple(
        Vertex(v.labels + (name,), v.kind) if k in holders else v for k, v in enumerate(g.vertices)
    )
    return replace(g, vertices=vertices, inner=g.inner + (IndexLabel(name, MIN_RANK_DIM),))


def remove_rank(genome: Genome, rng: np.random.Generator) -> Optional[EinconvGraph]:
    ranks = genome.graph.rank_labels
    if not ranks:
        return None
    return drop_label(genome.graph, str(rng.choice(ranks)))


def resize_rank(genome: Genome, rng: np.random.Generator, factor: Optional[float] = None) -> Optional[EinconvGraph]:
    g = genome.graph
    if not g.rank_labels:
        return None
    rank = str(rng.choice(g.rank_labels))
    factor = factor if factor is not None else (2.0 if rng.random() < 0.5 else 0.5)
    dim = min(MAX_RANK_DIM, max(MIN_RANK_DIM, int(g.dims[rank] * factor)))
    if dim == g.dims[rank]:
        return None
    inner = tuple(IndexLabel(rank, dim) if l.name == rank else l for l in g.inner)
    return replace(g, inner=inner)


def toggle_activation(genome: Genome, rng: np.random.Generator) -> Optional[EinconvGraph]:
    g = genome.graph
    if len(g.stages) < 2:
        return None
    flip = int(rng.integers(len(g.activations)))
    flags = tuple(not a if n == flip else a for n, a in enumerate(g.activations))
    return g.with_stages(g.stages, flags)


def reshuffle_order(genome: Genome, rng: np.random.Generator) -> Genome:
    return Genome(genome.graph, int(rng.integers(2**31)))


STRUCTURAL_MUTATIONS: dict[str, Callable] = {
    "add_vertex": add_vertex,
    "remove_vertex": remove_vertex,
    "add_rank": add_rank,
    "remove_rank": remove_rank,
    "resize_rank": resize_rank,
    "toggle_activation": toggle_activation,
}
MUTATIONS = tuple(STRUCTURAL_MUTATIONS) + ("reshuffle_order",)


def normalize(g: EinconvGraph) -> Optional[EinconvGraph]:
    """Reduce to nonredundant form; None when the result is not a valid layer."""
    if not validate(g).ok:
        return None
    g = reduce_to_fixpoint(g).result
    if not g.param_indices or not is_nonredundant(g):
        return None
    return g


def mutate(genome: Genome, rng: np.random.Generator) -> Genome:
    """One uniformly chosen operator; after 20 failed attempts the genome comes back unchanged."""
    for _ in range(MAX_RESAMPLES):
        name = MUTATIONS[int(rng.integers(len(MUTATIONS)))]
        if name == "reshuffle_order":
            return reshuffle_order(genome, rng)
        mutated = STRUCTURAL_MUTATIONS[name](genome, rng)
        if mutated is None:
            continue
        mutated = normalize(mutated)
        if mutated is not None:
            return Genome(mutated, genome.order_seed)
    return genome


def dominates(a: np.ndarray, b: np.ndarray) -> bool:
    return bool(np.all(a >= b) and np.any(a > b))


def fast_nondominated_sort(objectives: np.ndarray) -> list[list[int]]:
    """Fronts of row indices; rows are sign-normalized objective vectors."""
    objectives = np.asarray(objectives, dtype=np.float64)
    n = len(objectives)
    dominated_by = [[] for _ in range(n)]
    counts = np.zeros(n, dtype=int)
    for p in range(n):
        for q in range(n):
            if p != q and dominates(objectives[p], objectives[q]):
                dominated_by[p].append(q)
            elif p != q and dominates(objectives[q], objectives[p]):
                counts[p] += 1

    fronts = []
    current = [p for p in range(n) if counts[p] == 0]
    while current:
        fronts.append(current)
        upcoming = []
        for p in current:
            for q in dominated_by[p]:
                counts[q] -= 1
                if counts[q] == 0:
                    upcoming.append(q)
        current = sorted(upcoming)
    return fronts


def crowding_distance(objectives: np.ndarray) -> np.ndarray:
    objectives = np.asarray(objectives, dtype=np.float64)
    n = len(objectives)
    distance = np.zeros(n)
    if n == 0:
        return distance
    if n <= 2:
        return np.full(n, math.inf)
    for m in range(objectives.shape[1]):
        order = np.argsort(objectives[:, m], kind="stable")
        values = objectives[order, m]
        distance[order[0]] = distance[order[-1]] = math.inf
        span = values[-1] - values[0]
        if span == 0:
            continue
        distance[order[1:-1]] += (values[2:] - values[:-2]) / span
    return distance


def _objective_matrix(individuals: Sequence[Individual]) -> np.ndarray:
    return np.array([ind.objectives() for ind in individuals]).reshape(len(individuals), 2)


def assign_rank_and_crowding(individuals: Sequence[Individual]) -> list[list[int]]:
    objectives = _objective_matrix(individuals)
    fronts = fast_nondominated_sort(objectives)
    for rank, front in enumerate(fronts):
        distances = crowding_distance(objectives[front])
        for idx, dist in zip(front, distances):
            individuals[idx].rank = rank
            individuals[idx].crowding = float(dist)
    return fronts


def environmental_selection(individuals: Sequence[Individual], size: int) -> list[Individual]:
    """Whole fronts in rank order; the last one that does not fit is cut by crowding."""
    fronts = assign_rank_and_crowding(individuals)
    survivors: list[Individual] = []
    for front in fronts:
        if len(survivors) + len(front) <= size:
            survivors.extend(individuals[i] for i in front)
            continue
        by_crowding = sorted(front, key=lambda i: -individuals[i].crowding)
        survivors.extend(individuals[i] for i in by_crowding[: size - len(survivors)])
        break
    return survivors


def tournament(population: Sequence[Individual], rng: np.random.Generator) -> Individual:
    a, b = (population[int(i)] for i in rng.integers(len(population), size=2))
    if (a.rank, -a.crowding) <= (b.rank, -b.crowding):
        return a
    return b


def pareto_front(individuals: Sequence[Individual]) -> list[Individual]:
    if not individuals:
        return []
    fronts = fast_nondominated_sort(_objective_matrix(individuals))
    return [individuals[i] for i in fronts[0]]


# Evaluators

@dataclass(frozen=True)
class SurrogateEvaluator:
    """Deterministic stand-in for training: accuracy grows with log parameter
    count, perturbed by a hash of the structure."""
    reference_params: int = 10_000

    def __call__(self, genome: Genome) -> Evaluation:
        params, flops = complexity(genome.graph)
        jitter = int(genome.eval_key[:8], 16) / 0xFFFFFFFF
        accuracy = min(1.0, math.log1p(params) / math.log1p(self.reference_params)) * (0.9 + 0.1 * jitter)
        return Evaluation(round(accuracy, 12), params, flops)


@dataclass(frozen=True)
class TrainerEvaluator:
    """Accuracy of a preset network whose Einconv layers use the genome's graph."""
    preset: str
    train_data: Dataset
    test_data: Dataset
    train_config: TrainConfig

    def __call__(self, genome: Genome) -> Evaluation:
        net = NetworkSpec.from_preset(
            self.preset, self.train_data.sample_shape, self.train_data.n_classes, genome.ordered_graph()
        )
        params = param_count(net.init_params(self.train_config.seed))
        _, flops = complexity(genome.graph)
        try:
            result = train(net, self.train_data, self.train_config, test=self.test_data)
        except (EinconvError, FloatingPointError, MemoryError) as e:
            logger.warning("Training %s failed, recording accuracy 0: %s", genome.eval_key, e)
            return Evaluation(0.0, params, flops, failed=True)
        accuracy = result.final_test_acc
        if not math.isfinite(accuracy):
            accuracy = result.history[-1].train_acc if result.history else 0.0
        return Evaluation(accuracy, params, flops)


def _evaluate_many(evaluator: Evaluator, genomes: Sequence[Genome], jobs: int) -> list[Evaluation]:
    if jobs <= 1 or len(genomes) <= 1:
        return [evaluator(g) for g in genomes]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        # map keeps submission order, so results do not depend on scheduling
        return list(pool.map(evaluator, genomes))


# Initial population

def named_genomes(spatial_dims: int = 2, filter: int = 3, rank_dim: int = 2, config: Optional[Config] = None) -> list[Genome]:
    """The named layers that are valid and nonredundant for this filter, as genomes."""
    config = config or Config.load_or_default()
    geometry = ConvGeometry.same(
        (config.enum_spatial,) * spatial_dims, (filter,) * spatial_dims, config.enum_channels, config.enum_channels
    )
    kinds = NAMED_2D if spatial_dims == 2 else NAMED_3D
    genomes = []
    for kind in kinds:
        ranks = {r: rank_dim for r in REQUIRED_RANKS.get(kind, ())} | {"a": rank_dim}
        try:
            g = make_named(kind, geometry, ranks)
        except ValidationError:
            continue
        if is_nonredundant(g):
            genomes.append(Genome(g))
    return genomes


def initial_population(
    size: int,
    rng: np.random.Generator,
    pool: Sequence[EinconvGraph] = (),
    spatial_dims: int = 2,
    filter: int = 3,
    rank_dim: int = 2,
    config: Optional[Config] = None,
) -> list[Genome]:
    """Named layers first, then uniform samples from ``pool`` (e.g. an
    enumeration), then mutants of the named layers."""
    genomes = named_genomes(spatial_dims, filter, rank_dim, config)[:size]
    pool = list(pool)
    while len(genomes) < size and pool:
        genomes.append(Genome(pool.pop(int(rng.integers(len(pool))))))
    seeds = list(genomes)
    if not seeds:
        raise ValidationError("No valid layer to seed the population with")
    while len(genomes) < size:
        genomes.append(mutate(seeds[int(rng.integers(len(seeds)))], rng))
    return genomes


@dataclass
class SearchResult:
    archive: list[Individual]
    population: list[Individual]
    evaluations: int = 0

    @property
    def pareto(self) -> list[Individual]:
        return pareto_front(self.archive)


@dataclass
class _Cache:
    entries: dict[str, Evaluation] = field(default_factory=dict)
    first_seen: dict[str, Individual] = field(default_factory=dict)


def _evaluate_population(
    genomes: Sequence[Genome],
    generation: int,
    evaluator: Evaluator,
    cache: _Cache,
    jobs: int,
    budget: Optional[int],
) -> tuple[list[Individual], list[Individual]]:
    """Evaluate every genome not seen before; returns (all individuals, newly evaluated ones)."""
    fresh: dict[str, Genome] = {}
    for genome in genomes:
        key = genome.eval_key
        if key not in cache.entries and key not in fresh:
            fresh[key] = genome
    if budget is not None:
        fresh = dict(list(fresh.items())[: max(budget, 0)])

    results = _evaluate_many(evaluator, list(fresh.values()), jobs)
    new_individuals = []
    for (key, genome), result in zip(fresh.items(), results):
        cache.entries[key] = result
        ind = Individual(genome, result.accuracy, result.params, result.flops, generation, failed=result.failed)
        cache.first_seen[key] = ind
        new_individuals.append(ind)

    individuals = []
    for genome in genomes:
        result = cache.entries.get(genome.eval_key)
        if result is None:
            continue
        individuals.append(
            Individual(genome, result.accuracy, result.params, result.flops, generation, failed=result.failed)
        )
    return individuals, new_individuals


def search(
    initial: Sequence[Genome],
    generations: int,
    evaluator: Evaluator,
    seed: int = 0,
    pop_size: Optional[int] = None,
    eval_budget: Optional[int] = None,
    jobs: int = 1,
    archive=None,
    resume: bool = False,
    progress: bool = False,
) -> SearchResult:
    """Run the GA and return every evaluated individual plus the final population.

    ``archive`` (a ``SearchArchive``) receives new individuals and each
    generation's population; with ``resume`` the run continues from the last
    population it holds. Each generation draws from its own seeded generator,
    so a resumed run matches an uninterrupted one.
    """
    if generations < 0:
        raise ValidationError("generations must be >= 0")
    if eval_budget is not None and eval_budget < 1:
        raise ValidationError("eval_budget must be positive")
    cache = _Cache()
    start = 0
    population: list[Individual] = []

    latest = archive.latest_population() if resume and archive is not None else None
    if latest is not None:
        start, population = latest
        for ind in archive.individuals():
            key = ind.genome.eval_key
            cache.entries.setdefault(key, Evaluation(ind.accuracy, ind.params, ind.flops, ind.failed))
            cache.first_seen.setdefault(key, ind)
        logger.info("Resuming from generation %d with %d individuals archived", start, len(cache.entries))
    else:
        population, new = _evaluate_population(initial, 0, evaluator, cache, jobs, eval_budget)
        if not population:
            raise ValidationError("Initial population is empty")
        if archive is not None:
            archive.record_individuals(new)
    pop_size = pop_size or len(population)
    population = environmental_selection(population, pop_size)
    if archive is not None and latest is None:
        archive.record_population(0, population)

    for generation in tqdm(range(start + 1, generations + 1), desc="Generations", disable=not progress):
        remaining = None if eval_budget is None else eval_budget - len(cache.entries)
        if remaining is not None and remaining <= 0:
            logger.info("Evaluation budget of %d spent before generation %d", eval_budget, generation)
            break
        rng = np.random.default_rng([seed, generation])
        assign_rank_and_crowding(population)
        children = [mutate(tournament(population, rng).genome, rng) for _ in range(pop_size)]
        offspring, new = _evaluate_population(children, generation, evaluator, cache, jobs, remaining)
        population = environmental_selection(population + offspring, pop_size)
        if archive is not None:
            archive.record_individuals(new)
            archive.record_population(generation, population)
        logger.info(
            "generation %d: %d new evaluations, front size %d",
            generation, len(new), sum(1 for ind in population if ind.rank == 0),
        )
    evaluations = len(cache.entries)
    return SearchResult(list(cache.first_seen.values()), population, evaluations)


def archive_rows(individuals: Sequence[Individual]) -> list[dict]:
    """Rows with the front rank each individual has within ``individuals``."""
    if not individuals:
        return []
    fronts = fast_nondominated_sort(_objective_matrix(individuals))
    front_of = {i: rank for rank, front in enumerate(fronts) for i in front}
    return [
        {
            "canonical_hash": canonical_hash(ind.genome.graph),
            "params": ind.params,
            "flops": ind.flops,
            "accuracy": ind.accuracy,
            "generation": ind.generation,
            "front_rank": front_of[n],
        }
        for n, ind in enumerate(individuals)
    ]
