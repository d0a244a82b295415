import math

import numpy as np
import pytest

from einconv.config import Config
from einconv.datasets import synthetic_separable
from einconv.errors import ValidationError
from einconv.graph import ConvGeometry, make_named, rename_labels, validate
from einconv.reduction import is_nonredundant
from einconv.search import (
    MAX_RANK_DIM,
    MIN_RANK_DIM,
    Genome,
    Individual,
    SurrogateEvaluator,
    TrainerEvaluator,
    archive_rows,
    crowding_distance,
    dominates,
    environmental_selection,
    fast_nondominated_sort,
    initial_population,
    mutate,
    named_genomes,
    pareto_front,
    resize_rank,
    search,
    toggle_activation,
)
from einconv.trainer import TrainConfig

GEOM = ConvGeometry.same((8, 8), (3, 3), 4, 4)


@pytest.fixture
def config():
    return Config(jobs=1)


def _individual(accuracy, params):
    return Individual(Genome(make_named("standard", GEOM)), accuracy=accuracy, params=params, flops=0)


def test_nondominated_sort():
    objectives = np.array([[0.9, -100], [0.8, -50], [0.7, -200]])
    assert fast_nondominated_sort(objectives) == [[0, 1], [2]]


def test_nondominated_sort_with_ties():
    objectives = np.array([[0.5, -10], [0.5, -10], [0.4, -10]])
    assert fast_nondominated_sort(objectives) == [[0, 1], [2]]
    assert not dominates(objectives[0], objectives[1])


def test_crowding_distance():
    distance = crowding_distance(np.array([[0, 3], [1, 2], [2, 1], [3, 0]], dtype=float))
    assert math.isinf(distance[0]) and math.isinf(distance[3])
    np.testing.assert_allclose(distance[1:3], [4 / 3, 4 / 3])
    assert np.isinf(crowding_distance(np.array([[0.0, 1.0], [1.0, 0.0]]))).all()


def test_environmental_selection_prefers_front_then_spread():
    population = [_individual(0.9, 100), _individual(0.8, 50), _individual(0.7, 200), _individual(0.85, 80)]
    survivors = environmental_selection(population, 2)
    assert len(survivors) == 2
    assert all(ind.rank == 0 for ind in survivors)
    assert {ind.params for ind in survivors} == {100, 50}


def test_pareto_front_and_rows():
    population = [_individual(0.9, 100), _individual(0.8, 50), _individual(0.7, 200)]
    assert {ind.params for ind in pareto_front(population)} == {100, 50}
    rows = archive_rows(population)
    assert [r["front_rank"] for r in rows] == [0, 0, 1]
    assert pareto_front([]) == []
    assert archive_rows([]) == []


def test_unevaluated_individual_has_no_objectives():
    with pytest.raises(ValidationError):
        Individual(Genome(make_named("standard", GEOM))).objectives()


def test_eval_key_ignores_rank_names():
    g = make_named("bottleneck", GEOM, {"a": 2, "b": 3})
    assert Genome(g).eval_key == Genome(rename_labels(g, {"a": "x", "b": "y"})).eval_key
    assert Genome(g).eval_key != Genome(make_named("bottleneck", GEOM, {"a": 2, "b": 3}, nonlinear=True)).eval_key


def test_ordered_graph_keeps_stage_contents():
    g = make_named("cp", GEOM, {"g": 2})
    ordered = Genome(g, order_seed=7).ordered_graph()
    assert [sorted(s) for s in ordered.stages] == [sorted(s) for s in g.stages]


def test_mutations_keep_layers_valid():
    rng = np.random.default_rng(0)
    genome = Genome(make_named("cp", GEOM, {"g": 2}))
    for _ in range(40):
        genome = mutate(genome, rng)
        assert validate(genome.graph).ok
        assert is_nonredundant(genome.graph)


def test_resize_rank_clamps():
    g = make_named("cp", GEOM, {"g": MAX_RANK_DIM})
    rng = np.random.default_rng(0)
    assert resize_rank(Genome(g), rng, factor=2.0) is None
    halved = resize_rank(Genome(g), rng, factor=0.5)
    assert halved.rank_dims == {"g": MAX_RANK_DIM // 2}
    small = make_named("cp", GEOM, {"g": MIN_RANK_DIM})
    assert resize_rank(Genome(small), rng, factor=0.5) is None


def test_toggle_activation_needs_stages():
    rng = np.random.default_rng(0)
    assert toggle_activation(Genome(make_named("standard", GEOM)), rng) is None
    staged = make_named("bottleneck", GEOM, {"a": 2, "b": 2}, nonlinear=True)
    toggled = toggle_activation(Genome(staged), rng)
    assert sum(toggled.activations) == 1


def test_surrogate_is_deterministic():
    genome = Genome(make_named("cp", GEOM, {"g": 2}))
    first, second = SurrogateEvaluator()(genome), SurrogateEvaluator()(genome)
    assert first == second
    assert 0.0 <= first.accuracy <= 1.0
    assert first.params == 2 * (3 + 3 + 4 + 4)


def test_named_genomes_are_distinct(config):
    genomes = named_genomes(config=config)
    keys = [g.eval_key for g in genomes]
    assert len(keys) == len(set(keys))
    assert len(genomes) >= 6


def test_initial_population_fills_with_mutants(config):
    rng = np.random.default_rng(1)
    genomes = initial_population(12, rng, config=config)
    assert len(genomes) == 12
    named = named_genomes(config=config)
    assert [g.eval_key for g in genomes[: len(named)]] == [g.eval_key for g in named]


def test_initial_population_draws_from_pool(config):
    rng = np.random.default_rng(2)
    pool = [make_named("cp", GEOM, {"g": 3})]
    named = named_genomes(config=config)
    genomes = initial_population(len(named) + 1, rng, pool=pool, config=config)
    assert genomes[-1].graph == pool[0]


def test_search_without_generations_returns_initial_front(config):
    initial = initial_population(6, np.random.default_rng(0), config=config)
    result = search(initial, 0, SurrogateEvaluator())
    assert len(result.population) <= 6
    assert result.evaluations == len({g.eval_key for g in initial})
    assert {ind.generation for ind in result.archive} == {0}


def test_search_is_deterministic(config):
    initial = initial_population(6, np.random.default_rng(0), config=config)
    first = search(initial, 3, SurrogateEvaluator(), seed=5)
    second = search(initial, 3, SurrogateEvaluator(), seed=5)
    assert [i.genome.eval_key for i in first.population] == [i.genome.eval_key for i in second.population]
    assert len(first.population) == 6
    assert first.pareto


def test_search_respects_eval_budget(config):
    initial = initial_population(6, np.random.default_rng(0), config=config)
    result = search(initial, 10, SurrogateEvaluator(), eval_budget=8)
    assert result.evaluations <= 8


def test_search_rejects_bad_arguments(config):
    initial = initial_population(2, np.random.default_rng(0), config=config)
    with pytest.raises(ValidationError):
        search(initial, -1, SurrogateEvaluator())
    with pytest.raises(ValidationError):
        search(initial, 1, SurrogateEvaluator(), eval_budget=0)


def test_trainer_evaluator():
    data = synthetic_separable(8, size=4, seed=0)
    test = synthetic_separable(4, size=4, seed=1)
    evaluator = TrainerEvaluator("separable-mini", data, test, TrainConfig(epochs=1, batch_size=4))
    result = evaluator(Genome(make_named("depthwise_separable", GEOM)))
    assert not result.failed
    assert 0.0 <= result.accuracy <= 1.0
    assert result.params > 0


def _brute_force_fronts(objectives):
    remaining = list(range(len(objectives)))
    fronts = []
    while remaining:
        front = [
            p for p in remaining
            if not any(np.all(objectives[q] >= objectives[p]) and np.any(objectives[q] > objectives[p])
                       for q in remaining)
        ]
        fronts.append(front)
        remaining = [p for p in remaining if p not in front]
    return fronts


def test_nondominated_sort_matches_brute_force():
    rng = np.random.default_rng(11)
    genome = Genome(make_named("standard", GEOM))
    for _ in range(200):
        size = int(rng.integers(1, 51))
        # small integer grid so ties and duplicates show up
        objectives = rng.integers(0, 6, size=(size, 2)).astype(float)
        fronts = fast_nondominated_sort(objectives)
        assert [sorted(f) for f in fronts] == _brute_force_fronts(objectives)

        population = [Individual(genome, accuracy=a, params=int(-p), flops=0) for a, p in objectives]
        front = pareto_front(population)
        assert sorted(id(ind) for ind in front) == sorted(id(population[i]) for i in _brute_force_fronts(objectives)[0])


@pytest.mark.slow
def test_trained_search_improves_on_the_named_layers(config):
    data = synthetic_separable(32, size=8, seed=0)
    test = synthetic_separable(16, size=8, seed=1)
    evaluator = TrainerEvaluator(
        "separable-mini", data, test, TrainConfig(learning_rate=1e-2, epochs=1, batch_size=16)
    )
    initial = initial_population(24, np.random.default_rng(0), config=config)
    result = search(initial, 5, evaluator, seed=0, pop_size=24)

    keys = [ind.genome.eval_key for ind in result.archive]
    assert len(keys) == len(set(keys)) == result.evaluations
    assert all(is_nonredundant(ind.genome.graph) for ind in result.population)

    named = {g.eval_key for g in named_genomes(config=config)}
    baselines = [ind for ind in result.archive if ind.genome.eval_key in named]
    assert baselines
    front = result.pareto
    for base in baselines:
        assert any(f.accuracy >= base.accuracy and f.params <= base.params for f in front)
    largest = max(baselines, key=lambda ind: ind.params)
    assert any(f.params < largest.params or f.accuracy > largest.accuracy for f in front)
