import itertools

import pytest

from einconv.config import Config
from einconv.enumeration import (
    REFERENCE_COUNTS,
    RULE_VARIANTS,
    count_summary,
    enumerate_graphs,
    enumerate_vertex_sets,
    rule_variant_report,
    summary_rows,
)
from einconv.errors import BudgetExceededError, ValidationError
from einconv.graph import ConvGeometry, canonical_form, canonical_hash, make_named, validate
from einconv.reduction import is_nonredundant


@pytest.fixture
def config():
    return Config(jobs=1)


def _brute_antichains(labels, at_least_twice=()):
    subsets = [frozenset(c) for n in range(1, len(labels) + 1) for c in itertools.combinations(labels, n)]
    found = set()
    for n in range(1, len(subsets) + 1):
        for family in itertools.combinations(subsets, n):
            if any(a < b for a in family for b in family):
                continue
            if frozenset().union(*family) != frozenset(labels):
                continue
            if any(sum(1 for v in family if l in v) < 2 for l in at_least_twice):
                continue
            found.add(frozenset(family))
    return found


@pytest.mark.parametrize(("labels", "twice"), [("ab", ()), ("abc", ()), ("abc", ("c",))])
def test_vertex_sets_match_brute_force(labels, twice):
    found = {frozenset(v) for v in enumerate_vertex_sets(list(labels), at_least_twice=twice)}
    assert found == _brute_antichains(list(labels), twice)


def test_vertex_sets_exactly_once():
    for family in enumerate_vertex_sets(["a", "b", "c"], exactly_once=["a"]):
        assert sum(1 for v in family if "a" in v) == 1


def test_vertex_sets_cap():
    with pytest.raises(BudgetExceededError) as info:
        list(enumerate_vertex_sets(["a", "b", "c"], cap=2))
    assert info.value.partial_count == 2


def test_pointwise_without_ranks_is_the_standard_layer(config):
    graphs = enumerate_graphs(2, (1, 1), 0, config=config)
    assert len(graphs) == 1
    geom = ConvGeometry.same((8, 8), (1, 1), 4, 4)
    assert canonical_form(graphs[0]) == canonical_form(make_named("standard", geom))


def test_enumeration_contains_named_layers(config):
    graphs = enumerate_graphs(2, (3, 3), 1, rank_dims=2, config=config)
    forms = {canonical_form(g) for g in graphs}
    geom = ConvGeometry.same((8, 8), (3, 3), 4, 4)
    ranks = {"a": 2, "g": 2}
    for kind in ("standard", "depthwise_separable", "flattened", "cp", "low_rank", "inverted_bottleneck"):
        assert canonical_form(make_named(kind, geom, ranks)) in forms, kind


def test_enumerated_graphs_are_distinct_and_nonredundant(config):
    graphs = enumerate_graphs(2, (3, 3), 1, config=config)
    hashes = [canonical_hash(g) for g in graphs]
    assert len(set(hashes)) == len(hashes)
    for g in graphs:
        assert validate(g).ok
        assert is_nonredundant(g)
        assert len(g.rank_labels) <= 1
    assert [len(g.rank_labels) for g in graphs] == sorted(len(g.rank_labels) for g in graphs)


def test_rank_budget_is_monotone(config):
    fewer = {canonical_form(g) for g in enumerate_graphs(2, (3, 3), 0, config=config)}
    more = {canonical_form(g) for g in enumerate_graphs(2, (3, 3), 1, config=config)}
    assert fewer < more


def test_candidate_cap(config):
    config.candidate_cap = 10
    with pytest.raises(BudgetExceededError) as info:
        enumerate_graphs(2, (3, 3), 1, config=config)
    assert info.value.partial_count > 10


def test_bad_arguments(config):
    with pytest.raises(ValidationError):
        enumerate_graphs(2, (3, 3, 3), 1, config=config)
    with pytest.raises(ValidationError):
        enumerate_graphs(2, (3, 3), -1, config=config)


def test_summary_tables(config):
    graphs = enumerate_graphs(2, (3, 3), 0, config=config)
    summary = summary_rows(graphs)
    assert list(summary.columns) == ["canonical_hash", "n_vertices", "n_rank_indices", "params", "flops"]
    assert len(summary) == len(graphs)
    assert (summary["n_rank_indices"] == 0).all()
    counts = count_summary(graphs)
    assert counts["count"].sum() == len(graphs)
    assert count_summary([]).empty


def test_rule_variant_report(config):
    report = rule_variant_report(config, ["default", "allow-disconnected"], settings=((2, 0),))
    assert list(report["variant"]) == ["default", "allow-disconnected"]
    default, loose = report["count"]
    assert loose >= default
    assert not report["matches"].any()


# Counts under the default rules; they differ from REFERENCE_COUNTS, see the rule-variant report
DEFAULT_RULE_COUNTS = {(2, 2): 3859, (3, 1): 1937}


@pytest.mark.slow
@pytest.mark.parametrize(("spatial_dims", "max_ranks"), [(2, 2), (3, 1)])
def test_default_rules_count(spatial_dims, max_ranks):
    graphs = enumerate_graphs(spatial_dims, (3,) * spatial_dims, max_ranks, rank_dims=2, config=Config())
    assert len(graphs) == DEFAULT_RULE_COUNTS[(spatial_dims, max_ranks)]
    assert len(graphs) != REFERENCE_COUNTS[(spatial_dims, max_ranks)]
    assert len({canonical_form(g) for g in graphs}) == len(graphs)
    assert all(is_nonredundant(g) for g in graphs)


@pytest.mark.slow
def test_reference_mismatch_report_lists_every_variant():
    report = rule_variant_report(Config(), settings=((3, 1),))
    assert list(report["variant"]) == list(RULE_VARIANTS)
    default = report.set_index("variant").loc["default"]
    assert (default["count"], default["reference"]) == (1937, 492)
    assert (report["reference"] == 492).all()
