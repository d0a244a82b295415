import dataclasses

import numpy as np
import pytest

from einconv.errors import ValidationError
from einconv.graph import (
    NAMED_2D,
    NAMED_3D,
    ConvGeometry,
    EinconvGraph,
    Vertex,
    build_graph,
    canonical_form,
    canonical_graph,
    canonical_hash,
    derive_hyperedges,
    is_connected,
    make_named,
    rename_labels,
    validate,
)

RANKS = {"a": 2, "b": 3, "g": 4}


def _geom(filter=3, c=4, cout=5, ndim=2, spatial=6):
    return ConvGeometry.same((spatial,) * ndim, (filter,) * ndim, c, cout)


def test_geometry_output_size():
    g = ConvGeometry((7, 9), (3, 3), padding=1, stride=2, channels_in=1, channels_out=1)
    assert g.spatial_out == (4, 5)


def test_geometry_rejects_non_integer_output():
    with pytest.raises(ValidationError, match="non-integer output spatial size"):
        ConvGeometry((6, 6), (3, 3), padding=0, stride=2)


def test_geometry_rejects_even_filter():
    with pytest.raises(ValidationError, match="odd"):
        ConvGeometry((6, 6), (2, 2))


def test_geometry_parse():
    g = ConvGeometry.parse("32x32:64:64:1:1", (3, 3))
    assert g == ConvGeometry((32, 32), (3, 3), 1, 1, 64, 64)
    assert ConvGeometry.parse("8x8x4:2:3", (3, 3, 3)).padding == 1
    with pytest.raises(ValidationError, match="Bad geometry spec"):
        ConvGeometry.parse("32x32", (3, 3))


@pytest.mark.parametrize("kind", NAMED_2D)
def test_named_2d_layers_validate(kind):
    g = make_named(kind, _geom(filter=5 if kind == "factoring" else 3), RANKS)
    report = validate(g)
    assert report.ok, report.violations
    assert is_connected(g)


@pytest.mark.parametrize("kind", NAMED_3D)
def test_named_3d_layers_validate(kind):
    g = make_named(kind, _geom(ndim=3), RANKS)
    assert validate(g).ok
    assert g.outer_names == ("h'", "w'", "d'", "c'")


def test_param_count_closed_forms():
    rng = np.random.default_rng(0)
    for _ in range(100):
        f = int(rng.choice([1, 3, 5]))
        c, cout, a, b, gamma = (int(x) for x in rng.integers(1, 9, size=5))
        geom = _geom(filter=f, c=c, cout=cout)
        ranks = {"a": a, "b": b, "g": gamma}
        ij = f * f

        standard = make_named("standard", geom).param_count()
        tucker = make_named("bottleneck", geom, ranks).param_count()
        assert standard == ij * c * cout
        assert tucker == ij * a * b + c * a + cout * b
        assert tucker / standard >= a * b / (c * cout)
        assert make_named("cp", geom, ranks).param_count() == gamma * (f + f + c + cout)
        assert make_named("depthwise_separable", geom).param_count() == ij * c + c * cout
        assert make_named("inverted_bottleneck", geom, ranks).param_count() == c * a + ij * a + a * cout
        assert make_named("flattened", geom).param_count() == f * cout + f * cout + c * cout
        assert make_named("low_rank", geom, ranks).param_count() == f * c * a + f * a * cout


def test_param_count_3d():
    geom = _geom(c=2, cout=3, ndim=3)
    assert make_named("standard3d", geom).param_count() == 27 * 2 * 3
    assert make_named("two_plus_one_d", geom, {"a": 4}).param_count() == 9 * 2 * 4 + 3 * 4 * 3


def test_factoring_chains_small_filters():
    g = make_named("factoring", _geom(filter=7), {"a1": 2, "a2": 3})
    assert g.factors("h") == (3, 3, 3)
    assert g.effective_filter == (7, 7)
    assert g.param_count() == 9 * (4 * 2 + 2 * 3 + 3 * 5)
    assert validate(g).ok


def test_factoring_needs_large_filter():
    with pytest.raises(ValidationError):
        make_named("factoring", _geom(filter=3), {"a": 2})


def test_unknown_kind_and_missing_rank():
    with pytest.raises(ValidationError, match="Unknown layer kind"):
        make_named("winograd", _geom())
    with pytest.raises(ValidationError, match="missing rank"):
        make_named("bottleneck", _geom(), {"a": 2})


def test_build_graph_missing_rank():
    with pytest.raises(ValidationError, match="missing rank"):
        build_graph([("i", "j", "c", "r")], _geom())


def test_nonlinear_bottleneck_has_three_stages():
    g = make_named("bottleneck", _geom(), RANKS, nonlinear=True)
    assert len(g.stages) == 3
    assert g.activations == (True, True)
    assert not g.is_linear
    assert validate(g).ok
    assert g.linear().is_linear


def test_hyperedges_of_standard():
    g = make_named("standard", _geom())
    edges = derive_hyperedges(g)
    param = g.param_indices[0]
    assert edges["c"] == frozenset({g.input_index, param})
    assert edges["i"] == frozenset({g.axis_chain("h")[0], param})
    assert edges["c'"] == frozenset({param})


def test_disconnected_graph_detected():
    g = build_graph([("i", "j", "c", "c'"), ("r",), ("r",)], _geom(), rank_dims={"r": 2})
    assert validate(g).ok
    assert not is_connected(g)


def test_validate_reports_self_loop():
    g = make_named("standard", _geom())
    k = g.param_indices[0]
    vertices = list(g.vertices)
    vertices[k] = Vertex(("i", "j", "c", "c", "c'"))
    report = validate(dataclasses.replace(g, vertices=tuple(vertices)))
    assert not report.ok
    assert any("self-loop" in v for v in report.violations)


def test_validate_reports_undeclared_label():
    g = make_named("standard", _geom())
    k = g.param_indices[0]
    vertices = list(g.vertices)
    vertices[k] = Vertex(("i", "j", "c", "c'", "zz"))
    report = validate(dataclasses.replace(g, vertices=tuple(vertices)))
    assert any("undeclared" in v for v in report.violations)


def test_json_round_trip():
    g = make_named("bottleneck", _geom(), RANKS, nonlinear=True)
    assert EinconvGraph.from_json(g.to_json()) == g


def test_malformed_json():
    with pytest.raises(ValidationError, match="Malformed graph JSON"):
        EinconvGraph.from_json('{"outer": []}')
    with pytest.raises(ValidationError, match="Malformed graph JSON"):
        EinconvGraph.from_json("not json")


def test_canonical_form_ignores_rank_names_and_vertex_order():
    geom = _geom()
    a = build_graph([("c", "a"), ("i", "j", "a", "b"), ("b", "c'")], geom, rank_dims={"a": 2, "b": 2})
    b = build_graph([("y", "c'"), ("j", "x", "i", "y"), ("x", "c")], geom, rank_dims={"x": 2, "y": 2})
    assert canonical_form(a) == canonical_form(b)
    assert canonical_hash(a) == canonical_hash(b)


def test_canonical_form_sees_rank_dims():
    geom = _geom()
    a = make_named("bottleneck", geom, {"a": 2, "b": 2})
    b = make_named("bottleneck", geom, {"a": 2, "b": 3})
    assert canonical_form(a) != canonical_form(b)


def test_canonical_form_ignores_geometry():
    a = make_named("cp", _geom(c=2), RANKS)
    b = make_named("cp", _geom(c=7, spatial=10), RANKS)
    assert canonical_form(a) == canonical_form(b)


def test_canonical_graph_renames_ranks():
    g = make_named("bottleneck", _geom(), {"a": 2, "b": 3})
    canon = canonical_graph(g)
    assert canon.rank_labels == ("r1", "r2")
    assert canonical_form(canon) == canonical_form(g)
    assert canonical_form(rename_labels(g, {"a": "q"})) == canonical_form(g)


def test_with_geometry_keeps_rank_dims():
    g = make_named("bottleneck", _geom(), {"a": 2, "b": 3})
    bigger = g.with_geometry(ConvGeometry.same((10, 10), (3, 3), 8, 16))
    assert bigger.dims["c"] == 8
    assert bigger.dims["c'"] == 16
    assert bigger.dims["h'"] == 10
    assert bigger.rank_dims == {"a": 2, "b": 3}
    with pytest.raises(ValidationError):
        g.with_geometry(ConvGeometry.same((10, 10), (5, 5), 8, 16))


def test_strided_geometry_puts_stride_on_last_factor():
    geom = ConvGeometry((9, 9), (5, 5), padding=2, stride=2, channels_in=1, channels_out=1)
    g = make_named("factoring", geom, {"a": 2})
    first, last = g.axis_chain("h")
    assert g.dummy_geometry(first) == (1, 2)
    assert g.dummy_geometry(last) == (2, 0)
    assert g.dims["h'"] == 5
