from __future__ import annotations

import pytest

from conftest import graph_doc, node, tensor
from tensql.errors import ChunkingError, GraphCycleError, GraphParseError, UnsupportedOperatorError
from tensql.graph_ir import CATEGORIES, parse_graph, topo_sort
from tensql.models import fixture


def _mm_doc():
    return graph_doc(
        [tensor("a", (2, 4), cs=2), tensor("b", (4, 4), "weight", 2), tensor("y", (2, 4), "output", 2)],
        [node("y", "MatMul", ["a", "b"])],
        ["y"],
    )


def test_nine_categories():
    assert len(CATEGORIES) == 9


def test_parse_and_roundtrip():
    g = parse_graph(_mm_doc())
    again = parse_graph(g.dumps())
    assert again.digest == g.digest
    assert g.node("y").category == "matmul"


def test_digest_changes_with_content():
    doc = _mm_doc()
    d1 = parse_graph(doc).digest
    doc["tensors"][0]["shape"] = [3, 4]
    doc["tensors"][2]["shape"] = [3, 4]
    assert parse_graph(doc).digest != d1


def test_schema_violation():
    doc = _mm_doc()
    del doc["nodes"][0]["op"]
    with pytest.raises(GraphParseError):
        parse_graph(doc)


def test_unknown_operator():
    doc = _mm_doc()
    doc["nodes"][0]["op"] = "FancyOp"
    with pytest.raises(UnsupportedOperatorError):
        parse_graph(doc)


def test_width_not_divisible_by_chunk():
    doc = _mm_doc()
    doc["tensors"][0]["chunk_size"] = 3
    with pytest.raises((ChunkingError, GraphParseError)):
        parse_graph(doc)


def test_cycle_detected():
    doc = graph_doc(
        [tensor("x", (2, 2)), tensor("p", (2, 2), "intermediate"), tensor("q", (2, 2), "output")],
        [node("p", "Add", ["x", "q"]), node("q", "Relu", ["p"])],
        ["q"],
    )
    with pytest.raises(GraphCycleError):
        parse_graph(doc)


def test_shape_mismatch_rejected():
    doc = _mm_doc()
    doc["tensors"][2]["shape"] = [2, 6]
    with pytest.raises(GraphParseError):
        parse_graph(doc)


def test_topological_order():
    _, g, _ = fixture("tiny_dense")
    seen = set()
    for n in topo_sort(g):
        for t in n.inputs:
            p = g.producer(t)
            assert p is None or p.id in seen
        seen.add(n.id)
    assert len(seen) == len(g.nodes)


def test_fixture_layer_has_38_nodes_after_folding(dense):
    _, g, _, pm = dense
    # the two rotary weight products fold away and the two query scales are
    # absorbed into the folded weights
    assert sum(1 for n in g.nodes if n.id.startswith("l0_")) == 42
    assert sum(1 for n in pm.graph.nodes if n.id.startswith("l0_")) == 38
