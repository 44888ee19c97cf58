from __future__ import annotations

import re
from dataclasses import replace

import numpy as np
import pytest

from conftest import graph_doc, node, tensor
from tensql.errors import RewriteError
from tensql.graph_ir import parse_graph
from tensql.optimizer import (
    Row2ColConfig,
    apply_row2col,
    compile_program,
    find_critical_nodes,
    materializations_per_layer,
    row2col_candidate,
    row2col_gate,
)
from tensql.oracle import ref_forward
from tensql.runtime import run_graph
from tensql.sqlgen import ARRAY, gen_node, get_dialect


def _chain():
    return parse_graph(graph_doc(
        [tensor("x", (2, 2)), tensor("a", (2, 2), "intermediate"), tensor("b", (2, 2), "intermediate"),
         tensor("c", (2, 2), "output")],
        [node("a", "Relu", ["x"]), node("b", "Exp", ["a"]), node("c", "Neg", ["b"])],
        ["c"],
    ))


def _diamond():
    return parse_graph(graph_doc(
        [tensor("x", (2, 2)), tensor("a", (2, 2), "intermediate"), tensor("b", (2, 2), "intermediate"),
         tensor("c", (2, 2), "intermediate"), tensor("d", (2, 2), "output")],
        [node("a", "Relu", ["x"]), node("b", "Exp", ["a"]), node("c", "Neg", ["a"]), node("d", "Mul", ["b", "c"])],
        ["d"],
    ))


def _matmul(r, n, cs, rows=3, ocs=None):
    ocs = ocs or cs
    return parse_graph(graph_doc(
        [tensor("a", (rows, r), cs=cs), tensor("w", (r, n), "weight", cs), tensor("y", (rows, n), "output", ocs)],
        [node("y", "MatMul", ["a", "w"])],
        ["y"],
    ))


def test_chain_marks_only_the_output():
    rep = find_critical_nodes(_chain())
    assert rep.ids == ["c"]
    assert rep.reason("c") == "graph_output"


def test_diamond_marks_the_shared_node():
    rep = find_critical_nodes(_diamond())
    assert set(rep.ids) == {"a", "d"}
    assert rep.reason("a") == "multi_consumer"


def test_fixture_critical_reasons(dense):
    rep = find_critical_nodes(dense[3].graph)
    reasons = {rep.reason(i) for i in rep.ids}
    assert {"residual_source", "persistent_kv", "graph_output", "multi_consumer"} <= reasons


def test_cte_folds_chain_into_one_statement():
    prog, _ = compile_program(_chain())
    assert len(prog.statements) == 1
    assert [c.node_id for c in prog.statements[0].ctes] == ["a", "b"]


@pytest.mark.parametrize("which,nodes,folded", [("dense", 38, 7), ("moe", 44, 8)])
def test_materializations_per_layer(which, nodes, folded, dense, moe):
    pm = (dense if which == "dense" else moe)[3]
    prog, _ = compile_program(pm.graph, cte=False)
    assert materializations_per_layer(prog, "l0_") == nodes
    prog, _ = compile_program(pm.graph, cte=True)
    assert materializations_per_layer(prog, "l0_") == folded


def test_literal_flag_materializes_more(dense):
    g = dense[3].graph
    folded, _ = compile_program(g)
    literal, rep = compile_program(g, literal_cte=True)
    assert materializations_per_layer(literal, "l0_") > materializations_per_layer(folded, "l0_")
    assert any(c.reason == "critical_input" for c in rep.critical.critical)


def test_row2col_config_parse_and_adapt():
    cfg = Row2ColConfig.parse("16x4")
    assert (cfg.projections_per_subquery, cfg.subquery_count, cfg.chunks) == (16, 4, 64)
    assert Row2ColConfig() == cfg
    assert cfg.adapted(8).chunks == 8 and cfg.adapted(8).subquery_count == 4
    assert cfg.adapted(1).chunks == 1
    with pytest.raises(RewriteError):
        Row2ColConfig.parse("16*4")


def test_row2col_structure():
    g = _matmul(64 * 2, 6, 2, ocs=1)
    n = g.node("y")
    cfg = Row2ColConfig()
    unit, pivot = apply_row2col(g, n, gen_node(g, n, ARRAY), cfg, ARRAY)
    assert "GROUP BY" not in unit.query
    subs = re.findall(r"\(SELECT .*? FROM ap_y A CROSS JOIN wp_w B ORDER BY [^)]*\) s\d", unit.query)
    assert len(subs) == 4
    assert all(s.count("list_dot_product") == 16 for s in subs)
    assert unit.query.count("POSITIONAL JOIN") == 3
    assert "PIVOT" in pivot.query and "chunk63" in pivot.query


def test_row2col_chunked_output_has_no_group_by():
    g = _matmul(16, 8, 4)
    n = g.node("y")
    unit, _ = apply_row2col(g, n, gen_node(g, n, ARRAY), Row2ColConfig().adapted(4), ARRAY)
    assert "GROUP BY" not in unit.query
    assert "QUALIFY n % 4 = 0" in unit.query


def test_row2col_config_must_cover_chunks():
    g = _matmul(16, 4, 4)
    n = g.node("y")
    with pytest.raises(RewriteError):
        apply_row2col(g, n, gen_node(g, n, ARRAY), Row2ColConfig(3, 1), ARRAY)


def test_row2col_requires_array_dialect():
    from tensql.preprocess import scalar_graph

    with pytest.raises(RewriteError):
        compile_program(scalar_graph(_matmul(4, 4, 1)), "scalar", row2col=True)


def test_gate_skips_wide_reductions():
    g = _matmul(1024, 4, 1)
    ok, why = row2col_candidate(g, g.node("y"), Row2ColConfig())
    assert not ok and "1024" in why
    assert row2col_gate(64, 64, 4096, Row2ColConfig(), cores=4)[0]
    assert not row2col_gate(64, 512, 10, Row2ColConfig())[0]
    assert not row2col_gate(64, 64, 200_000, Row2ColConfig())[0]


def test_gate_off_keeps_script_identical(dense):
    g = dense[3].graph
    off, _ = compile_program(g, row2col=False)
    gated, rep = compile_program(g, row2col=True, row2col_config=Row2ColConfig(max_chunks=0))
    assert not any(d.applied for d in rep.decisions)
    body = lambda text: text.split("\n\n", 1)[1]  # noqa: E731 - everything after the header
    assert body(off.render()) == body(gated.render())


def test_relation_predicate_excludes_weights(dense):
    g = dense[3].graph
    cfg = Row2ColConfig(enabled_relations=lambda rel: rel != "w_lm_head")
    _, rep = compile_program(g, row2col=True, row2col_config=cfg)
    by_node = {d.node_id: d for d in rep.decisions}
    assert not by_node["logits"].applied
    assert by_node["l0_o_proj"].applied


@pytest.mark.parametrize("positional", [True, False])
def test_row2col_values(positional):
    g = _matmul(32, 12, 4, rows=5)
    rng = np.random.default_rng(0)
    w = {"w": rng.uniform(-2, 2, (32, 12)).astype(np.float32)}
    x = {"a": rng.uniform(-2, 2, (5, 32)).astype(np.float32)}
    d = ARRAY if positional else replace(ARRAY, has_positional_join=False)
    prog, rep = compile_program(g, d, row2col=True)
    assert rep.decisions[0].applied
    assert ("POSITIONAL JOIN" in prog.render()) == positional
    got, _ = run_graph(g, prog, w, x)["y"]
    np.testing.assert_allclose(got, ref_forward(g, w, x)["y"], atol=1e-12)


def test_unreachable_sink_is_flushed():
    g = parse_graph(graph_doc(
        [tensor("x", (2, 2)), tensor("a", (2, 2), "intermediate"), tensor("b", (2, 2), "intermediate"),
         tensor("c", (2, 2), "output")],
        [node("a", "Relu", ["x"]), node("b", "Exp", ["a"]), node("c", "Neg", ["x"])],
        ["c"],
    ))
    prog, _ = compile_program(g)
    assert {s.id for s in prog.statements} == {"c", "b"}
    assert [c.node_id for c in next(s for s in prog.statements if s.id == "b").ctes] == ["a"]
