from __future__ import annotations

import re

import numpy as np
import pytest

from conftest import graph_doc, node, run_sql, tensor
from tensql.errors import AssemblyError, CodegenError
from tensql.graph_ir import parse_graph
from tensql.oracle import ref_forward
from tensql.preprocess import scalar_graph
from tensql.sqlgen import Codegen, assemble_script, gen_node, compile_plain, float_lit, get_dialect, parse_script

rng = np.random.default_rng(3)


def vals(shape):
    return rng.uniform(-2, 2, shape).astype(np.float32)


@pytest.mark.parametrize("cs", [1, 2, 4])
def test_identity_matmul(cs):
    a = vals((3, 4))
    doc = graph_doc(
        [tensor("a", (3, 4), cs=cs), tensor("i", (4, 4), "weight", cs), tensor("y", (3, 4), "output", cs)],
        [node("y", "MatMul", ["a", "i"])],
        ["y"],
    )
    out = run_sql(doc, {"i": np.eye(4, dtype=np.float32)}, {"a": a})["y"]
    np.testing.assert_allclose(out, a, atol=1e-7)


@pytest.mark.parametrize("dialect", ["array", "scalar"])
def test_add_zero(dialect):
    cs = 1 if dialect == "scalar" else 2
    a = vals((2, 6))
    doc = graph_doc(
        [tensor("a", (2, 6), cs=cs), tensor("z", (2, 6), cs=cs), tensor("y", (2, 6), "output", cs)],
        [node("y", "Add", ["a", "z"])],
        ["y"],
    )
    out = run_sql(doc, inputs={"a": a, "z": np.zeros((2, 6), np.float32)}, dialect=dialect)["y"]
    np.testing.assert_array_equal(out, a.astype(np.float64))


def test_softmax_of_zeros():
    doc = graph_doc(
        [tensor("x", (1, 3)), tensor("y", (1, 3), "output")],
        [node("y", "Softmax", ["x"])],
        ["y"],
    )
    out = run_sql(doc, inputs={"x": np.zeros((1, 3), np.float32)})["y"]
    np.testing.assert_allclose(out, [[1 / 3] * 3], atol=1e-15)


def test_reshape_round_trip():
    x = vals((3, 8))
    doc = graph_doc(
        [
            tensor("x", (3, 8), cs=2),
            tensor("h", (3, 2, 4), "intermediate", 2, ("pos", "head", "col")),
            tensor("y", (3, 8), "output", 2),
        ],
        [node("h", "Reshape", ["x"], {"shape": [-1, 2, 4]}), node("y", "Reshape", ["h"], {"shape": [-1, 8]})],
        ["y"],
    )
    np.testing.assert_array_equal(run_sql(doc, inputs={"x": x})["y"], x)


def test_slice_concat_identity():
    x = vals((4, 8))
    doc = graph_doc(
        [
            tensor("x", (4, 8), cs=2),
            tensor("l", (4, 4), "intermediate", 2),
            tensor("r", (4, 4), "intermediate", 2),
            tensor("y", (4, 8), "output", 2),
        ],
        [
            node("l", "Slice", ["x"], {"axes": [1], "starts": [0], "stops": [4]}),
            node("r", "Slice", ["x"], {"axes": [1], "starts": [4], "stops": [8]}),
            node("y", "Concat", ["l", "r"], {"axis": -1}),
        ],
        ["y"],
    )
    np.testing.assert_array_equal(run_sql(doc, inputs={"x": x})["y"], x)


def test_transpose_involution():
    x = vals((2, 3, 4))
    dims = ("a", "b", "col")
    doc = graph_doc(
        [
            tensor("x", (2, 3, 4), cs=2, dims=dims),
            tensor("t", (4, 3, 2), "intermediate", 1, ("p", "q", "col")),
            tensor("y", (2, 3, 4), "output", 2, dims),
        ],
        [node("t", "Transpose", ["x"], {"perm": [2, 1, 0]}), node("y", "Transpose", ["t"], {"perm": [2, 1, 0]})],
        ["y"],
    )
    np.testing.assert_array_equal(run_sql(doc, inputs={"x": x})["y"], x)


def test_single_node_single_statement():
    g = parse_graph(graph_doc([tensor("x", (2, 2)), tensor("y", (2, 2), "output")], [node("y", "Relu", ["x"])], ["y"]))
    prog = compile_plain(g)
    assert len(prog.statements) == 1
    assert len(parse_script(prog.render()).of_kind("view", "materialized_table", "insert")) == 1


def test_unoptimized_statement_count_equals_node_count(dense):
    g = dense[3].graph
    assert len(compile_plain(g).statements) == len(g.nodes)


def test_fused_matmul_groups_by_flag(dense):
    g = dense[3].fused
    fused = next(n for n in g.nodes if n.id == "l0_fused0")
    unit = gen_node(g, fused, get_dialect("array"))
    group = re.search(r"GROUP BY (.*)", unit.query, re.S)
    assert group and "flag" in group.group(1)


def test_fused_graph_matches_oracle(dense):
    _, g, w, pm = dense
    toks = [1, 2, 3, 4]
    want = ref_forward(g, w, tokens=toks)["logits"][:4]
    from tensql.runtime import run_graph

    got, mask = run_graph(pm.fused, compile_plain(pm.fused), pm.weights, {}, tokens=toks)["logits"]
    np.testing.assert_allclose(got[:4], want, atol=1e-6)
    assert mask[:4].all() and not mask[4:].any()


def test_scalar_dialect_requires_chunk_one():
    g = parse_graph(graph_doc([tensor("x", (2, 4), cs=2), tensor("y", (2, 4), "output", 2)], [node("y", "Relu", ["x"])], ["y"]))
    with pytest.raises(CodegenError):
        Codegen(g, get_dialect("scalar"))
    Codegen(scalar_graph(g), get_dialect("scalar"))


def test_assembly_rejects_missing_units(dense):
    g = dense[3].graph
    units = Codegen(g, get_dialect("array")).generate_all()
    with pytest.raises(AssemblyError):
        assemble_script(g, units[:-1])


def test_script_round_trip(dense):
    prog = compile_plain(dense[3].graph)
    parsed = parse_script(prog.render())
    assert parsed.header["dialect"] == "array"
    assert parsed.outputs["logits"] == prog.outputs["logits"]
    assert [s[0] for s in parsed.of_kind("materialized_table", "insert")] == [s.id for s in prog.statements]


def test_float_literal_is_exact():
    x = 0.1 + 0.2
    assert float(re.search(r"'(.*)'", float_lit(x)).group(1)) == x
