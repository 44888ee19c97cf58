from __future__ import annotations

import json
import os

import numpy as np
import pytest

from tensql.errors import IntegrityError
from tensql.preprocess import chunk_matrix, chunk_tensor, dechunk, export_weights, read_relation_file, scalar_graph
from tensql.runtime import connect, init_db, setup_runtime


def test_chunk_roundtrip():
    a = np.random.default_rng(0).standard_normal((5, 12)).astype(np.float32)
    rel = chunk_matrix(a, 4, "a")
    assert len(rel) == 5 * 3
    np.testing.assert_array_equal(dechunk(rel), a)


def test_chunk_records():
    rel = chunk_matrix(np.arange(8, dtype=np.float32).reshape(2, 4), 2, "a")
    r = rel.records[3]
    assert (r.row_id, r.chunk_id, r.vec) == (1, 1, (6.0, 7.0))


def test_transposed_storage():
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    rel = chunk_tensor(a, 2, "w", ("row_id",), transposed=True)
    np.testing.assert_array_equal(dechunk(rel), a.T)


def test_export_and_reload(tmp_path):
    a = np.random.default_rng(1).standard_normal((3, 8)).astype(np.float32)
    rel = chunk_matrix(a, 4, "a")
    res = export_weights([rel], "array", str(tmp_path))
    back = read_relation_file(res.files[rel.table], rel.index_cols, 8, 4, name="a")
    np.testing.assert_array_equal(dechunk(back), a)
    con = connect()
    setup_runtime(con)
    manifest = init_db(con, str(tmp_path))
    assert manifest["tensors"]["a"]["records"] == 6
    assert con.execute("SELECT count(*) FROM w_a").fetchone()[0] == 6


def test_missing_data_file_is_named(tmp_path):
    rel = chunk_matrix(np.ones((2, 4), np.float32), 2, "a")
    export_weights([rel], "array", str(tmp_path))
    os.remove(tmp_path / "w_a.tbl")
    with pytest.raises(IntegrityError, match="w_a.tbl"):
        init_db(connect(), str(tmp_path))


def test_record_count_mismatch(tmp_path):
    rel = chunk_matrix(np.ones((2, 4), np.float32), 2, "a")
    export_weights([rel], "array", str(tmp_path))
    path = tmp_path / "weights.json"
    doc = json.loads(path.read_text())
    doc["tensors"]["a"]["records"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(IntegrityError, match="99"):
        init_db(connect(), str(tmp_path))


def test_scalar_export_has_one_value_per_record(tmp_path):
    rel = chunk_matrix(np.ones((2, 4), np.float32), 1, "a")
    res = export_weights([rel], "scalar", str(tmp_path))
    assert res.manifest["tensors"]["a"]["records"] == 8
    con = connect()
    init_db(con, str(tmp_path))
    assert con.execute("SELECT sum(value) FROM w_a").fetchone()[0] == 8


def test_fused_qkv_table_rows(dense):
    m, _, _, pm = dense
    assert pm.fusion, "projections of the attention input are fused"
    g = pm.fused
    fused = [t for t, d in g.tensors.items() if d.parts and t.startswith("l0_")]
    attn = [t for t in fused if {p for p, _ in g.tensors[t].parts} >= {"l0_q_proj", "l0_k_proj", "l0_v_proj"}]
    assert attn
    decl = g.tensors[attn[0]]
    rel = chunk_tensor(pm.weights[attn[0]], decl.chunk_size, attn[0], g.layout_index(attn[0]),
                       transposed=True, parts=decl.parts)
    widths = sum(w for _, w in decl.parts)
    assert len(rel) == widths * m.d_model // m.chunk_size


def test_expert_index_created(moe, tmp_path):
    _, _, _, pm = moe
    from tensql.preprocess import relation_for

    g = pm.graph
    rels = [relation_for(g, t, pm.weights[t]) for t in sorted(g.tensors) if g.tensors[t].is_static]
    res = export_weights(rels, "array", str(tmp_path))
    assert "CREATE INDEX idx_w_l0_e_w1_expert ON w_l0_e_w1(expert_id);" in res.ddl
    con = connect()
    init_db(con, str(tmp_path))
    names = {r[0] for r in con.execute("SELECT index_name FROM duckdb_indexes()").fetchall()}
    assert "idx_w_l0_e_w1_expert" in names


def test_folding_removes_constant_products(dense):
    _, g, _, pm = dense
    assert len(pm.graph.nodes) < len(g.nodes)
    assert not any(n.id.endswith("wq_rot") for n in pm.graph.nodes)


def test_scalar_graph_forces_chunk_one(dense):
    sg = scalar_graph(dense[3].graph)
    assert {d.chunk_size for d in sg.tensors.values()} == {1}
