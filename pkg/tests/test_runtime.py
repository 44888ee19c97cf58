from __future__ import annotations

import numpy as np
import pytest

from tensql.errors import EngineError, TensqlError
from tensql.models import prompt_tokens
from tensql.optimizer import compile_program
from tensql.runtime import DecodeSession, connect, engine_dialect, probe_capabilities
from tensql.sqlgen import MARKER


def _session(pm, fusion=False, **kw):
    g = pm.graph_for(fusion)
    prog, _ = compile_program(g, **kw)
    s = DecodeSession(g, prog)
    s.load_weights(g, pm.weights)
    return s, prog


@pytest.fixture(scope="module")
def dense_session(dense):
    s, _ = _session(dense[3])
    yield s
    s.close()


def test_capabilities():
    caps = probe_capabilities(connect())
    assert all(caps.values())
    assert engine_dialect("array").has_positional_join


def test_ingest_bytes(dense_session):
    s = dense_session
    assert s.ingest_prompt("ab") == [97, 98]
    assert s.con.execute("SELECT pos, token FROM input_token_table ORDER BY pos").fetchall() == [(0, 97), (1, 98)]
    assert s.position == 2


def test_empty_prompt_rejected(dense_session):
    with pytest.raises(TensqlError):
        dense_session.ingest_prompt("")


def test_prompt_beyond_capacity_rejected(dense_session):
    with pytest.raises(TensqlError):
        dense_session.ingest_prompt([1] * (dense_session.capacity + 1))


def test_decode_before_prefill_rejected(dense_session):
    dense_session.ingest_prompt("x")
    with pytest.raises(TensqlError):
        dense_session.run_decode_step()


def test_reset_clears_state(dense_session):
    s = dense_session
    s.generate("hi", 1)
    assert len(s.read_output()) == 2
    s.reset()
    assert s.read_output() == []
    assert s.position == 0
    for t in s.cache_tables:
        assert s.con.execute(f"SELECT count(*) FROM {t}").fetchone()[0] == 0


def test_positions_and_cache_growth(dense, dense_session):
    m = dense[0]
    s = dense_session
    s.ingest_prompt(prompt_tokens(25))
    s.run_prefill()
    assert s.position == 26
    emb = s.con.execute("SELECT count(*) FROM t_embedding").fetchone()[0]
    assert emb == 25 * m.d_model // m.chunk_size
    kpos = lambda: s.con.execute("SELECT count(DISTINCT kpos) FROM kv_cache_k_0").fetchone()[0]  # noqa: E731
    assert kpos() == 25
    s.run_decode_step()
    assert s.position == 27
    assert kpos() == 26
    # a decode step embeds exactly one new position
    assert s.con.execute("SELECT count(DISTINCT pos) FROM t_embedding").fetchone()[0] == 1


def test_generate_returns_steps_plus_one(dense_session):
    toks = dense_session.generate(prompt_tokens(4), 3)
    assert len(toks) == 4
    assert dense_session.read_output() == toks
    assert dense_session.read_logits().shape == (1, 256)


def test_engine_error_names_statement(dense):
    pm = dense[3]
    g = pm.graph
    prog, _ = compile_program(g, cte=False)
    text = prog.render().replace("FROM v_l0_attn_norm ", "FROM no_such_relation ", 1)
    s = DecodeSession(g, text)
    s.load_weights(g, pm.weights)
    s.ingest_prompt("a")
    with pytest.raises(EngineError) as err:
        s.run_prefill()
    assert err.value.statement_id is not None and err.value.statement_id.startswith("l0_")
    s.close()


def test_persistent_database_reruns_identically(dense, tmp_path):
    pm = dense[3]
    g = pm.graph
    prog, _ = compile_program(g)
    db = str(tmp_path / "model.db")
    with DecodeSession(g, prog, database=db) as s:
        s.load_weights(g, pm.weights)
        first = s.generate("hello", 3)
    for _ in range(2):
        with DecodeSession(g, prog, database=db) as s:
            assert s.generate("hello", 3) == first


def test_expert_zeroing_invariance(moe):
    s, _ = _session(moe[3], fusion=True)
    s.ingest_prompt(prompt_tokens(6))
    for _ in range(3):
        tok, same = s.expert_zeroing_step()
        assert same
    assert len(s.read_output()) == 3
    routes = s._expert_routes()
    assert len(routes) == moe[0].layers
    s.close()


def test_zeroing_selected_experts_changes_logits(moe):
    s, _ = _session(moe[3])
    s.ingest_prompt(prompt_tokens(6))
    s.run_prefill()
    base = s.read_logits()
    s.con.execute("BEGIN TRANSACTION")
    for _, tables in s._expert_routes():
        for t in tables:
            s.con.execute(f"UPDATE {t} SET vec = list_transform(vec, x -> CAST(0 AS FLOAT))")
    s.step, s.position = 0, 6
    s.con.execute("DELETE FROM output_token_table")
    s.run_prefill()
    changed = s.read_logits()
    s.con.execute("ROLLBACK")
    assert not np.array_equal(base, changed)
    s.close()


def test_script_marker_per_statement(dense):
    prog, _ = compile_program(dense[3].graph)
    text = prog.render()
    assert text.count(MARKER) == len(prog.setup) + len(prog.drop_statements()) + len(prog.statements)
