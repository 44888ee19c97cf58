"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line (shown in the terminal summary) before
asserting.  Criterion 10 re-runs the workloads of criteria 2-4 in fresh
databases and compares against the results cached by the first runs, so the
module is meant to run in file order.
"""

from __future__ import annotations

import re
import time

import numpy as np
import pytest

from tensql.bench import matmul_document, opts_label, row2col_workload
from tensql.cli import all_subsets
from tensql.graph_ir import CATEGORIES, parse_graph
from tensql.models import fixture, prompt_tokens
from tensql.optimizer import Row2ColConfig, compile_program, materializations_per_layer
from tensql.oracle import (
    ref_attention_gqa,
    ref_attention_mha,
    ref_attention_mqa,
    ref_greedy_decode,
)
from tensql.preprocess import prepare, scalar_graph
from tensql.runtime import DecodeSession, run_graph
from tensql.verify import (
    TOKENS_LEN,
    check_conv,
    combine,
    conv_grid,
    generate_instances,
    output_error,
    run_attention_sql,
    run_operator_suite,
)

TOL = 1e-4
PROMPT_LENS = (4, 8, 16, 32)
NEW_TOKENS = 20
ALL_OPTS = frozenset({"cte", "fusion", "row2col"})
FIRST_RUNS: dict[str, object] = {}


def _models():
    out = {}
    for name in ("tiny_dense", "tiny_moe"):
        m, g, w = fixture(name)
        out[name] = (m, g, w, prepare(g, w))
    return out


@pytest.fixture(scope="module")
def models():
    return _models()


def decode(pm, opts, prompt, new_tokens, dialect="array", literal_cte=False, zeroing=False):
    """Greedy decode in a fresh in-memory database.

    Returns (tokens, last-position logits per step, script, zeroing results).
    """
    g = pm.graph_for("fusion" in opts)
    if dialect == "scalar":
        g = scalar_graph(g)
    prog, _ = compile_program(
        g, dialect, cte="cte" in opts, row2col="row2col" in opts, literal_cte=literal_cte,
    )
    script = prog.render()
    toks, logits, same = [], [], []
    with DecodeSession(g, prog) as s:
        s.load_weights(g, pm.weights)
        s.ingest_prompt(prompt)
        for i in range(new_tokens):
            if zeroing:
                tok, ok = s.expert_zeroing_step()
                same.append(ok)
            else:
                tok = s.run_prefill() if i == 0 else s.run_decode_step()
            toks.append(tok)
            logits.append(s.read_logits()[-1])
    return toks, np.array(logits), script, same


# ---------------------------------------------------------------------------


def test_criterion_01_operator_suite(criterion):
    t0 = time.perf_counter()
    results = run_operator_suite(count=100, dialect="array", tol=TOL)
    elapsed = time.perf_counter() - t0
    worst = max(r.max_error for r in results)
    ok = all(r.passed and r.instances >= 100 for r in results) and len(results) == 9 and elapsed < 300
    criterion(1, ok, f"9 categories x 100 instances, max abs error {worst:.2e} (tol {TOL}), {elapsed:.1f}s (< 300s)")
    assert ok, [f for r in results for f in r.failures][:10]


def test_criterion_02_dense_decode(models, criterion):
    m, g, w, pm = models["tiny_dense"]
    t0 = time.perf_counter()
    mismatches, worst = [], 0.0
    runs = {}
    for n in PROMPT_LENS:
        prompt = prompt_tokens(n)
        toks, logits, script, _ = decode(pm, ALL_OPTS, prompt, NEW_TOKENS)
        ref, ref_logits = ref_greedy_decode(g, w, prompt, NEW_TOKENS - 1, return_logits=True)
        worst = max(worst, float(np.max(np.abs(logits - np.array(ref_logits)))))
        if toks != ref:
            mismatches.append(n)
        runs[n] = (toks, script)
    elapsed = time.perf_counter() - t0
    FIRST_RUNS["dense"] = runs
    ok = not mismatches and elapsed < 120
    criterion(
        2, ok,
        f"tiny_dense prompts {PROMPT_LENS}: {NEW_TOKENS} tokens identical to oracle"
        f"{'' if not mismatches else f' except prompts {mismatches}'}, max logit diff {worst:.2e}, {elapsed:.1f}s (< 120s)",
    )
    assert ok


def test_criterion_03_moe_decode(models, criterion):
    m, g, w, pm = models["tiny_moe"]
    assert (m.experts, m.top_k) == (8, 2)
    t0 = time.perf_counter()
    mismatches, zero_fail = [], []
    runs = {}
    for n in PROMPT_LENS:
        prompt = prompt_tokens(n)
        toks, _, script, same = decode(pm, ALL_OPTS, prompt, NEW_TOKENS, zeroing=True)
        if toks != ref_greedy_decode(g, w, prompt, NEW_TOKENS - 1):
            mismatches.append(n)
        if not (len(same) == NEW_TOKENS and all(same)):
            zero_fail.append(n)
        runs[n] = (toks, script)
    elapsed = time.perf_counter() - t0
    FIRST_RUNS["moe"] = runs
    ok = not mismatches and not zero_fail and elapsed < 180
    criterion(
        3, ok,
        f"tiny_moe prompts {PROMPT_LENS}: tokens identical for {NEW_TOKENS} tokens"
        f" (mismatch {mismatches or 'none'}), expert zeroing exact at every step"
        f" (fail {zero_fail or 'none'}), {elapsed:.1f}s (< 180s)",
    )
    assert ok


def test_criterion_04_optimization_soundness(models, criterion):
    prompt = prompt_tokens(16)
    bad, worst = [], 0.0
    runs = {}
    for name, (_, _, _, pm) in models.items():
        base_toks, base_logits, _, _ = decode(pm, frozenset(), prompt, NEW_TOKENS)
        for opts in all_subsets():
            toks, logits, script, _ = decode(pm, opts, prompt, NEW_TOKENS)
            diff = float(np.max(np.abs(logits - base_logits)))
            worst = max(worst, diff)
            if toks != base_toks or not diff <= 1e-6:
                bad.append(f"{name}/{opts_label(opts)}")
            runs[(name, opts)] = (toks, script)
    FIRST_RUNS["subsets"] = runs
    ok = not bad
    criterion(
        4, ok,
        f"8 subsets x 2 fixtures: max logit diff vs unoptimized {worst:.2e} (tol 1e-6),"
        f" tokens identical{'' if ok else f'; failing {bad}'}",
    )
    assert ok


def test_criterion_05_view_elimination(models, criterion):
    _, _, _, pm = models["tiny_dense"]
    g = pm.graph
    per_layer = [sum(1 for n in g.nodes if n.id.startswith(f"l{i}_")) for i in range(2)]
    plain, _ = compile_program(g, cte=False)
    folded, _ = compile_program(g, cte=True)
    literal, _ = compile_program(g, cte=True, literal_cte=True)
    counts = [materializations_per_layer(folded, f"l{i}_") for i in range(2)]
    base_counts = [materializations_per_layer(plain, f"l{i}_") for i in range(2)]
    lit_counts = [materializations_per_layer(literal, f"l{i}_") for i in range(2)]

    prompt = prompt_tokens(16)
    base_toks, base_logits, _, _ = decode(pm, frozenset(), prompt, 8)
    lit_toks, lit_logits, _, _ = decode(pm, frozenset({"cte"}), prompt, 8, literal_cte=True)
    lit_diff = float(np.max(np.abs(lit_logits - base_logits)))
    ok = (
        per_layer == [38, 38] and base_counts == [38, 38] and counts == [7, 7]
        and lit_toks == base_toks and lit_diff <= 1e-6
    )
    criterion(
        5, ok,
        f"dense layer: {per_layer[0]} nodes, {base_counts[0]} materialized without folding,"
        f" {counts[0]} with folding; literal flag: {lit_counts[0]} per layer,"
        f" logit diff {lit_diff:.2e}",
    )
    assert ok


def test_criterion_06_row2col(criterion):
    assert Row2ColConfig() == Row2ColConfig.parse("16x4")
    cfg = Row2ColConfig()
    g = parse_graph(matmul_document(25, 4096, 64))
    prog, report = compile_program(g, cte=True, row2col=True, row2col_config=cfg)
    chunks = 4096 // 64
    stmt_sql = next(s for s in prog.statements if s.id == "y").sql()
    subs = re.findall(r"\(SELECT .*? FROM ap_y A CROSS JOIN wp_w B ORDER BY [^)]*\) s\d", stmt_sql)
    dots = [s.count("list_dot_product") for s in subs]
    structure = (
        report.decisions[0].applied
        and stmt_sql.count("GROUP BY") == 0
        and len(subs) == cfg.subquery_count
        and all(d == cfg.projections_per_subquery for d in dots)
        and cfg.projections_per_subquery * cfg.subquery_count == chunks
    )
    res = row2col_workload(rows=25, dim=4096, chunk_size=64, config=cfg, repeat=3)
    ok = structure and res.max_abs_diff <= TOL and res.speedup > 0
    criterion(
        6, ok,
        f"rewrite: {stmt_sql.count('GROUP BY')} GROUP BY, {len(subs)} subqueries x {dots[0] if dots else 0} dot products = {chunks} chunks;"
        f" 25x4096 workload: baseline {res.baseline_ms:.0f} ms, rewrite {res.rewrite_ms:.0f} ms,"
        f" measured speedup {res.speedup:.2f}x (pivot setup {res.setup_ms:.0f} ms, diff {res.max_abs_diff:.1e})",
    )
    assert ok


def test_criterion_07_gqa_degeneracy(criterion):
    rng = np.random.default_rng(3)
    t_len, heads, dk = 6, 4, 8
    q = rng.uniform(-1, 1, (t_len, heads, dk))
    worst = 0.0
    for groups in (heads, 1):
        k = rng.uniform(-1, 1, (t_len, groups, dk))
        v = rng.uniform(-1, 1, (t_len, groups, dk))
        if groups == heads:
            special = ref_attention_mha(q, k, v)
        else:
            special = ref_attention_mqa(q, k[:, 0], v[:, 0])
        oracle = ref_attention_gqa(q, k, v, groups)
        worst = max(worst, float(np.max(np.abs(oracle - special))))
        for dialect in ("array", "scalar"):
            sql = run_attention_sql(q, k, v, groups, chunk_size=4, dialect=dialect)
            worst = max(worst, float(np.max(np.abs(sql - special))))
    ok = worst <= 1e-5
    criterion(7, ok, f"G=H vs multi-head and G=1 vs multi-query, oracle and SQL: max diff {worst:.2e} (tol 1e-5)")
    assert ok


def test_criterion_08_convolution(criterion):
    grid = conv_grid()
    errors = [(c.label, check_conv(c)) for c in grid]
    worst = max(e for _, e in errors)
    bad = [label for label, e in errors if not e <= TOL]
    ok = not bad
    criterion(8, ok, f"{len(grid)} conv cases (channels<=32, images<=32, kernels 1/3/5/7): max diff {worst:.2e} (tol {TOL})")
    assert ok, bad


def test_criterion_09_dialect_parity(models, criterion):
    worst_ops, bad = 0.0, []
    for cat in CATEGORIES:
        instances = generate_instances(cat, 100)
        g, weights, inputs = combine(instances, f"parity_{cat}")
        tokens = np.random.default_rng(0).integers(0, TOKENS_LEN, TOKENS_LEN)
        outs = {}
        for dialect in ("array", "scalar"):
            run_g = scalar_graph(g) if dialect == "scalar" else g
            prog, _ = compile_program(run_g, dialect, cte=False)
            outs[dialect] = run_graph(run_g, prog, weights, inputs, tokens=tokens)
        for inst in instances:
            av, am = outs["array"][inst.output]
            sv, sm = outs["scalar"][inst.output]
            err = output_error(sv, sm, np.where(am, av, 0.0))
            worst_ops = max(worst_ops, err)
            if not err <= TOL:
                bad.append(inst.label)

    _, _, _, pm = models["tiny_dense"]
    opts = frozenset({"cte", "fusion"})
    worst_dec, tok_bad = 0.0, []
    for n in PROMPT_LENS:
        a_toks, a_logits, _, _ = decode(pm, opts, prompt_tokens(n), NEW_TOKENS, "array")
        s_toks, s_logits, _, _ = decode(pm, opts, prompt_tokens(n), NEW_TOKENS, "scalar")
        worst_dec = max(worst_dec, float(np.max(np.abs(a_logits - s_logits))))
        if a_toks != s_toks:
            tok_bad.append(n)
    ok = not bad and not tok_bad and worst_dec <= TOL
    criterion(
        9, ok,
        f"scalar vs array: operator suite max diff {worst_ops:.2e}, dense decode max logit diff"
        f" {worst_dec:.2e} (tol {TOL}), tokens identical{'' if not tok_bad else f' except {tok_bad}'}",
    )
    assert ok, bad[:10]


def test_criterion_10_determinism(models, criterion):
    if not {"dense", "moe", "subsets"} <= FIRST_RUNS.keys():
        pytest.skip("requires criteria 2-4 to have run first in this session")
    fresh = _models()
    diffs = []
    for key, name in (("dense", "tiny_dense"), ("moe", "tiny_moe")):
        pm = fresh[name][3]
        for n, (toks, script) in FIRST_RUNS[key].items():
            toks2, _, script2, _ = decode(pm, ALL_OPTS, prompt_tokens(n), NEW_TOKENS)
            if toks2 != toks or script2.encode() != script.encode():
                diffs.append(f"{name}/{n}")
    for (name, opts), (toks, script) in FIRST_RUNS["subsets"].items():
        toks2, _, script2, _ = decode(fresh[name][3], opts, prompt_tokens(16), NEW_TOKENS)
        if toks2 != toks or script2.encode() != script.encode():
            diffs.append(f"{name}/{opts_label(opts)}")
    ok = not diffs
    runs = len(FIRST_RUNS["dense"]) + len(FIRST_RUNS["moe"]) + len(FIRST_RUNS["subsets"])
    criterion(10, ok, f"{runs} runs repeated from fresh databases: tokens and scripts byte-identical{'' if ok else f' except {diffs}'}")
    assert ok
