from __future__ import annotations

import io
import json
import os

import numpy as np
import pytest

from tensql.cli import EXIT_OK, EXIT_USAGE, RunConfig, UsageError, main, parse_opts


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def model_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    fx, md = str(root / "fx"), str(root / "md")
    assert run("fixture", "tiny_dense", "--out", fx)[0] == EXIT_OK
    assert run("import", os.path.join(fx, "manifest.json"), "--out", md)[0] == EXIT_OK
    return root, md


def test_parse_opts():
    assert parse_opts(None) == {"cte", "fusion", "row2col"}
    assert parse_opts("") == frozenset()
    assert parse_opts("cte, fusion") == {"cte", "fusion"}
    with pytest.raises(UsageError):
        parse_opts("cte,magic")


def test_run_config_consistency():
    with pytest.raises(UsageError):
        RunConfig(dialect="scalar")  # default opts include row2col
    RunConfig(dialect="scalar", opts=frozenset({"cte"}))


def test_fixture_seed_is_bit_exact(tmp_path):
    for d in ("a", "b"):
        run("fixture", "tiny_moe", "--seed", "12", "--out", str(tmp_path / d))
    a, b = np.load(tmp_path / "a" / "weights.npz"), np.load(tmp_path / "b" / "weights.npz")
    assert a.files == b.files and all(np.array_equal(a[k], b[k]) for k in a.files)
    assert run("fixture", "tiny_moe", "--out", str(tmp_path / "c"))[0] == EXIT_OK
    c = np.load(tmp_path / "c" / "weights.npz")
    assert not np.array_equal(a["embed"], c["embed"])


def test_compile_all_vs_none_same_tokens(model_dir):
    root, md = model_dir
    outs = {}
    for label, opt in (("all", None), ("none", "")):
        script = str(root / f"{label}.sql")
        argv = ["compile", md, "-o", script] + ([] if opt is None else ["--opt", opt])
        assert run(*argv)[0] == EXIT_OK
        code, text, err = run("run", md, script, "--prompt", "hello", "--steps", "4")
        assert code == EXIT_OK, err
        outs[label] = json.loads(text)
    assert outs["all"]["tokens"] == outs["none"]["tokens"]
    assert len(outs["all"]["tokens"]) == 4
    assert outs["all"]["prefill_ms"] > 0 and len(outs["all"]["decode_ms"]) == 3


def test_compile_report(model_dir):
    root, md = model_dir
    rep = root / "report.jsonl"
    assert run("compile", md, "-o", str(root / "x.sql"), "--report", str(rep))[0] == EXIT_OK
    rows = [json.loads(line) for line in rep.read_text().splitlines()]
    assert {r["pass"] for r in rows} == {"cte", "row2col", "fusion"}
    assert all(set(r) == {"node_id", "pass", "applied", "reason"} for r in rows)


def test_compile_is_deterministic(model_dir):
    _, md = model_dir
    assert run("compile", md)[1] == run("compile", md)[1]


def test_scalar_compile_and_run(model_dir):
    root, md = model_dir
    script = str(root / "scalar.sql")
    assert run("compile", md, "--dialect", "scalar", "--opt", "cte,fusion", "-o", script)[0] == EXIT_OK
    code, text, _ = run("run", md, script, "--prompt", "hello", "--steps", "2")
    assert code == EXIT_OK and len(json.loads(text)["tokens"]) == 2


def test_usage_errors(model_dir):
    _, md = model_dir
    assert run("compile", md, "--dialect", "scalar", "--opt", "row2col")[0] == EXIT_USAGE
    assert run("compile", "/nonexistent")[0] == EXIT_USAGE
    assert run("compile", md, "--row2col", "7")[0] == EXIT_USAGE
    assert run("no-such-command")[0] == EXIT_USAGE


def test_bench_rows(model_dir):
    _, md = model_dir
    code, text, _ = run("bench", md, "--steps", "1", "--opt-sets", "cte,fusion,row2col")
    assert code == EXIT_OK
    lines = text.strip().splitlines()
    assert lines[0] == "phase,prompt_len,tokens,wall_ms,statements,opts"
    rows = [line.split(",") for line in lines[1:]]
    assert len(rows) == 8
    assert {(r[0], int(r[1])) for r in rows} == {(p, n) for p in ("prefill", "decode") for n in (25, 50, 100, 200)}


def test_bench_row2col_workload_small():
    code, text, _ = run("bench", "--row2col-workload", "--dim", "256", "--chunk-size", "16", "--repeat", "1")
    assert code == EXIT_OK
    assert "matmul_row2col" in text and "# speedup" in text


def test_verify_small():
    code, text, _ = run("verify", "--count", "3", "--prompt-lens", "4", "--steps", "2")
    assert code == EXIT_OK
    assert "verify: all checks passed" in text
