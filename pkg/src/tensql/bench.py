"""Measurement harnesses behind ``tensql bench``.

Two workloads:

* :func:`bench_decode` sweeps prompt lengths and optimization subsets on a
  model and records prefill and decode wall times per configuration.
* :func:`row2col_workload` times one large matrix product with and without
  the ROW2COL rewrite.  The weight matrix is generated inside the database so
  the measurement does not include bulk loading.

Both return plain rows; the CLI renders them as delimiter-separated text.
Speedups are reported as measured, with no expected value attached.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .graph_ir import Graph, parse_graph
from .models import prompt_tokens
from .optimizer import Row2ColConfig, compile_program
from .preprocess import PreparedModel, weight_table
from .runtime import DecodeSession, connect, execute_script, load_inputs, read_tensor, setup_runtime
from .sqlgen import PARAMS_TABLE, parse_script

PROMPT_LENGTHS = (25, 50, 100, 200)
BENCH_COLUMNS = ("phase", "prompt_len", "tokens", "wall_ms", "statements", "opts")


@dataclass(frozen=True)
class BenchRow:
    phase: str
    prompt_len: int
    tokens: int
    wall_ms: float
    statements: int
    opts: str

    def cells(self) -> list[str]:
        return [
            self.phase, str(self.prompt_len), str(self.tokens),
            f"{self.wall_ms:.3f}", str(self.statements), self.opts,
        ]


def opts_label(opts: Iterable[str]) -> str:
    return "+".join(sorted(opts)) or "none"


def bench_decode(
    model: PreparedModel,
    load: Callable[[DecodeSession, Graph], None],
    opt_sets: Sequence[frozenset[str]],
    prompt_lengths: Sequence[int] = PROMPT_LENGTHS,
    steps: int = 4,
    row2col_config: Row2ColConfig | None = None,
    database: str = ":memory:",
    threads: int = 1,
    memory_limit: str | None = None,
) -> list[BenchRow]:
    """Prefill and decode timings for every (optimization subset, prompt length).

    ``load`` fills a fresh session with the weights of the given graph.  One
    session is created per subset and reused across prompt lengths (the
    session is reset between prompts).
    """
    rows: list[BenchRow] = []
    for opts in opt_sets:
        g = model.graph_for("fusion" in opts)
        prog, _ = compile_program(
            g, cte="cte" in opts, row2col="row2col" in opts, row2col_config=row2col_config,
        )
        n_stmt = len(prog.statements)
        with DecodeSession(g, prog, database=database, threads=threads, memory_limit=memory_limit) as s:
            load(s, g)
            for n in prompt_lengths:
                s.ingest_prompt(prompt_tokens(n))
                t0 = time.perf_counter()
                s.run_prefill()
                t1 = time.perf_counter()
                for _ in range(steps):
                    s.run_decode_step()
                t2 = time.perf_counter()
                label = opts_label(opts)
                rows.append(BenchRow("prefill", n, n, (t1 - t0) * 1e3, n_stmt, label))
                rows.append(BenchRow("decode", n, steps, (t2 - t1) * 1e3, n_stmt * steps, label))
    return rows


# ---------------------------------------------------------------------------
# ROW2COL workload


def matmul_document(rows: int, dim: int, chunk_size: int) -> dict:
    """(rows x dim) input times a (dim x dim) weight."""
    return {
        "name": f"matmul_{rows}x{dim}",
        "tensors": [
            {"name": "a", "shape": [rows, dim], "kind": "input", "chunk_size": chunk_size},
            {"name": "w", "shape": [dim, dim], "kind": "weight", "chunk_size": chunk_size},
            {"name": "y", "shape": [rows, dim], "kind": "output", "chunk_size": chunk_size},
        ],
        "nodes": [{"id": "y", "op": "MatMul", "inputs": ["a", "w"], "output": "y"}],
        "outputs": ["y"],
    }


def generated_weight_sql(table: str, dim: int, chunk_size: int) -> str:
    """Pseudo-random weights in [-1, 1] computed by the engine (transposed layout)."""
    chunks = dim // chunk_size
    value = (
        f"CAST((CAST(hash(r.row_id * {dim} + c.chunk_id * {chunk_size} + i) % 2001 AS BIGINT) - 1000)"
        f" / 1000.0 / {float(np.sqrt(dim))} AS FLOAT)"
    )
    return (
        f"CREATE TABLE {table} AS SELECT r.row_id, c.chunk_id, "
        f"list_transform(range({chunk_size}), i -> {value}) AS vec "
        f"FROM range({dim}) r(row_id), range({chunks}) c(chunk_id)"
    )


@dataclass(frozen=True)
class Row2ColResult:
    rows: int
    dim: int
    config: str
    baseline_ms: float
    rewrite_ms: float
    setup_ms: float
    max_abs_diff: float

    @property
    def speedup(self) -> float:
        return self.baseline_ms / self.rewrite_ms if self.rewrite_ms > 0 else float("inf")

    def bench_rows(self) -> list[BenchRow]:
        label = f"row2col={self.config}"
        return [
            BenchRow("matmul_baseline", self.rows, self.rows, self.baseline_ms, 1, "cte"),
            BenchRow("matmul_row2col_pivot", self.rows, 0, self.setup_ms, 1, label),
            BenchRow("matmul_row2col", self.rows, self.rows, self.rewrite_ms, 1, label),
        ]


def row2col_workload(
    rows: int = 25,
    dim: int = 4096,
    chunk_size: int = 64,
    config: Row2ColConfig | None = None,
    repeat: int = 3,
    seed: int = 0,
    threads: int = 1,
    memory_limit: str | None = None,
) -> Row2ColResult:
    """Time ``(rows x dim) @ (dim x dim)`` unpivoted vs. pivoted; best of ``repeat``."""
    cfg = config or Row2ColConfig()
    g = parse_graph(matmul_document(rows, dim, chunk_size))
    con = connect(threads=threads, memory_limit=memory_limit)
    try:
        setup_runtime(con)
        con.execute(generated_weight_sql(weight_table("w"), dim, chunk_size))
        a = np.random.default_rng(seed).uniform(-1, 1, (rows, dim)).astype(np.float32)
        load_inputs(con, g, {"a": a}, "array")
        con.execute(f"INSERT INTO {PARAMS_TABLE} VALUES (0)")
        results = {}
        timings = {}
        setup_ms = 0.0
        for label, r2c in (("baseline", False), ("row2col", True)):
            prog, report = compile_program(g, row2col=r2c, row2col_config=cfg)
            if r2c and not any(dcs.applied for dcs in report.decisions):
                raise ValueError(f"ROW2COL gate rejected the workload: {report.decisions[0].reason}")
            script = prog.render()
            t0 = time.perf_counter()
            execute_script(con, script, kinds=("setup",))
            if r2c:
                setup_ms = (time.perf_counter() - t0) * 1e3
            best = float("inf")
            for _ in range(max(1, repeat)):
                t0 = time.perf_counter()
                execute_script(con, script)
                best = min(best, (time.perf_counter() - t0) * 1e3)
            timings[label] = best
            rel = parse_script(script).outputs["y"]
            results[label] = read_tensor(con, rel, (rows, dim), g.layout_index("y"), chunk_size, "array")[0]
        diff = float(np.max(np.abs(results["baseline"] - results["row2col"])))
        local = cfg.adapted(dim // chunk_size)
        return Row2ColResult(
            rows, dim, f"{local.projections_per_subquery}x{local.subquery_count}",
            timings["baseline"], timings["row2col"], setup_ms, diff,
        )
    finally:
        con.close()
