"""Executing compiled scripts in DuckDB.

:class:`DecodeSession` owns one connection.  It loads the exported weight
relations, keeps the token tables and key/value caches, and runs the compiled
script once per generated token (greedy decoding).  The same script serves the
prefill step (``decode_params.position = 0``) and each decode step
(``position`` = position of the newest token): lookups only emit rows at or
after that position and the caches hold everything before it.
"""

from __future__ import annotations

import json
import os
import re
import shutil
import tempfile
import time
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

import duckdb
import numpy as np

from .errors import EngineError, IntegrityError, TensqlError
from .graph_ir import Graph
from .models import encode
from .preprocess import (
    DATA_DELIMITER,
    ChunkedRelation,
    chunk_tensor,
    export_weights,
    input_table,
    relation_for,
    weight_table,
)
from .sqlgen import OUTPUT_TABLE, PARAMS_TABLE, TOKEN_TABLE, Program, get_dialect, parse_script
from .sqlgen.dialect import Dialect

RUNTIME_DDL = (
    f"CREATE TABLE IF NOT EXISTS {TOKEN_TABLE}(pos BIGINT, token BIGINT)",
    f"CREATE TABLE IF NOT EXISTS {OUTPUT_TABLE}(step BIGINT, token BIGINT)",
    f"CREATE TABLE IF NOT EXISTS {PARAMS_TABLE}(position BIGINT)",
)


def connect(database: str = ":memory:", threads: int = 1, memory_limit: str | None = None) -> duckdb.DuckDBPyConnection:
    try:
        con = duckdb.connect(database)
        con.execute(f"SET threads = {int(threads)}")
        con.execute("SET enable_progress_bar = false")
        if memory_limit:
            con.execute(f"SET memory_limit = '{memory_limit}'")
    except duckdb.Error as exc:
        raise EngineError(str(exc)) from exc
    return con


def probe_capabilities(con: duckdb.DuckDBPyConnection) -> dict[str, bool]:
    """Which engine features the generated SQL relies on are available."""
    probes = {
        "list_dot_product": "SELECT list_dot_product([1.0, 2.0], [3.0, 4.0])",
        "lambda": "SELECT list_transform([1.0], lambda x: x + 1)",
        "positional_join": "SELECT * FROM (SELECT 1 AS a) POSITIONAL JOIN (SELECT 2 AS b)",
        "pivot": "PIVOT (SELECT 1 AS k, 0 AS c, 5 AS v) ON c IN (0) USING first(v) GROUP BY k",
    }
    out = {}
    for name, sql in probes.items():
        try:
            con.execute(sql).fetchall()
            out[name] = True
        except duckdb.Error:
            out[name] = False
    return out


def engine_dialect(name: str | Dialect = "array", con: duckdb.DuckDBPyConnection | None = None) -> Dialect:
    """The named dialect with optional features switched off when the engine lacks them."""
    d = get_dialect(name)
    own = con is None
    con = con or connect()
    try:
        caps = probe_capabilities(con)
    finally:
        if own:
            con.close()
    if d.is_array and not (caps["list_dot_product"] and caps["lambda"]):
        raise EngineError("engine lacks list functions required by the array dialect; use the scalar dialect")
    return replace(d, has_positional_join=d.has_positional_join and caps["positional_join"],
                   has_pivot_syntax=d.has_pivot_syntax and caps["pivot"])


# ---------------------------------------------------------------------------
# loading


def _load_sql(table: str, path: str, index_cols: Sequence[str], dialect: Dialect) -> str:
    cols = {c: "BIGINT" for c in index_cols}
    cols[dialect.chunk_col] = "BIGINT"
    cols[dialect.vec_col] = "VARCHAR" if dialect.is_array else "FLOAT"
    spec = ", ".join(f"'{k}': '{v}'" for k, v in cols.items())
    sel = [*index_cols, dialect.chunk_col]
    sel.append(f"CAST({dialect.vec_col} AS FLOAT[])" if dialect.is_array else dialect.vec_col)
    path_lit = path.replace("'", "''")
    return (
        f"INSERT INTO {table} SELECT {', '.join(sel)} FROM read_csv('{path_lit}', "
        f"delim='{DATA_DELIMITER}', header=false, quote='', columns={{{spec}}})"
    )


def init_db(con: duckdb.DuckDBPyConnection, model_dir: str, verify: bool = True) -> dict[str, Any]:
    """Create and bulk-load the weight tables exported into ``model_dir``."""
    try:
        with open(os.path.join(model_dir, "weights.json"), encoding="utf-8") as fh:
            manifest = json.load(fh)
        with open(os.path.join(model_dir, "schema.sql"), encoding="utf-8") as fh:
            ddl = fh.read()
    except OSError as exc:
        raise IntegrityError(f"cannot read model directory {model_dir!r}: {exc}") from exc
    dialect = get_dialect(manifest.get("dialect", "array"))
    for name, info in sorted(manifest["tensors"].items()):
        if not os.path.isfile(os.path.join(model_dir, info["file"])):
            raise IntegrityError(f"data file {info['file']!r} for tensor {name!r} is missing from {model_dir!r}")
    try:
        for stmt in ddl.split(";"):
            if stmt.strip():
                con.execute(stmt)
        for name, info in sorted(manifest["tensors"].items()):
            path = os.path.join(model_dir, info["file"])
            con.execute(_load_sql(info["table"], path, info["index_cols"], dialect))
    except duckdb.Error as exc:
        raise EngineError(f"loading weights failed: {exc}") from exc
    if verify:
        for name, info in manifest["tensors"].items():
            (count,) = con.execute(f"SELECT count(*) FROM {info['table']}").fetchone()
            if count != info["records"]:
                raise IntegrityError(
                    f"table {info['table']} holds {count} records, manifest says {info['records']}"
                )
    return manifest


def load_relations(
    con: duckdb.DuckDBPyConnection,
    rels: Iterable[ChunkedRelation],
    dialect: str | Dialect = "array",
) -> dict[str, Any]:
    """Export relations to a scratch directory and bulk-load them."""
    tmp = tempfile.mkdtemp(prefix="tensql_")
    try:
        export_weights(rels, get_dialect(dialect).id, tmp)
        return init_db(con, tmp)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def input_relation(g: Graph, name: str, value: Any) -> ChunkedRelation:
    decl = g.decl(name)
    cols = g.layout_index(name) if decl.rank > 1 else ("row_id",)
    rel = chunk_tensor(value, decl.chunk_size, name, cols)
    return rel


def load_inputs(con: duckdb.DuckDBPyConnection, g: Graph, inputs: Mapping[str, Any], dialect: str | Dialect) -> None:
    """Load runtime input tensors (tables ``in_<name>``)."""
    rels = []
    for name, value in inputs.items():
        rel = input_relation(g, name, value)
        rels.append(rel)
    if not rels:
        return
    tmp = tempfile.mkdtemp(prefix="tensql_in_")
    d = get_dialect(dialect)
    try:
        for rel in rels:
            exp = export_weights([rel], d.id, tmp)
            ddl = exp.ddl.replace(f"CREATE TABLE {rel.table}", f"CREATE OR REPLACE TABLE {input_table(rel.name)}")
            con.execute(ddl)
            con.execute(_load_sql(input_table(rel.name), os.path.join(tmp, f"{rel.table}.tbl"), rel.index_cols, d))
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


# ---------------------------------------------------------------------------
# reading results


def read_tensor(
    con: duckdb.DuckDBPyConnection,
    relation: str,
    shape: Sequence[int],
    index_cols: Sequence[str],
    chunk_size: int,
    dialect: str | Dialect = "array",
) -> tuple[np.ndarray, np.ndarray]:
    """Dense value array and a boolean mask of the entries present in ``relation``."""
    d = get_dialect(dialect)
    cols = ", ".join([*index_cols, d.chunk_col, d.vec_col])
    rows = con.execute(f"SELECT {cols} FROM {relation}").fetchall()
    out = np.zeros(tuple(shape), dtype=np.float64)
    mask = np.zeros(tuple(shape), dtype=bool)
    k = len(index_cols)
    cs = chunk_size if d.is_array else 1
    for row in rows:
        idx = tuple(int(i) for i in row[:k])
        c = int(row[k])
        vals = row[k + 1] if d.is_array else [row[k + 1]]
        sl = idx + (slice(c * cs, c * cs + len(vals)),)
        out[sl] = np.asarray(vals, dtype=np.float64)
        mask[sl] = True
    return out, mask


def argmax_sql(relation: str, pos_col: str, chunk_size: int, dialect: str | Dialect = "array") -> str:
    """Index of the largest value in the last position's row (ties -> smallest)."""
    d = get_dialect(dialect)
    last = f"SELECT * FROM {relation} WHERE {pos_col} = (SELECT max({pos_col}) FROM {relation})"
    if d.is_array:
        return (
            f"WITH last AS ({last}), best AS (SELECT max(list_max(vec)) AS m FROM last)\n"
            f"SELECT min(chunk_id * {chunk_size} + list_position(vec, best.m) - 1) "
            f"FROM last, best WHERE list_max(vec) = best.m"
        )
    return (
        f"WITH last AS ({last}), best AS (SELECT max(value) AS m FROM last)\n"
        f"SELECT min(col_id) FROM last, best WHERE value = best.m"
    )


# ---------------------------------------------------------------------------
# execution


@dataclass
class StepTiming:
    statement_id: str
    seconds: float


def execute_script(
    con: duckdb.DuckDBPyConnection,
    script: str,
    kinds: Sequence[str] = ("drop", "view", "materialized_table", "insert"),
    timings: list[StepTiming] | None = None,
) -> None:
    parsed = parse_script(script)
    for sid, kind, sql in parsed.statements:
        if kind not in kinds:
            continue
        t0 = time.perf_counter()
        try:
            con.execute(sql)
        except duckdb.Error as exc:
            raise EngineError(str(exc).splitlines()[0], statement_id=sid) from exc
        if timings is not None:
            timings.append(StepTiming(sid, time.perf_counter() - t0))


def setup_runtime(con: duckdb.DuckDBPyConnection, script: str | None = None) -> None:
    """Token tables and, with ``script``, its one-off setup statements.

    Setup statements may read weight tables, so run them after loading.
    """
    for ddl in RUNTIME_DDL:
        con.execute(ddl)
    if script is not None:
        execute_script(con, script, kinds=("setup",))


@dataclass
class DecodeSession:
    """Greedy decoding of a compiled model inside one DuckDB connection."""

    graph: Graph
    script: str
    dialect: str = "array"
    database: str = ":memory:"
    threads: int = 1
    memory_limit: str | None = None
    con: duckdb.DuckDBPyConnection = field(init=False, repr=False)
    position: int = field(init=False, default=0)
    step: int = field(init=False, default=0)
    timings: list[list[StepTiming]] = field(init=False, default_factory=list)

    def __post_init__(self) -> None:
        if isinstance(self.script, Program):
            self.script = self.script.render()
        parsed = parse_script(self.script)
        self.dialect = parsed.header.get("dialect", self.dialect)
        self._outputs = parsed.outputs
        self.con = connect(self.database, self.threads, self.memory_limit)
        self.capabilities = probe_capabilities(self.con)
        setup_runtime(self.con)
        self._prepared = False
        self.last_token: int | None = None
        self.logits_tensor = next(
            (t for t in self.graph.outputs if t.endswith("logits")), self.graph.outputs[0]
        )
        self.capacity = self.graph.decl(self.logits_tensor).shape[0]

    # --- data -----------------------------------------------------------
    def init_db(self, model_dir: str) -> dict[str, Any]:
        return init_db(self.con, model_dir)

    def load_weights(self, g: Graph, weights: Mapping[str, Any]) -> None:
        rels = [relation_for(g, n, weights[n]) for n in sorted(g.tensors) if g.tensors[n].is_static]
        load_relations(self.con, rels, self.dialect)

    @property
    def cache_tables(self) -> list[str]:
        return [str(n.attr["cache"]) for n in self.graph.nodes if n.op == "CacheAppend"]

    def prepare(self) -> None:
        """Run the script's setup statements (after the weights are loaded)."""
        if not self._prepared:
            execute_script(self.con, self.script, kinds=("setup",))
            self._prepared = True

    def reset(self) -> None:
        # Tables are recreated rather than emptied: in a persisted database
        # the engine can answer top-N queries on a table from stale
        # statistics after a DELETE.
        for t in self.cache_tables + [TOKEN_TABLE, OUTPUT_TABLE, PARAMS_TABLE]:
            self.con.execute(f"DROP TABLE IF EXISTS {t}")
        setup_runtime(self.con)
        self._prepared = False
        self.prepare()
        self.last_token = None
        self.position = 0
        self.step = 0
        self.timings = []

    def ingest_prompt(self, prompt: str | bytes | Sequence[int]) -> list[int]:
        tokens = encode(prompt) if isinstance(prompt, (str, bytes)) else [int(t) for t in prompt]
        if not tokens:
            raise TensqlError("empty prompt")
        if len(tokens) > self.capacity:
            raise TensqlError(f"prompt of {len(tokens)} tokens exceeds capacity {self.capacity}")
        self.reset()
        self.con.executemany(f"INSERT INTO {TOKEN_TABLE} VALUES (?, ?)", list(enumerate(tokens)))
        self.position = len(tokens)
        return tokens

    # --- steps ----------------------------------------------------------
    def _run(self, start: int) -> int:
        self.con.execute(f"DELETE FROM {PARAMS_TABLE}")
        self.con.execute(f"INSERT INTO {PARAMS_TABLE} VALUES ({int(start)})")
        timings: list[StepTiming] = []
        execute_script(self.con, self.script, timings=timings)
        self.timings.append(timings)
        rel = self._outputs[self.logits_tensor]
        pos_col = self.graph.layout_index(self.logits_tensor)[0]
        cs = self.graph.decl(self.logits_tensor).chunk_size
        try:
            (tok,) = self.con.execute(argmax_sql(rel, pos_col, cs, self.dialect)).fetchone()
        except duckdb.Error as exc:
            raise EngineError(str(exc), statement_id="argmax") from exc
        if tok is None:
            raise EngineError("no logits produced", statement_id="argmax")
        (npos,) = self.con.execute(f"SELECT count(*) FROM {TOKEN_TABLE}").fetchone()
        self.con.execute(f"INSERT INTO {OUTPUT_TABLE} VALUES (?, ?)", [self.step, int(tok)])
        self.step += 1
        self.last_token = int(tok)
        # prompt tokens plus generated tokens (the newest is not yet ingested)
        self.position = npos + 1
        return int(tok)

    def _append(self, tok: int) -> int:
        pos = self.position - 1
        if pos >= self.capacity:
            raise TensqlError(f"sequence capacity {self.capacity} exhausted")
        self.con.execute(f"INSERT INTO {TOKEN_TABLE} VALUES (?, ?)", [pos, tok])
        return pos

    def run_prefill(self) -> int:
        return self._run(0)

    def run_decode_step(self) -> int:
        if self.step == 0 or self.last_token is None:
            raise TensqlError("run_prefill must come before the first decode step")
        return self._run(self._append(self.last_token))

    def generate(self, prompt: str | bytes | Sequence[int], steps: int) -> list[int]:
        """Prefill plus ``steps`` decode steps; returns ``steps + 1`` tokens."""
        self.ingest_prompt(prompt)
        out = [self.run_prefill()]
        for _ in range(steps):
            out.append(self.run_decode_step())
        return out

    # --- mixture-of-experts check ------------------------------------------
    def _expert_routes(self) -> list[tuple[str, list[str]]]:
        """(materialized route relation, expert-stacked weight tables) per routed layer."""
        parsed = parse_script(self.script)
        ids = {n.id for n in self.graph.nodes}
        by_output = {}
        for sid, kind, sql in parsed.statements:
            if kind == "materialized_table" and sid in ids:
                m = re.match(r"CREATE TABLE (\w+)", sql)
                if m:
                    by_output[self.graph.node(sid).output] = m.group(1)
        out = []
        for n in self.graph.nodes:
            if n.op != "MatMul":
                continue
            spec = self.graph.matmul_spec(n)
            if spec.route is None:
                continue
            rel = by_output.get(spec.route.name)
            if rel is None:
                raise TensqlError(f"route tensor {spec.route.name!r} is not materialized")
            prefix = n.id.split("_", 1)[0] + "_"
            tables = sorted(
                weight_table(t)
                for t, decl in self.graph.tensors.items()
                if decl.is_static and t.startswith(prefix) and "expert_id" in self.graph.layout_index(t)
            )
            if (rel, tables) not in out:
                out.append((rel, tables))
        return out

    def expert_zeroing_step(self) -> tuple[int, bool]:
        """Run the next step and check that zeroing unselected experts changes nothing.

        The step is evaluated three times: once to find the experts the
        router selected for the step's positions, once more inside a
        transaction in which every other expert's weight rows are set to
        zero (then rolled back), and finally for real.  Returns the token and
        whether the logits of the zeroed run are bit-identical.
        """
        routes = self._expert_routes()
        if not routes:
            raise TensqlError("graph has no routed expert layers")
        state = (self.step, self.position, list(self.timings), self.last_token)
        step = self.run_prefill if self.step == 0 else self.run_decode_step
        d = get_dialect(self.dialect)

        self.con.execute("BEGIN TRANSACTION")
        step()
        (start,) = self.con.execute(f"SELECT position FROM {PARAMS_TABLE}").fetchone()
        base = self.read_logits()
        selected = []
        for rel, _ in routes:
            col = d.chunk_col
            val = f"{d.vec_col}[1]" if d.is_array else d.vec_col
            rows = self.con.execute(f"SELECT DISTINCT {col} FROM {rel} WHERE pos >= {start} AND {val} <> 0").fetchall()
            selected.append(sorted(int(r[0]) for r in rows))
        self.con.execute("ROLLBACK")
        self.step, self.position, self.timings, self.last_token = state[0], state[1], list(state[2]), state[3]

        self.con.execute("BEGIN TRANSACTION")
        zero = "list_transform(vec, x -> CAST(0 AS FLOAT))" if d.is_array else "CAST(0 AS FLOAT)"
        for (_, tables), keep in zip(routes, selected):
            cond = f"expert_id NOT IN ({', '.join(map(str, keep))})" if keep else "TRUE"
            for t in tables:
                self.con.execute(f"UPDATE {t} SET {d.vec_col} = {zero} WHERE {cond}")
        step()
        zeroed = self.read_logits()
        self.con.execute("ROLLBACK")
        self.step, self.position, self.timings, self.last_token = state[0], state[1], list(state[2]), state[3]

        tok = step()
        same = base.shape == zeroed.shape and bool(np.array_equal(base, zeroed))
        return tok, same

    def read_output(self) -> list[int]:
        return [int(t) for (t,) in self.con.execute(f"SELECT token FROM {OUTPUT_TABLE} ORDER BY step").fetchall()]

    def read_logits(self) -> np.ndarray:
        """Logits rows produced by the latest step (positions >= its start)."""
        decl = self.graph.decl(self.logits_tensor)
        vals, mask = read_tensor(
            self.con, self._outputs[self.logits_tensor], decl.shape,
            self.graph.layout_index(self.logits_tensor), decl.chunk_size, self.dialect,
        )
        rows = np.where(mask.any(axis=1))[0]
        return vals[rows]

    def close(self) -> None:
        self.con.close()

    def __enter__(self) -> DecodeSession:
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


# ---------------------------------------------------------------------------
# one-shot evaluation of arbitrary graphs


def run_graph(
    g: Graph,
    script: str | Program,
    weights: Mapping[str, Any],
    inputs: Mapping[str, Any] | None = None,
    tokens: Sequence[int] | None = None,
    dialect: str = "array",
    con: duckdb.DuckDBPyConnection | None = None,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Run ``script`` once and return ``{output: (values, mask)}``."""
    if isinstance(script, Program):
        dialect = script.dialect.id
        script = script.render()
    own = con is None
    con = con or connect()
    try:
        setup_runtime(con)
        rels = [relation_for(g, n, weights[n]) for n in sorted(g.tensors) if g.tensors[n].is_static]
        if rels:
            load_relations(con, rels, dialect)
        gather_ids = {n.inputs[1] for n in g.nodes if n.op == "Gather"}
        load_inputs(con, g, {k: v for k, v in (inputs or {}).items() if k not in gather_ids}, dialect)
        execute_script(con, script, kinds=("setup",))
        con.execute(f"INSERT INTO {PARAMS_TABLE} VALUES (0)")
        if tokens is not None:
            con.executemany(f"INSERT INTO {TOKEN_TABLE} VALUES (?, ?)", list(enumerate(int(t) for t in tokens)))
        execute_script(con, script)
        outputs = parse_script(script).outputs
        result = {}
        for t in g.outputs:
            decl = g.decl(t)
            cs = decl.chunk_size
            result[t] = read_tensor(con, outputs[t], decl.shape, g.layout_index(t), cs, dialect)
        return result
    finally:
        if own:
            con.close()
