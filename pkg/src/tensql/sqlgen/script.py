"""Assembling per-node SQL into an executable script.

A :class:`Program` is an ordered list of :class:`Statement` objects.  A
statement materializes (or defines) one target unit, optionally inlining a
set of other units as common table expressions.  The rendered script carries
a header, a drop preamble and one ``-- stmt:`` marker per statement so that a
runner can split it again without parsing SQL.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from ..errors import AssemblyError
from ..graph_ir import Graph, topo_sort
from .dialect import Dialect, get_dialect
from .templates import Codegen, SqlUnit

MARKER = "-- stmt: "
HEADER = "-- tensql script"


@dataclass(frozen=True)
class Statement:
    """One executable statement: ``target`` with ``ctes`` inlined before it."""

    target: SqlUnit
    ctes: tuple[SqlUnit, ...] = ()

    @property
    def id(self) -> str:
        return self.target.node_id

    @property
    def kind(self) -> str:
        return self.target.kind

    def sql(self) -> str:
        t = self.target
        if not self.ctes:
            return t.statement()
        with_clause = "WITH " + ",\n".join(f"{c.output_relation} AS (\n{c.query}\n)" for c in self.ctes)
        body = t.query
        if body.lstrip().upper().startswith("WITH"):
            body = f"SELECT * FROM (\n{body}\n) q"
        query = f"{with_clause}\n{body}"
        return SqlUnit(t.node_id, query, t.kind, t.depends_on, t.output_relation, t.columns).statement()


@dataclass
class Program:
    """Statements in execution order plus bookkeeping for the runner."""

    graph: Graph
    dialect: Dialect
    statements: list[Statement]
    setup: list[SqlUnit] = field(default_factory=list)
    flags: dict[str, object] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)

    @property
    def materialized(self) -> list[str]:
        return [s.id for s in self.statements if s.kind == "materialized_table"]

    @property
    def views(self) -> list[str]:
        return [s.id for s in self.statements if s.kind == "view"]

    def step_relations(self) -> list[tuple[str, str]]:
        """(kind, name) of every relation recreated on each step."""
        return [(s.kind, s.target.output_relation) for s in self.statements if s.kind in ("view", "materialized_table")]

    def drop_statements(self) -> list[str]:
        out = []
        for kind, rel in reversed(self.step_relations()):
            out.append(f"DROP {'VIEW' if kind == 'view' else 'TABLE'} IF EXISTS {rel};")
        return out

    def render(self) -> str:
        lines = [
            HEADER,
            f"-- graph: {self.graph.name} {self.graph.digest}",
            f"-- dialect: {self.dialect.id}",
            "-- flags: " + ",".join(f"{k}={v}" for k, v in sorted(self.flags.items())),
        ]
        for tensor, rel in self.outputs.items():
            lines.append(f"-- output: {tensor}={rel}")
        lines.append("")
        for u in self.setup:
            lines += [f"{MARKER}{u.node_id} setup", u.statement(), ""]
        for i, drop in enumerate(self.drop_statements()):
            lines += [f"{MARKER}drop_{i} drop", drop, ""]
        for s in self.statements:
            lines += [f"{MARKER}{s.id} {s.kind}", s.sql(), ""]
        return "\n".join(lines)


@dataclass(frozen=True)
class ParsedScript:
    """A rendered script split back into statements."""

    header: dict[str, str]
    outputs: dict[str, str]
    statements: list[tuple[str, str, str]]  # (id, kind, sql)

    def of_kind(self, *kinds: str) -> list[tuple[str, str, str]]:
        return [s for s in self.statements if s[1] in kinds]


def parse_script(text: str) -> ParsedScript:
    if not text.startswith(HEADER):
        raise AssemblyError("not a tensql script (missing header)")
    header: dict[str, str] = {}
    outputs: dict[str, str] = {}
    statements: list[tuple[str, str, str]] = []
    current: tuple[str, str] | None = None
    buf: list[str] = []

    def flush() -> None:
        if current is not None:
            sql = "\n".join(buf).strip()
            if sql:
                statements.append((current[0], current[1], sql))

    for line in text.splitlines():
        if line.startswith(MARKER):
            flush()
            parts = line[len(MARKER):].split()
            if len(parts) != 2:
                raise AssemblyError(f"malformed statement marker: {line!r}")
            current = (parts[0], parts[1])
            buf = []
        elif current is None:
            m = re.match(r"-- (\w+): (.*)$", line)
            if m and m.group(1) == "output":
                k, _, v = m.group(2).partition("=")
                outputs[k] = v
            elif m:
                header[m.group(1)] = m.group(2)
        else:
            buf.append(line)
    flush()
    return ParsedScript(header, outputs, statements)


def assemble_script(
    g: Graph,
    units: Sequence[SqlUnit],
    dialect: str | Dialect = "array",
    setup: Iterable[SqlUnit] = (),
    flags: dict[str, object] | None = None,
) -> Program:
    """One statement per unit, in topological order; every node must be covered."""
    by_id = {u.node_id: u for u in units}
    order = [n.id for n in topo_sort(g)]
    missing = [nid for nid in order if nid not in by_id]
    if missing:
        raise AssemblyError(f"no SQL for node(s) {missing[:5]}")
    extra = sorted(set(by_id) - set(order))
    if extra:
        raise AssemblyError(f"SQL units for unknown node(s) {extra[:5]}")
    stmts = [Statement(by_id[nid]) for nid in order]
    prog = Program(g, get_dialect(dialect), stmts, list(setup), dict(flags or {}))
    prog.outputs = output_relations(g, stmts)
    return prog


def output_relations(g: Graph, statements: Sequence[Statement]) -> dict[str, str]:
    rel = {}
    for s in statements:
        rel[g.node(s.id).output] = s.target.output_relation
    for s in statements:
        for c in s.ctes:
            rel.setdefault(g.node(c.node_id).output, c.output_relation)
    return {t: rel[t] for t in g.outputs if t in rel}


def compile_plain(g: Graph, dialect: str | Dialect = "array", materialize: bool = True) -> Program:
    """Unoptimized program: one temporary relation per node.

    With ``materialize`` (the default) every node result is a table; with
    ``materialize=False`` every node is a view, which the engine re-expands
    at each use (only practical for small graphs).
    """
    cg = Codegen(g, get_dialect(dialect))
    units = cg.generate_all()
    if materialize:
        units = [replace(u, kind="materialized_table") if u.kind == "view" else u for u in units]
    return assemble_script(g, units, cg.dialect, cg.setup_units(), {"opt": "none"})
