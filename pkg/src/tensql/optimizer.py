"""SQL-level optimizations of compiled programs.

* **CTE folding** (:func:`eliminate_temp_views`): only *critical* node results
  are materialized; every other node is inlined as a common table expression
  into the statement of the critical node that consumes it.
* **ROW2COL** (:func:`apply_row2col`): a MatMul against a static weight is
  rewritten from join-and-aggregate into pivoted (wide) operands, a cross
  join with a fixed number of dot-product columns per subquery, and a
  positional join that adds the partial sums, with no grouping for the
  reduction.

Weight fusion is a graph rewrite and lives in :mod:`tensql.preprocess`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

from .errors import RewriteError
from .graph_ir import Graph, OpNode, topo_sort
from .preprocess import weight_table
from .sqlgen import Codegen, Dialect, Program, SqlUnit, Statement, assemble_script, get_dialect
from .sqlgen.script import output_relations

# ---------------------------------------------------------------------------
# criticality


@dataclass(frozen=True)
class CriticalNode:
    node_id: str
    reason: str  # residual_source | multi_consumer | persistent_kv | graph_output


@dataclass
class CriticalityReport:
    critical: list[CriticalNode]
    out_degree: dict[str, int]

    @property
    def ids(self) -> list[str]:
        return [c.node_id for c in self.critical]

    def reason(self, node_id: str) -> str | None:
        for c in self.critical:
            if c.node_id == node_id:
                return c.reason
        return None


def find_critical_nodes(g: Graph) -> CriticalityReport:
    """Nodes whose results must be materialized.

    A node is critical when more than one node consumes its output (a
    residual source if one of them is an addition), when its output is
    persistent, or when it is a graph output.
    """
    crit: list[CriticalNode] = []
    degree = {}
    for n in topo_sort(g):
        consumers = g.consumers(n.output)
        degree[n.id] = len(consumers)
        if len(consumers) > 1:
            reason = "residual_source" if any(c.op == "Add" for c in consumers) else "multi_consumer"
        elif n.output in g.persistent:
            reason = "persistent_kv"
        elif n.output in g.outputs:
            reason = "graph_output"
        else:
            continue
        crit.append(CriticalNode(n.id, reason))
    return CriticalityReport(crit, degree)


# ---------------------------------------------------------------------------
# CTE folding


def _rename(query: str, renames: dict[str, str]) -> str:
    if not renames:
        return query
    pat = re.compile(r"\b(" + "|".join(re.escape(k) for k in sorted(renames, key=len, reverse=True)) + r")\b")
    return pat.sub(lambda m: renames[m.group(1)], query)


def eliminate_temp_views(
    g: Graph,
    units: Sequence[SqlUnit],
    literal: bool = False,
) -> tuple[list[Statement], CriticalityReport]:
    """Fold every non-critical unit into the statement of its critical consumer.

    Each critical node becomes one statement that inlines, as CTEs, all its
    non-critical ancestors reachable without crossing another critical node.
    With ``literal`` the non-critical direct inputs of critical nodes are
    materialized too.  Nodes that feed no critical node are flushed as
    tables at the end.
    """
    report = find_critical_nodes(g)
    crit = set(report.ids)
    if literal:
        extra = set()
        for cid in report.ids:
            for t in g.node(cid).inputs:
                p = g.producer(t)
                if p is not None and p.id not in crit:
                    extra.add(p.id)
        for nid in sorted(extra):
            report.critical.append(CriticalNode(nid, "critical_input"))
        crit |= extra
    by_id = {u.node_id: u for u in units}
    renames = {
        by_id[c].output_relation: f"t_{c}"
        for c in crit
        if by_id[c].kind in ("view", "materialized_table")
    }

    def target(u: SqlUnit) -> SqlUnit:
        q = _rename(u.query, renames)
        if u.node_id in crit and u.kind in ("view", "materialized_table"):
            return replace(u, query=q, kind="materialized_table", output_relation=f"t_{u.node_id}")
        return replace(u, query=q)

    order = [n.id for n in topo_sort(g)]
    pos = {nid: i for i, nid in enumerate(order)}
    used: set[str] = set()
    statements: list[Statement] = []
    for nid in order:
        if nid not in crit:
            continue
        closure: set[str] = set()
        stack = [nid]
        while stack:
            cur = stack.pop()
            for t in g.node(cur).inputs:
                p = g.producer(t)
                if p is None or p.id in crit or p.id in closure:
                    continue
                closure.add(p.id)
                stack.append(p.id)
        ctes = tuple(target(by_id[c]) for c in sorted(closure, key=pos.__getitem__))
        used |= closure
        statements.append(Statement(target(by_id[nid]), ctes))
    # nodes feeding no critical node end in unconsumed sinks: one flush each
    left = [nid for nid in order if nid not in crit and nid not in used]
    consumed = {p.id for nid in left for t in g.node(nid).inputs if (p := g.producer(t)) is not None}
    for nid in left:
        if nid in consumed:
            continue
        closure = {nid}
        stack = [nid]
        while stack:
            for t in g.node(stack.pop()).inputs:
                p = g.producer(t)
                if p is not None and p.id in left and p.id not in closure:
                    closure.add(p.id)
                    stack.append(p.id)
        ctes = tuple(target(by_id[c]) for c in sorted(closure - {nid}, key=pos.__getitem__))
        u = target(by_id[nid])
        statements.append(Statement(replace(u, kind="materialized_table", output_relation=f"t_{nid}"), ctes))
    return statements, report


# ---------------------------------------------------------------------------
# ROW2COL


@dataclass(frozen=True)
class Row2ColConfig:
    """``P`` dot-product columns per subquery, ``S_q`` subqueries (C = P * S_q chunks)."""

    projections_per_subquery: int = 16
    subquery_count: int = 4
    max_chunks: int = 256
    max_chunk_size: int = 256
    max_rows: int = 100_000
    enabled_relations: Callable[[str], bool] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.projections_per_subquery < 1 or self.subquery_count < 1:
            raise RewriteError("ROW2COL needs P >= 1 and S_q >= 1")

    @property
    def chunks(self) -> int:
        return self.projections_per_subquery * self.subquery_count

    @classmethod
    def parse(cls, text: str, **kw: int) -> Row2ColConfig:
        """``"16x4"`` -> P=16, S_q=4."""
        m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", text)
        if not m:
            raise RewriteError(f"ROW2COL config must look like PxS (e.g. 16x4), got {text!r}")
        return cls(int(m.group(1)), int(m.group(2)), **kw)

    def adapted(self, chunks: int) -> Row2ColConfig:
        """Config for a reduction over ``chunks`` chunks.

        Keeps the configured split when it fits; otherwise uses the largest
        subquery count not above the configured one that divides ``chunks``.
        """
        if self.chunks == chunks:
            return self
        sq = max(s for s in range(1, self.subquery_count + 1) if chunks % s == 0)
        return replace(self, projections_per_subquery=chunks // sq, subquery_count=sq)


@dataclass(frozen=True)
class RewriteDecision:
    node_id: str
    pass_name: str
    applied: bool
    reason: str


def row2col_gate(chunks: int, chunk_size: int, rows: int, cfg: Row2ColConfig, cores: int = 1) -> tuple[bool, str]:
    """Size gate for the rewrite: wide pivots only pay off for moderate widths.

    ``cores`` is recorded in the reason; the thresholds themselves are the
    configured limits.
    """
    if chunks > cfg.max_chunks:
        return False, f"{chunks} chunks exceed the limit of {cfg.max_chunks}"
    if chunk_size > cfg.max_chunk_size:
        return False, f"chunk size {chunk_size} exceeds the limit of {cfg.max_chunk_size}"
    if rows >= cfg.max_rows:
        return False, f"{rows} weight rows exceed the limit of {cfg.max_rows}"
    return True, f"{chunks} chunks of {chunk_size} on {cores} core(s)"


def row2col_candidate(g: Graph, node: OpNode, cfg: Row2ColConfig, cores: int = 1) -> tuple[bool, str]:
    """Whether ``node`` can be rewritten, with the reason."""
    if node.op != "MatMul":
        return False, "not a MatMul"
    spec = g.matmul_spec(node)
    if spec.transpose_b or not spec.b.is_static:
        return False, "right operand is not a static weight"
    if spec.b.rank != 2:
        return False, "batched right operand"
    if spec.route is not None or spec.pairs or spec.causal:
        return False, "routed, batched or causal product"
    if spec.a.is_static:
        return False, "left operand is static"
    if cfg.enabled_relations is not None and not cfg.enabled_relations(weight_table(spec.b.name)):
        return False, "relation excluded by configuration"
    cs = spec.a.chunk_size
    return row2col_gate(spec.r_size // cs, cs, spec.n_size, cfg, cores)


def pivot_weight_unit(g: Graph, weight: str, dialect: Dialect, chunks: int) -> SqlUnit:
    """Setup statement creating the wide (one row per output column) weight."""
    d = dialect
    src = weight_table(weight)
    cols = ", ".join(f'"{c}" AS chunk{c}' for c in range(chunks))
    ids = ", ".join(str(c) for c in range(chunks))
    q = (
        f"CREATE TABLE IF NOT EXISTS wp_{weight} AS\n"
        f"SELECT row_id, {cols} FROM (\n"
        f"PIVOT (SELECT row_id, {d.chunk_col}, {d.double(d.vec_col)} AS {d.vec_col} FROM {src})\n"
        f"ON {d.chunk_col} IN ({ids}) USING first({d.vec_col})\n)"
    )
    return SqlUnit(f"pivot_{weight}", q, "setup", frozenset(), f"wp_{weight}")


def apply_row2col(
    g: Graph,
    node: OpNode,
    unit: SqlUnit,
    cfg: Row2ColConfig,
    dialect: Dialect,
) -> tuple[SqlUnit, SqlUnit]:
    """Rewritten unit for ``node`` and the weight pivot it needs.

    ``cfg`` must split the node's chunk count exactly (see
    :meth:`Row2ColConfig.adapted`).
    """
    if not dialect.is_array:
        raise RewriteError("ROW2COL requires the array dialect")
    ok, why = row2col_candidate(g, node, cfg)
    if not ok:
        raise RewriteError(f"{node.id}: ROW2COL not applicable ({why})")
    d = dialect
    spec = g.matmul_spec(node)
    cs = spec.a.chunk_size
    chunks = spec.r_size // cs
    if cfg.chunks != chunks:
        raise RewriteError(
            f"{node.id}: config {cfg.projections_per_subquery}x{cfg.subquery_count} covers "
            f"{cfg.chunks} chunks, the reduction has {chunks}"
        )
    cg = Codegen(g, d)
    a_rel = cg.relation(spec.a.name)
    a_idx = list(spec.a_idx)
    out_cols = list(cg.out_cols(node))
    keys = ", ".join(f"A.{c}" for c in a_idx)
    a_sel = ", ".join(a_idx + [f'"{c}" AS chunk{c}' for c in range(chunks)])
    a_vec = d.double(d.vec_col) if cg.stored(spec.a.name) else d.vec_col
    ids = ", ".join(str(c) for c in range(chunks))
    ap = f"ap_{node.id}"
    pivot_a = (
        f"{ap} AS (\nSELECT {a_sel} FROM (\n"
        f"PIVOT (SELECT {', '.join(a_idx)}, {d.chunk_col}, {a_vec} AS {d.vec_col} FROM {a_rel})\n"
        f"ON {d.chunk_col} IN ({ids}) USING first({d.vec_col})\n))"
    )
    order = ", ".join([f"A.{c}" for c in a_idx] + ["B.row_id"])
    subs = []
    P = cfg.projections_per_subquery
    positional = d.has_positional_join
    for q in range(cfg.subquery_count):
        dots = " + ".join(d.dot(f"A.chunk{c}", f"B.chunk{c}") for c in range(q * P, (q + 1) * P))
        head = f"{keys}, B.row_id AS n, " if (q == 0 or not positional) else ""
        tail = f" ORDER BY {order}" if positional else ""
        subs.append(f"(SELECT {head}{dots} AS val FROM {ap} A CROSS JOIN wp_{spec.b.name} B{tail}) s{q}")
    total = " + ".join(f"s{q}.val" for q in range(cfg.subquery_count))
    idx_sel = ", ".join(f"s0.{c} AS {o}" for c, o in zip(a_idx, out_cols))
    idx_sel = idx_sel + ", " if idx_sel else ""
    if positional:
        joined = "\nPOSITIONAL JOIN ".join(subs)
    else:
        # equi-join on the (row, output column) key when rows cannot be paired by position
        joined = subs[0]
        for q in range(1, cfg.subquery_count):
            on = " AND ".join([f"s0.{c} = s{q}.{c}" for c in a_idx] + [f"s0.n = s{q}.n"])
            joined += f"\nJOIN {subs[q]} ON {on}"
    prod = f"SELECT {idx_sel}s0.n AS n, {total} AS val FROM {joined}"
    out_cs = g.decl(node.output).chunk_size
    if out_cs == 1:
        items = out_cols + [f"n AS {d.chunk_col}", f"{d.pack('val')} AS {d.vec_col}"]
        query = f"WITH {pivot_a}, p_{node.id} AS (\n{prod}\n)\nSELECT {', '.join(items)} FROM p_{node.id}"
    else:
        # repack the reduced scalars into output chunks with a window frame so
        # the rewritten statement carries no GROUP BY
        part = ", ".join(out_cols + [f"n // {out_cs}"])
        window = (
            f"list(val) OVER (PARTITION BY {part} ORDER BY n "
            f"ROWS BETWEEN CURRENT ROW AND {out_cs - 1} FOLLOWING)"
        )
        items = out_cols + [f"n // {out_cs} AS {d.chunk_col}", f"{window} AS {d.vec_col}"]
        query = (
            f"WITH {pivot_a}, p_{node.id} AS (\n{prod}\n)\n"
            f"SELECT {', '.join(items)} FROM p_{node.id}\n"
            f"QUALIFY n % {out_cs} = 0"
        )
    return replace(unit, query=query), pivot_weight_unit(g, spec.b.name, d, chunks)


def choose_row2col(
    g: Graph,
    units: Sequence[SqlUnit],
    cfg: Row2ColConfig,
    dialect: Dialect,
) -> tuple[list[SqlUnit], list[SqlUnit], list[RewriteDecision]]:
    """Apply ROW2COL wherever the gate admits it; returns (units, setup, decisions)."""
    out, setup, decisions = [], {}, []
    for u in units:
        node = g.node(u.node_id)
        if node.op != "MatMul":
            out.append(u)
            continue
        ok, why = row2col_candidate(g, node, cfg)
        if ok and not dialect.has_pivot_syntax:
            ok, why = False, "engine has no PIVOT"
        if ok:
            spec = g.matmul_spec(node)
            local = cfg.adapted(spec.r_size // spec.a.chunk_size)
            u, piv = apply_row2col(g, node, u, local, dialect)
            setup[piv.node_id] = piv
            why = f"{why}, {local.projections_per_subquery}x{local.subquery_count}"
        decisions.append(RewriteDecision(node.id, "row2col", ok, why))
        out.append(u)
    return out, list(setup.values()), decisions


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class OptimizeReport:
    critical: CriticalityReport | None = None
    decisions: list[RewriteDecision] = field(default_factory=list)
    materialized: list[str] = field(default_factory=list)

    def lines(self) -> list[str]:
        out = []
        if self.critical is not None:
            for c in self.critical.critical:
                out.append(f"critical {c.node_id} ({c.reason})")
        for dcs in self.decisions:
            state = "applied" if dcs.applied else "skipped"
            out.append(f"{dcs.pass_name} {dcs.node_id}: {state} ({dcs.reason})")
        out.append(f"materialized relations: {len(self.materialized)}")
        return out


def compile_program(
    g: Graph,
    dialect: str | Dialect = "array",
    cte: bool = True,
    row2col: bool = False,
    row2col_config: Row2ColConfig | None = None,
    literal_cte: bool = False,
    extra_flags: dict[str, object] | None = None,
) -> tuple[Program, OptimizeReport]:
    """Generate SQL for ``g`` and apply the requested SQL-level passes."""
    d = get_dialect(dialect)
    cg = Codegen(g, d)
    units = cg.generate_all()
    setup = cg.setup_units()
    report = OptimizeReport()
    if row2col:
        if not d.is_array:
            raise RewriteError("ROW2COL requires the array dialect")
        cfg = row2col_config or Row2ColConfig()
        units, piv, report.decisions = choose_row2col(g, units, cfg, d)
        setup += piv
    flags: dict[str, object] = {"cte": cte, "row2col": row2col, "literal_cte": literal_cte}
    flags.update(extra_flags or {})
    if cte:
        statements, report.critical = eliminate_temp_views(g, units, literal=literal_cte)
        prog = Program(g, d, statements, setup, flags)
        prog.outputs = output_relations(g, statements)
    else:
        units = [replace(u, kind="materialized_table") if u.kind == "view" else u for u in units]
        prog = assemble_script(g, units, d, setup, flags)
    report.materialized = prog.materialized
    return prog, report


def materializations_per_layer(prog: Program, prefix: str) -> int:
    """Materialized relations whose node id starts with ``prefix`` (e.g. ``l0_``)."""
    return sum(1 for s in prog.statements if s.id.startswith(prefix) and s.kind in ("materialized_table", "insert"))


def statement_kinds(prog: Program) -> dict[str, int]:
    out: dict[str, int] = {}
    for s in prog.statements:
        out[s.kind] = out.get(s.kind, 0) + 1
    return out

