"""One SQL template per operator category.

Every node becomes a :class:`SqlUnit` whose query reads the relations of its
inputs and produces the relation of its output tensor:

* index columns named by the output's layout index (``Graph.layout_index``),
* a chunk column (``chunk_id`` / ``col_id``) and a value column (``vec`` /
  ``value``).

Weights and inputs are stored in single precision and widened to DOUBLE on
read; every intermediate relation is double precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

from ..errors import CodegenError
from ..graph_ir import (
    ARITH_OPS,
    FN_OF_OP,
    Graph,
    OpNode,
    conv_out_hw,
    normalization_attr,
    reshape_attr,
)
from ..preprocess import input_table, weight_table
from .dialect import ELEMENT_SQL, Dialect, float_lit, get_dialect

TOKEN_TABLE = "input_token_table"
OUTPUT_TABLE = "output_token_table"
PARAMS_TABLE = "decode_params"
START_FILTER = f"(SELECT position FROM {PARAMS_TABLE})"


@dataclass(frozen=True)
class SqlUnit:
    """SQL for one node.

    ``kind`` is ``view`` (a lazily evaluated relation), ``materialized_table`` (a
    materialized relation), ``insert`` (appends to a persistent table) or
    ``setup`` (run once before the first step).
    """

    node_id: str
    query: str
    kind: str
    depends_on: frozenset[str]
    output_relation: str
    columns: tuple[str, ...] = ()

    def statement(self) -> str:
        if self.kind == "view":
            return f"CREATE VIEW {self.output_relation} AS\n{self.query};"
        if self.kind == "materialized_table":
            return f"CREATE TABLE {self.output_relation} AS\n{self.query};"
        if self.kind == "insert":
            return f"INSERT INTO {self.output_relation} ({', '.join(self.columns)})\n{self.query};"
        return self.query if self.query.rstrip().endswith(";") else self.query + ";"


def node_relation(node: OpNode) -> str:
    if node.op == "CacheAppend":
        return str(node.attr["cache"])
    return f"v_{node.id}"


@dataclass
class Codegen:
    """Generates per-node SQL for a graph in one dialect."""

    graph: Graph
    dialect: Dialect = field(default_factory=lambda: get_dialect("array"))

    def __post_init__(self) -> None:
        self.dialect = get_dialect(self.dialect)
        if not self.dialect.is_array:
            wide = [t.name for t in self.graph.tensors.values() if t.chunk_size != 1]
            if wide:
                raise CodegenError(
                    f"scalar dialect needs chunk size 1 everywhere (e.g. {wide[0]!r}); "
                    "use preprocess.scalar_graph"
                )

    # --- relation naming --------------------------------------------------
    def relation(self, tensor: str) -> str:
        decl = self.graph.decl(tensor)
        if decl.is_static:
            return weight_table(tensor)
        prod = self.graph.producer(tensor)
        if prod is None:
            return input_table(tensor)
        return node_relation(prod)

    def stored(self, tensor: str) -> bool:
        """Single-precision storage (weights, constants, inputs)."""
        decl = self.graph.decl(tensor)
        return decl.is_static or self.graph.producer(tensor) is None

    def vec(self, tensor: str, alias: str) -> str:
        col = f"{alias}.{self.dialect.vec_col}"
        return self.dialect.double(col) if self.stored(tensor) else col

    def deps(self, node: OpNode) -> frozenset[str]:
        out = set()
        for t in node.inputs:
            p = self.graph.producer(t)
            if p is not None:
                out.add(p.id)
        return frozenset(out)

    def out_cols(self, node: OpNode) -> tuple[str, ...]:
        return self.graph.layout_index(node.output)

    def unit(self, node: OpNode, query: str, kind: str = "view") -> SqlUnit:
        cols = self.out_cols(node) + (self.dialect.chunk_col, self.dialect.vec_col)
        return SqlUnit(node.id, query, kind, self.deps(node), node_relation(node), cols)

    # --- dispatch -------------------------------------------------------
    def generate(self, node: OpNode) -> SqlUnit:
        fn = _TEMPLATES.get(node.category)
        if fn is None:
            raise CodegenError(f"no template for category {node.category!r} (node {node.id})")
        return fn(self, node)

    def generate_all(self, nodes: Sequence[OpNode] | None = None) -> list[SqlUnit]:
        from ..graph_ir import topo_sort

        return [self.generate(n) for n in (nodes if nodes is not None else topo_sort(self.graph))]

    def setup_units(self) -> list[SqlUnit]:
        """DDL for persistent tables written by CacheAppend nodes."""
        units = []
        for n in self.graph.nodes:
            if n.op != "CacheAppend":
                continue
            cols = [f"{c} BIGINT" for c in self.out_cols(n)]
            cols += [f"{self.dialect.chunk_col} BIGINT", f"{self.dialect.vec_col} {self.dialect.value_type}"]
            q = f"CREATE TABLE IF NOT EXISTS {node_relation(n)}({', '.join(cols)})"
            units.append(SqlUnit(f"setup_{n.id}", q, "setup", frozenset(), node_relation(n)))
        return units


def _select(items: Sequence[str]) -> str:
    return ",\n  ".join(items)


def _on(conds: Sequence[str]) -> str:
    return " AND ".join(conds) if conds else "TRUE"


# ---------------------------------------------------------------------------
# matmul


def transpose_query(
    cg: Codegen,
    source: str,
    in_cols: Sequence[str],
    in_cs: int,
    stored: bool,
    perm: Sequence[int],
    out_cols: Sequence[str],
    out_cs: int,
) -> str:
    """Relation of a permuted tensor by exploding chunks into single values.

    ``perm[j]`` is the input axis feeding output axis ``j``; the last output
    axis is re-chunked with ``out_cs``.
    """
    d = cg.dialect
    rank = len(in_cols) + 1
    axes = [f"a{i}" for i in range(rank)]
    if d.is_array:
        inner = ", ".join(f"{c} AS {a}" for c, a in zip(in_cols, axes))
        inner = inner + ", " if inner else ""
        val = "val::DOUBLE" if stored else "val"
        explode = (
            f"SELECT {inner}{d.chunk_col} * {in_cs} + sub_ix - 1 AS {axes[-1]}, {val} AS val FROM ("
            f"SELECT *, unnest({d.vec_col}) AS val, generate_subscripts({d.vec_col}, 1) AS sub_ix "
            f"FROM {source})"
        )
    else:
        inner = ", ".join(f"{c} AS {a}" for c, a in zip(in_cols, axes))
        inner = inner + ", " if inner else ""
        val = f"CAST({d.vec_col} AS DOUBLE)" if stored else d.vec_col
        explode = f"SELECT {inner}{d.chunk_col} AS {axes[-1]}, {val} AS val FROM {source}"
    keys = [f"{axes[perm[j]]} AS {c}" for j, c in enumerate(out_cols)]
    last = axes[perm[-1]]
    if out_cs == 1:
        items = keys + [f"{last} AS {d.chunk_col}", f"{d.pack('val')} AS {d.vec_col}"]
        return f"SELECT\n  {_select(items)}\nFROM ({explode}) u"
    group = [axes[perm[j]] for j in range(len(out_cols))] + [f"{last} // {out_cs}"]
    items = keys + [f"{last} // {out_cs} AS {d.chunk_col}", f"list(val ORDER BY {last}) AS {d.vec_col}"]
    return f"SELECT\n  {_select(items)}\nFROM ({explode}) u\nGROUP BY {', '.join(group)}"


def gen_matmul(cg: Codegen, node: OpNode) -> SqlUnit:
    g, d = cg.graph, cg.dialect
    spec = g.matmul_spec(node)
    a_rel = cg.relation(spec.a.name)
    b_name = spec.b.name
    b_vec = cg.vec(b_name, "B")
    if not spec.transpose_b and not spec.b.is_static:
        # runtime right operand: transpose (…, r, n) -> (…, n as row_id, r)
        in_cols = g.layout_index(b_name)
        perm = list(range(spec.b.rank - 2)) + [spec.b.rank - 1, spec.b.rank - 2]
        out_cols = tuple(spec.b.dims[:-2]) + ("row_id",)
        b_src = "(" + transpose_query(
            cg, cg.relation(b_name), in_cols, spec.b.chunk_size, cg.stored(b_name),
            perm, out_cols, spec.a.chunk_size,
        ) + ")"
        b_vec = f"B.{d.vec_col}"
    else:
        b_src = cg.relation(b_name)
    a_vec = cg.vec(spec.a.name, "A")
    conds = [f"A.{d.chunk_col} = B.{d.chunk_col}"]
    for a_dim, b_dim, ratio in spec.pairs:
        conds.append(f"B.{b_dim} = A.{a_dim}" + (f" // {ratio}" if ratio > 1 else ""))
    if spec.causal:
        conds.append(f"B.{spec.causal[1]} <= A.{spec.causal[0]}")
    joins = f"{a_rel} A\nJOIN {b_src} B ON {_on(conds)}"
    if spec.route is not None:
        r_cols = g.layout_index(spec.route.name)
        rc = [f"R.{rcol} = A.{acol}" for rcol, acol in zip(r_cols, spec.a_idx)]
        rc.append(f"B.{spec.route_dim} = R.{d.chunk_col}")
        joins += f"\nJOIN {cg.relation(spec.route.name)} R ON {_on(rc)}"
    sources = []
    for op, col in spec.out_index_sources:
        sources.append(f"R.{d.chunk_col}" if op == "R" else f"{op}.{col}")
    out_cols = cg.out_cols(node)
    n_expr = f"B.{spec.b_n_column}"
    prod = d.dot(a_vec, b_vec)
    out_cs = g.decl(node.output).chunk_size
    group = ", ".join(sources + [n_expr])
    if out_cs == 1:
        items = [f"{s} AS {c}" for s, c in zip(sources, out_cols)]
        items += [f"{n_expr} AS {d.chunk_col}", f"{d.pack(f'SUM({prod})')} AS {d.vec_col}"]
        q = f"SELECT\n  {_select(items)}\nFROM {joins}\nGROUP BY {group}"
        return cg.unit(node, q)
    inner_items = [f"{s} AS {c}" for s, c in zip(sources, out_cols)]
    inner_items += [f"{n_expr} AS n", f"SUM({prod}) AS val"]
    inner = f"SELECT\n  {_select(inner_items)}\nFROM {joins}\nGROUP BY {group}"
    keys = list(out_cols)
    items = keys + [f"n // {out_cs} AS {d.chunk_col}", f"list(val ORDER BY n) AS {d.vec_col}"]
    q = (
        f"SELECT\n  {_select(items)}\nFROM (\n{inner}\n) p\n"
        f"GROUP BY {', '.join(keys + [f'n // {out_cs}'])}"
    )
    return cg.unit(node, q)


# ---------------------------------------------------------------------------
# element-wise


def _element_fn(node: OpNode) -> Callable[[str], str] | None:
    name = FN_OF_OP[node.op]
    if name == "identity":
        return None
    if name == "scale":
        alpha = float_lit(node.attr["alpha"])
        return lambda x: f"{x} * {alpha}"
    return ELEMENT_SQL[name]


def gen_elementwise_fn(cg: Codegen, node: OpNode) -> SqlUnit:
    d = cg.dialect
    src = node.inputs[0]
    in_cols = cg.graph.layout_index(src)
    fn = _element_fn(node)
    v = cg.vec(src, "A")
    expr = v if fn is None else d.vmap(v, fn)
    items = [f"A.{i} AS {o}" for i, o in zip(in_cols, cg.out_cols(node))]
    items += [f"A.{d.chunk_col} AS {d.chunk_col}", f"{expr} AS {d.vec_col}"]
    return cg.unit(node, f"SELECT\n  {_select(items)}\nFROM {cg.relation(src)} A")


def gen_elementwise_arith(cg: Codegen, node: OpNode) -> SqlUnit:
    g, d = cg.graph, cg.dialect
    a_name, b_name = node.inputs
    a, b = g.decl(a_name), g.decl(b_name)
    if b_name in g.transposed_weights:
        raise CodegenError(
            f"{b_name!r} is stored transposed for a MatMul and cannot feed {node.op} {node.id}"
        )
    a_cols, b_cols = g.layout_index(a_name), g.layout_index(b_name)
    off = a.rank - b.rank
    conds = []
    for i, bc in enumerate(b_cols):
        if b.shape[i] == 1 and a.shape[off + i] != 1:
            continue
        conds.append(f"A.{a_cols[off + i]} = B.{bc}")
    op = ARITH_OPS[node.op]
    av, bv = cg.vec(a_name, "A"), cg.vec(b_name, "B")
    if b.width == a.width:
        if b.chunk_size != a.chunk_size:
            raise CodegenError(f"{node.id}: operands are chunked differently")
        conds.append(f"A.{d.chunk_col} = B.{d.chunk_col}")
        expr = d.vzip(av, bv, op)
    elif b.width == 1:
        expr = d.vscalar(av, d.first(bv), op)
    else:
        raise CodegenError(f"{node.id}: cannot broadcast width {b.width} onto {a.width}")
    items = [f"A.{i} AS {o}" for i, o in zip(a_cols, cg.out_cols(node))]
    items += [f"A.{d.chunk_col} AS {d.chunk_col}", f"{expr} AS {d.vec_col}"]
    q = f"SELECT\n  {_select(items)}\nFROM {cg.relation(a_name)} A\nJOIN {cg.relation(b_name)} B ON {_on(conds)}"
    return cg.unit(node, q)


# ---------------------------------------------------------------------------
# reshape


def _strides(shape: Sequence[int]) -> list[int]:
    out, acc = [], 1
    for s in reversed(shape):
        out.append(acc)
        acc *= s
    return out[::-1]


def gen_reshape(cg: Codegen, node: OpNode) -> SqlUnit:
    g, d = cg.graph, cg.dialect
    src = node.inputs[0]
    a = g.decl(src)
    out = g.decl(node.output)
    if a.chunk_size != out.chunk_size:
        raise CodegenError(f"{node.id}: reshape cannot change the chunk size")
    cs = a.chunk_size
    ra = reshape_attr(node.attr)
    pre = list(ra.shape)
    if pre[0] == -1:
        pre[0] = 0  # unbounded leading axis: never reduced modulo
    in_cols = g.layout_index(src)
    terms = [f"A.{c} * {s}" if s != 1 else f"A.{c}" for c, s in zip(in_cols, _strides(a.shape)[:-1])]
    terms.append(f"A.{d.chunk_col} * {cs}" if cs != 1 else f"A.{d.chunk_col}")
    flat = "(" + " + ".join(terms) + ")"
    ostr = _strides(pre)
    exprs = []
    for j in range(len(pre) - 1):
        e = f"{flat} // {ostr[j]}" if ostr[j] != 1 else flat
        exprs.append(f"({e})" if j == 0 else f"(({e}) % {pre[j]})")
    if len(pre) == 1:
        chunk = f"({flat} // {cs})"
    else:
        chunk = f"(({flat} % {pre[-1]}) // {cs})"
    out_cols = cg.out_cols(node)
    items = [f"{exprs[ra.perm[j]]} AS {c}" for j, c in enumerate(out_cols)]
    items += [f"{chunk} AS {d.chunk_col}", f"{cg.vec(src, 'A')} AS {d.vec_col}"]
    return cg.unit(node, f"SELECT\n  {_select(items)}\nFROM {cg.relation(src)} A")


# ---------------------------------------------------------------------------
# normalization


def gen_normalization(cg: Codegen, node: OpNode) -> SqlUnit:
    g, d = cg.graph, cg.dialect
    src = node.inputs[0]
    a = g.decl(src)
    na = normalization_attr(node.op, node.attr)
    rel = cg.relation(src)
    idx = g.layout_index(src)
    out_cols = cg.out_cols(node)
    v = cg.vec(src, "A")
    keys = [f"A.{c}" for c in idx]
    group = f"\nGROUP BY {', '.join(keys)}" if keys else ""
    key_items = [f"A.{c} AS {c}" for c in idx]
    on = _on([f"S.{c} = A.{c}" for c in idx])
    renamed = [f"A.{i} AS {o}" for i, o in zip(idx, out_cols)]

    if na.agg == "TOPK":
        part = f"PARTITION BY {', '.join(keys)} " if keys else ""
        inner = (
            f"SELECT A.*, row_number() OVER ({part}ORDER BY {d.first(v)} DESC, A.{d.chunk_col}) AS rk "
            f"FROM {rel} A"
        )
        items = renamed + [f"A.{d.chunk_col} AS {d.chunk_col}", f"{v} AS {d.vec_col}"]
        return cg.unit(node, f"SELECT\n  {_select(items)}\nFROM ({inner}) A\nWHERE A.rk <= {na.k}")

    fmap = {"identity": None, "exp": ELEMENT_SQL["exp"], "square": ELEMENT_SQL["square"]}[na.f]
    if na.stable:
        m_sql = f"SELECT\n  {_select(key_items + [f'MAX({d.vmax(v)}) AS m'])}\nFROM {rel} A{group}"
        shifted = d.vmap(v, lambda x: f"exp({x} - M.m)")
        m_on = _on([f"M.{c} = A.{c}" for c in idx])
        s_keys = key_items + ["M.m AS m", f"SUM({d.vsum(shifted)}) AS s"]
        s_group = f"\nGROUP BY {', '.join(keys + ['M.m'])}"
        s_sql = f"SELECT\n  {_select(s_keys)}\nFROM {rel} A\nJOIN m_{node.id} M ON {m_on}{s_group}"
        expr = d.vmap(v, lambda x: f"exp({x} - S.m) / S.s")
        items = renamed + [f"A.{d.chunk_col} AS {d.chunk_col}", f"{expr} AS {d.vec_col}"]
        q = (
            f"WITH m_{node.id} AS (\n{m_sql}\n), s_{node.id} AS (\n{s_sql}\n)\n"
            f"SELECT\n  {_select(items)}\nFROM {rel} A\nJOIN s_{node.id} S ON {on}"
        )
        return cg.unit(node, q)

    mapped = v if fmap is None else d.vmap(v, fmap)
    if na.agg == "MAX":
        agg = f"MAX({d.vmax(mapped)})"
    else:
        agg = f"SUM({d.vsum(mapped)})"
        if na.agg == "MEAN":
            agg = f"{agg} / {a.width}.0"
    if na.reduces:
        items = [f"A.{i} AS {o}" for i, o in zip(idx, out_cols)]
        items += [f"0 AS {d.chunk_col}", f"{d.pack(agg)} AS {d.vec_col}"]
        return cg.unit(node, f"SELECT\n  {_select(items)}\nFROM {rel} A{group}")
    s_sql = f"SELECT\n  {_select(key_items + [f'{agg} AS s'])}\nFROM {rel} A{group}"
    if na.g == "div":
        post = (lambda x: f"{fmap(x)} / S.s") if fmap else (lambda x: f"{x} / S.s")
    else:  # div_sqrt_eps
        eps = float_lit(na.epsilon)
        post = lambda x: f"{x} / sqrt(S.s + {eps})"  # noqa: E731
    expr = d.vmap(v, post)
    items = renamed + [f"A.{d.chunk_col} AS {d.chunk_col}", f"{expr} AS {d.vec_col}"]
    q = (
        f"WITH s_{node.id} AS (\n{s_sql}\n)\n"
        f"SELECT\n  {_select(items)}\nFROM {rel} A\nJOIN s_{node.id} S ON {on}"
    )
    return cg.unit(node, q)


# ---------------------------------------------------------------------------
# lookup


def gen_lookup(cg: Codegen, node: OpNode) -> SqlUnit:
    g, d = cg.graph, cg.dialect
    out_cols = cg.out_cols(node)
    if node.op == "Gather":
        table, _ids = node.inputs
        key = "I.pos" if node.attr.get("key", "token") == "pos" else "I.token"
        row = g.layout_index(table)[0]
        items = [f"I.pos AS {out_cols[0]}", f"E.{d.chunk_col} AS {d.chunk_col}", f"{cg.vec(table, 'E')} AS {d.vec_col}"]
        q = (
            f"SELECT\n  {_select(items)}\nFROM {TOKEN_TABLE} I\n"
            f"JOIN {cg.relation(table)} E ON E.{row} = {key}\n"
            f"WHERE I.pos >= {START_FILTER}"
        )
        return cg.unit(node, q)
    # Im2Col
    src = node.inputs[0]
    img = g.decl(src)
    h, w, c = img.shape
    cs = img.chunk_size
    if g.decl(node.output).chunk_size != cs:
        raise CodegenError(f"{node.id}: Im2Col keeps the image chunk size")
    kh, kw = int(node.attr["kh"]), int(node.attr["kw"])
    stride, pad = int(node.attr.get("stride", 1)), int(node.attr.get("pad", 0))
    oh, ow = conv_out_hw(h, w, node.attr)
    nc = c // cs
    hcol, wcol = g.layout_index(src)
    grid = (
        f"SELECT oh, ow, ki, kj, cc FROM range({oh}) r0(oh), range({ow}) r1(ow), "
        f"range({kh}) r2(ki), range({kw}) r3(kj), range({nc}) r4(cc)"
    )
    conds = [
        f"X.{hcol} = p.oh * {stride} + p.ki - {pad}",
        f"X.{wcol} = p.ow * {stride} + p.kj - {pad}",
        f"X.{d.chunk_col} = p.cc",
    ]
    items = [
        f"p.oh * {ow} + p.ow AS {out_cols[0]}",
        f"(p.ki * {kw} + p.kj) * {nc} + p.cc AS {d.chunk_col}",
        f"COALESCE({cg.vec(src, 'X')}, {d.zeros(cs)}) AS {d.vec_col}",
    ]
    q = f"SELECT\n  {_select(items)}\nFROM ({grid}) p\nLEFT JOIN {cg.relation(src)} X ON {_on(conds)}"
    return cg.unit(node, q)


# ---------------------------------------------------------------------------
# slice / concat / cache append


def _misaligned(node: OpNode, what: str) -> CodegenError:
    return CodegenError(
        f"{node.id}: {what} is not aligned to the chunk size; "
        "compile with the scalar dialect for element-granular slicing"
    )


def gen_slice(cg: Codegen, node: OpNode) -> SqlUnit:
    g, d = cg.graph, cg.dialect
    src = node.inputs[0]
    a = g.decl(src)
    cs = a.chunk_size
    in_cols = list(g.layout_index(src))
    exprs = {i: f"A.{c}" for i, c in enumerate(in_cols)}
    chunk = f"A.{d.chunk_col}"
    where = []
    for ax, s, e in zip(node.attr["axes"], node.attr["starts"], node.attr["stops"]):
        ax %= a.rank
        if ax == a.rank - 1:
            if s % cs or e % cs:
                raise _misaligned(node, f"slice [{s}, {e})")
            where.append(f"A.{d.chunk_col} >= {s // cs} AND A.{d.chunk_col} < {e // cs}")
            if s:
                chunk = f"A.{d.chunk_col} - {s // cs}"
        else:
            col = in_cols[ax]
            where.append(f"A.{col} >= {s} AND A.{col} < {e}")
            if s:
                exprs[ax] = f"A.{col} - {s}"
    squeeze = {x % a.rank for x in node.attr.get("squeeze", ())}
    if a.rank - 1 in squeeze:
        raise CodegenError(f"{node.id}: cannot squeeze the chunked axis")
    kept = [exprs[i] for i in range(a.rank - 1) if i not in squeeze]
    items = [f"{e} AS {c}" for e, c in zip(kept, cg.out_cols(node))]
    items += [f"{chunk} AS {d.chunk_col}", f"{cg.vec(src, 'A')} AS {d.vec_col}"]
    q = f"SELECT\n  {_select(items)}\nFROM {cg.relation(src)} A"
    if where:
        q += f"\nWHERE {' AND '.join(where)}"
    return cg.unit(node, q)


def gen_concat(cg: Codegen, node: OpNode) -> SqlUnit:
    g, d = cg.graph, cg.dialect
    if node.op == "CacheAppend":
        src = node.inputs[0]
        in_cols = g.layout_index(src)
        perm = list(node.attr["perm"])
        items = [f"A.{in_cols[perm[j]]}" for j in range(len(in_cols))]
        items += [f"A.{d.chunk_col}", cg.vec(src, "A")]
        q = f"SELECT\n  {_select(items)}\nFROM {cg.relation(src)} A"
        return cg.unit(node, q, kind="insert")
    first = g.decl(node.inputs[0])
    axis = int(node.attr.get("axis", -1)) % first.rank
    cs = first.chunk_size
    out_cols = cg.out_cols(node)
    parts, offset = [], 0
    for t in node.inputs:
        decl = g.decl(t)
        cols = g.layout_index(t)
        if decl.chunk_size != cs:
            raise CodegenError(f"{node.id}: concatenated inputs must share a chunk size")
        items = []
        for i, (c, o) in enumerate(zip(cols, out_cols)):
            items.append(f"A.{c} + {offset} AS {o}" if i == axis and offset else f"A.{c} AS {o}")
        chunk = f"A.{d.chunk_col}"
        if axis == first.rank - 1:
            if offset % cs or decl.width % cs:
                raise _misaligned(node, f"concat offset {offset}")
            if offset:
                chunk = f"A.{d.chunk_col} + {offset // cs}"
        items += [f"{chunk} AS {d.chunk_col}", f"{cg.vec(t, 'A')} AS {d.vec_col}"]
        parts.append(f"SELECT\n  {_select(items)}\nFROM {cg.relation(t)} A")
        offset += decl.shape[axis]
    return cg.unit(node, "\nUNION ALL\n".join(parts))


def gen_slice_concat(cg: Codegen, node: OpNode) -> SqlUnit:
    return gen_slice(cg, node) if node.category == "slice" else gen_concat(cg, node)


# ---------------------------------------------------------------------------
# transpose


def gen_transpose_fallback(cg: Codegen, node: OpNode) -> SqlUnit:
    g = cg.graph
    src = node.inputs[0]
    a = g.decl(src)
    perm = [int(p) for p in node.attr["perm"]]
    q = transpose_query(
        cg, cg.relation(src), g.layout_index(src), a.chunk_size, cg.stored(src),
        perm, cg.out_cols(node), g.decl(node.output).chunk_size,
    )
    return cg.unit(node, q)


_TEMPLATES: dict[str, Callable[[Codegen, OpNode], SqlUnit]] = {
    "matmul": gen_matmul,
    "elementwise_fn": gen_elementwise_fn,
    "elementwise_arith": gen_elementwise_arith,
    "reshape": gen_reshape,
    "normalization": gen_normalization,
    "lookup": gen_lookup,
    "slice": gen_slice_concat,
    "concat": gen_slice_concat,
    "transpose_fallback": gen_transpose_fallback,
}


def gen_node(g: Graph, node: OpNode, dialect: str | Dialect = "array") -> SqlUnit:
    return Codegen(g, get_dialect(dialect)).generate(node)
