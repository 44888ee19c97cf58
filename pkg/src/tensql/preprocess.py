"""Weight preprocessing: chunking, transposition, folding, fusion and export.

Weights become relations of ``(index..., chunk_id, vec)`` records.  Right-hand
matmul operands are transposed before chunking so that the contraction axis is
the chunked one.  Two graph rewrites run here as well: constant folding
(evaluating static subgraphs offline and absorbing scalar multipliers into the
adjacent weight) and weight fusion (merging projections of the same input into
one flagged table).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ChunkingError, TensqlError
from .graph_ir import Graph, OpNode, TensorDecl, build_graph, topo_sort
from .oracle import eval_node

DATA_DELIMITER = "|"


@dataclass(frozen=True)
class ChunkRecord:
    row_id: int
    chunk_id: int
    vec: tuple[float, ...]


@dataclass(frozen=True)
class FusedWeightRecord:
    flag: int
    row_id: int
    chunk_id: int
    vec: tuple[float, ...]


@dataclass
class ChunkedRelation:
    """A tensor stored as chunk records.

    ``index`` holds one row of index values per record (columns named by
    ``index_cols``), ``chunk_ids`` the chunk position and ``vecs`` the values.
    ``m`` counts logical rows and ``n`` the logical width of the chunked axis.
    """

    name: str
    index_cols: tuple[str, ...]
    index: np.ndarray
    chunk_ids: np.ndarray
    vecs: np.ndarray
    m: int
    n: int
    chunk_size: int
    transposed: bool = False
    fusion_flag_domain: tuple[str, ...] = ()
    expert_indexed: bool = False
    shape: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not self.shape:
            self.shape = (self.m, self.n)

    @property
    def table(self) -> str:
        return weight_table(self.name)

    def __len__(self) -> int:
        return len(self.chunk_ids)

    @property
    def records(self) -> list[ChunkRecord] | list[FusedWeightRecord]:
        out: list[Any] = []
        fused = bool(self.fusion_flag_domain)
        for idx, c, v in zip(self.index, self.chunk_ids, self.vecs):
            vec = tuple(float(x) for x in v)
            if fused:
                out.append(FusedWeightRecord(int(idx[0]), int(idx[-1]), int(c), vec))
            else:
                out.append(ChunkRecord(int(idx[-1]) if len(idx) else 0, int(c), vec))
        return out

    def iter_rows(self) -> Iterator[tuple[tuple[int, ...], int, np.ndarray]]:
        for idx, c, v in zip(self.index, self.chunk_ids, self.vecs):
            yield tuple(int(i) for i in idx), int(c), v


def weight_table(tensor: str) -> str:
    return f"w_{tensor}"


def input_table(tensor: str) -> str:
    return f"in_{tensor}"


# ---------------------------------------------------------------------------
# chunking


def chunk_tensor(
    array: Any,
    chunk_size: int,
    name: str = "matrix",
    index_cols: Sequence[str] | None = None,
    transposed: bool = False,
    parts: Sequence[tuple[str, int]] = (),
) -> ChunkedRelation:
    """Chunk the last axis of ``array`` (after an optional swap of the last two).

    With ``parts`` the array is a fused (flag, r, n) weight and only the first
    ``width`` rows of the stored (transposed) layout exist per flag.
    """
    arr = np.asarray(array, dtype=np.float32)
    if arr.size == 0:
        raise TensqlError(f"tensor {name!r} is empty")
    if arr.ndim == 1:
        arr = arr[None, :]
        cols = ("row_id",)
    else:
        if transposed:
            arr = np.swapaxes(arr, -1, -2)
        cols = tuple(index_cols) if index_cols is not None else _default_cols(arr.ndim)
    if len(cols) != arr.ndim - 1:
        raise TensqlError(f"tensor {name!r}: {len(cols)} index columns for rank {arr.ndim}")
    width = arr.shape[-1]
    if chunk_size < 1 or width % chunk_size:
        raise ChunkingError(name, width, chunk_size)
    nchunks = width // chunk_size
    lead = arr.shape[:-1]
    grid = np.indices(lead).reshape(len(lead), -1).T.astype(np.int64)
    index = np.repeat(grid, nchunks, axis=0)
    chunk_ids = np.tile(np.arange(nchunks, dtype=np.int64), grid.shape[0])
    vecs = arr.reshape(-1, chunk_size)
    if parts:
        widths = np.array([w for _, w in parts])
        keep = index[:, -1] < widths[index[:, 0]]
        index, chunk_ids, vecs = index[keep], chunk_ids[keep], vecs[keep]
    m = int(np.prod(lead)) if lead else 1
    return ChunkedRelation(
        name=name,
        index_cols=cols,
        index=index,
        chunk_ids=chunk_ids,
        vecs=np.ascontiguousarray(vecs),
        m=m,
        n=width,
        chunk_size=chunk_size,
        transposed=transposed,
        fusion_flag_domain=tuple(f for f, _ in parts),
        shape=tuple(np.asarray(array).shape),
    )


def _default_cols(rank: int) -> tuple[str, ...]:
    if rank == 2:
        return ("row_id",)
    return tuple(f"d{i}" for i in range(rank - 2)) + ("row_id",)


def chunk_matrix(matrix: Any, chunk_size: int, name: str = "matrix") -> ChunkedRelation:
    """Alg.-1 style conversion of a 2-D matrix into (row_id, chunk_id, vec) records."""
    arr = np.asarray(matrix)
    if arr.ndim != 2:
        raise TensqlError(f"chunk_matrix expects a 2-D matrix, got shape {arr.shape}")
    return chunk_tensor(arr, chunk_size, name)


def dechunk(rel: ChunkedRelation) -> np.ndarray:
    """Rebuild the stored array (in stored, possibly transposed, orientation)."""
    lead = tuple(int(x) for x in (rel.index.max(axis=0) + 1)) if len(rel) else ()
    if rel.shape and len(rel.shape) >= 2:
        stored = list(rel.shape)
        if rel.transposed:
            stored[-1], stored[-2] = stored[-2], stored[-1]
        lead = tuple(stored[:-1])
    elif rel.index_cols == ("row_id",):
        lead = (1,)
    out = np.zeros(lead + (rel.n,), dtype=np.float32)
    cs = rel.chunk_size
    for idx, c, v in rel.iter_rows():
        out[idx + (slice(c * cs, (c + 1) * cs),)] = v
    return out


def dechunk_logical(rel: ChunkedRelation) -> np.ndarray:
    """Rebuild the original (logical) array, undoing transposition and padding."""
    arr = dechunk(rel)
    if rel.transposed:
        arr = np.swapaxes(arr, -1, -2)
    if len(rel.shape) == 1:
        arr = arr[0]
    return arr


def transpose_rhs(g: Graph, weights: Mapping[str, Any]) -> dict[str, np.ndarray]:
    """Stored arrays: right-hand static matmul operands transposed, others as is."""
    out = {}
    for name, value in weights.items():
        arr = np.asarray(value, dtype=np.float32)
        if name in g.transposed_weights:
            arr = np.ascontiguousarray(np.swapaxes(arr, -1, -2))
        out[name] = arr
    return out


def relation_for(g: Graph, name: str, value: Any) -> ChunkedRelation:
    decl = g.tensors[name]
    transposed = name in g.transposed_weights
    cols = g.layout_index(name) if decl.rank > 1 else ("row_id",)
    return chunk_tensor(
        value, decl.chunk_size, name, cols, transposed=transposed, parts=decl.parts
    )


def relations_for_graph(g: Graph, weights: Mapping[str, Any]) -> list[ChunkedRelation]:
    """One relation per static tensor of ``g`` (sorted by name)."""
    rels = []
    for name in sorted(g.tensors):
        if g.tensors[name].is_static:
            if name not in weights:
                raise TensqlError(f"no weight values for {name!r}")
            rels.append(relation_for(g, name, weights[name]))
    return rels


# ---------------------------------------------------------------------------
# constant folding


def fold_constants(g: Graph, weights: Mapping[str, Any]) -> tuple[Graph, dict[str, np.ndarray]]:
    """Evaluate static subgraphs offline and absorb scalar multipliers into weights.

    Returns the rewritten graph and the weight map restricted to the static
    tensors the new graph still uses (new constants included, stored as
    float32 after 64-bit evaluation).
    """
    vals: dict[str, np.ndarray] = {
        k: np.asarray(v, dtype=np.float64) for k, v in weights.items() if k in g.tensors
    }
    static = {n for n, t in g.tensors.items() if t.is_static}
    folded: list[OpNode] = []
    for node in topo_sort(g):
        if all(t in static for t in node.inputs) and node.output not in g.persistent:
            vals[node.output] = eval_node(node, g, vals)
            static.add(node.output)
            folded.append(node)
    folded_ids = {n.id for n in folded}
    tensors = dict(g.tensors)
    new_weights: dict[str, np.ndarray] = {
        k: np.asarray(v, dtype=np.float32) for k, v in weights.items() if k in g.tensors
    }
    for node in folded:
        t = g.tensors[node.output]
        tensors[node.output] = TensorDecl(t.name, t.shape, "constant", t.chunk_size, t.dims, t.parts)
        new_weights[node.output] = vals[node.output].astype(np.float32)
    nodes = [n for n in g.nodes if n.id not in folded_ids]

    nodes, tensors, new_weights = _absorb_scales(g, nodes, tensors, new_weights)
    return _prune(g, nodes, tensors, new_weights)


def _absorb_scales(
    g: Graph,
    nodes: list[OpNode],
    tensors: dict[str, TensorDecl],
    weights: dict[str, np.ndarray],
) -> tuple[list[OpNode], dict[str, TensorDecl], dict[str, np.ndarray]]:
    producer = {n.output: n for n in nodes}
    uses: dict[str, int] = {}
    for n in nodes:
        for t in n.inputs:
            uses[t] = uses.get(t, 0) + 1
    replace: dict[str, OpNode] = {}
    drop: set[str] = set()
    for s in nodes:
        if s.op != "Scale":
            continue
        mm = producer.get(s.inputs[0])
        if mm is None or mm.op != "MatMul" or len(mm.inputs) != 2 or mm.id in replace:
            continue
        b = tensors[mm.inputs[1]]
        if not b.is_static or uses.get(mm.output, 0) != 1:
            continue
        if mm.output in g.outputs or mm.output in g.persistent:
            continue
        alpha = float(s.attr["alpha"])
        name = _fresh(f"{b.name}_scaled", tensors)
        tensors[name] = TensorDecl(name, b.shape, "constant", b.chunk_size, b.dims, b.parts)
        weights[name] = (np.asarray(weights[b.name], dtype=np.float64) * alpha).astype(np.float32)
        replace[mm.id] = OpNode(
            id=mm.id,
            op=mm.op,
            category=mm.category,
            inputs=(mm.inputs[0], name),
            output=s.output,
            free_dims=mm.free_dims,
            shared_dims=mm.shared_dims,
            group_dims=mm.group_dims,
            attr=mm.attr,
        )
        drop.add(s.id)
    out = [replace.get(n.id, n) for n in nodes if n.id not in drop]
    return out, tensors, weights


def _fresh(base: str, taken: Mapping[str, Any]) -> str:
    name, k = base, 1
    while name in taken:
        name = f"{base}{k}"
        k += 1
    return name


def _prune(
    g: Graph,
    nodes: list[OpNode],
    tensors: dict[str, TensorDecl],
    weights: dict[str, np.ndarray],
) -> tuple[Graph, dict[str, np.ndarray]]:
    used = set(g.outputs) | set(g.persistent)
    for n in nodes:
        used.update(n.inputs)
        used.add(n.output)
    keep = {k: v for k, v in tensors.items() if k in used}
    new = g.replace(tensors=keep, nodes=tuple(nodes))
    return new, {k: v for k, v in weights.items() if k in keep and keep[k].is_static}


# ---------------------------------------------------------------------------
# weight fusion


@dataclass
class FusionGroup:
    node_id: str
    weight: str
    members: tuple[str, ...]
    widths: tuple[int, ...]


def _fusable(node: OpNode, g: Graph) -> bool:
    if node.op != "MatMul" or len(node.inputs) != 2:
        return False
    if any(node.attr.get(k) for k in ("transpose_b", "batch", "causal")):
        return False
    b = g.tensors[node.inputs[1]]
    return b.is_static and b.rank == 2 and not b.parts


def fuse_weights(
    g: Graph, weights: Mapping[str, Any]
) -> tuple[Graph, dict[str, np.ndarray], list[FusionGroup]]:
    """Merge plain projections of one input into a single flagged matmul.

    Candidates share the left operand, contraction size, chunk sizes and output
    schema.  The fused node's output gains a leading ``flag`` axis; every
    original node becomes a Slice of it, so downstream nodes are untouched.
    """
    groups: dict[tuple, list[OpNode]] = {}
    for n in topo_sort(g):
        if not _fusable(n, g):
            continue
        out = g.tensors[n.output]
        b = g.tensors[n.inputs[1]]
        key = (n.inputs[0], b.shape[0], b.chunk_size, out.dims, out.chunk_size, out.shape[:-1])
        groups.setdefault(key, []).append(n)

    tensors = dict(g.tensors)
    new_weights = {k: np.asarray(v, dtype=np.float32) for k, v in weights.items()}
    replaced: dict[str, list[dict[str, Any]]] = {}
    fusion: list[FusionGroup] = []
    counters: dict[str, int] = {}
    for key, members in groups.items():
        if len(members) < 2:
            continue
        ids = [m.id for m in members]
        prefix = os.path.commonprefix(ids)
        k = counters.get(prefix, 0)
        counters[prefix] = k + 1
        fid = _fresh(f"{prefix}fused{k}", tensors)
        wname = _fresh(f"{fid}_w", tensors)
        a = members[0].inputs[0]
        outs = [g.tensors[m.output] for m in members]
        widths = tuple(o.width for o in outs)
        nmax = max(widths)
        r = key[1]
        fw = np.zeros((len(members), r, nmax), dtype=np.float32)
        for i, m in enumerate(members):
            fw[i, :, : widths[i]] = np.asarray(weights[m.inputs[1]], dtype=np.float32)
        tensors[wname] = TensorDecl(
            wname,
            (len(members), r, nmax),
            "weight",
            key[2],
            ("flag", "row_id", "col"),
            tuple((mid, w) for mid, w in zip(ids, widths)),
        )
        new_weights[wname] = fw
        o0 = outs[0]
        tensors[fid] = TensorDecl(
            fid, (len(members),) + o0.shape[:-1] + (nmax,), "intermediate", o0.chunk_size,
            ("flag",) + o0.dims,
        )
        first = {"id": fid, "op": "MatMul", "inputs": [a, wname], "output": fid}
        slices = []
        for i, m in enumerate(members):
            rank = len(o0.shape) + 1
            slices.append(
                {
                    "id": m.id,
                    "op": "Slice",
                    "inputs": [fid],
                    "output": m.output,
                    "attr": {
                        "axes": [0, rank - 1],
                        "starts": [i, 0],
                        "stops": [i + 1, widths[i]],
                        "squeeze": [0],
                    },
                }
            )
        replaced[members[0].id] = [first] + slices[:1]
        for m, sl in zip(members[1:], slices[1:]):
            replaced[m.id] = [sl]
        fusion.append(FusionGroup(fid, wname, tuple(ids), widths))

    raw_nodes: list[dict[str, Any]] = []
    for n in g.nodes:
        if n.id in replaced:
            raw_nodes.extend(replaced[n.id])
        else:
            raw_nodes.append(n.to_json())
    used = set(g.outputs) | set(g.persistent)
    for rn in raw_nodes:
        used.update(rn["inputs"])
        used.add(rn["output"])
    keep = [t for name, t in tensors.items() if name in used]
    new = build_graph(keep, raw_nodes, g.outputs, g.persistent, g.name)
    return new, {k: v for k, v in new_weights.items() if k in new.tensors and new.tensors[k].is_static}, fusion


# ---------------------------------------------------------------------------
# expert index and export


def build_expert_index(rel: ChunkedRelation) -> list[str]:
    """Index DDL on ``expert_id`` for expert-stacked relations; empty otherwise."""
    if "expert_id" not in rel.index_cols:
        return []
    rel.expert_indexed = True
    return [f"CREATE INDEX idx_{rel.table}_expert ON {rel.table}(expert_id);"]


def relation_ddl(rel: ChunkedRelation, dialect: str = "array") -> str:
    cols = [f"{c} BIGINT" for c in rel.index_cols]
    if dialect == "array":
        cols += ["chunk_id BIGINT", "vec FLOAT[]"]
    elif dialect == "scalar":
        cols += ["col_id BIGINT", "value FLOAT"]
    else:
        raise TensqlError(f"unknown dialect {dialect!r}")
    return f"CREATE TABLE {rel.table}({', '.join(cols)});"


def _fmt(values: np.ndarray) -> list[str]:
    return [str(v) for v in values.astype(np.float32)]


def relation_lines(rel: ChunkedRelation, dialect: str = "array") -> Iterator[str]:
    """Data-file lines: index values, chunk (or column) id, vec (or value)."""
    d = DATA_DELIMITER
    cs = rel.chunk_size
    for idx, c, v in rel.iter_rows():
        head = d.join(str(i) for i in idx)
        head = head + d if head else ""
        if dialect == "array":
            yield f"{head}{c}{d}[{','.join(_fmt(v))}]"
        else:
            for e, x in enumerate(_fmt(v)):
                yield f"{head}{c * cs + e}{d}{x}"


def record_count(rel: ChunkedRelation, dialect: str = "array") -> int:
    return len(rel) if dialect == "array" else len(rel) * rel.chunk_size


@dataclass
class ExportResult:
    ddl: str
    files: dict[str, str]
    manifest: dict[str, Any] = field(default_factory=dict)


def export_weights(
    rels: Iterable[ChunkedRelation],
    dialect: str = "array",
    out_dir: str | None = None,
) -> ExportResult:
    """Write ``schema.sql``, one ``w_<tensor>.tbl`` per relation and ``weights.json``.

    Without ``out_dir`` nothing is written and ``files`` maps each table to
    its would-be file name.
    """
    rels = list(rels)
    ddl_lines: list[str] = []
    files: dict[str, str] = {}
    manifest: dict[str, Any] = {"dialect": dialect, "delimiter": DATA_DELIMITER, "tensors": {}}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    for rel in rels:
        ddl_lines.append(relation_ddl(rel, dialect))
        ddl_lines.extend(build_expert_index(rel))
        fname = f"{rel.table}.tbl"
        path = os.path.join(out_dir, fname) if out_dir is not None else fname
        files[rel.table] = path
        if out_dir is not None:
            try:
                with open(path, "w", encoding="utf-8") as fh:
                    for line in relation_lines(rel, dialect):
                        fh.write(line)
                        fh.write("\n")
            except OSError as exc:
                raise TensqlError(f"cannot write {path}: {exc}") from exc
        manifest["tensors"][rel.name] = {
            "file": fname,
            "table": rel.table,
            "m": rel.m,
            "n": rel.n,
            "chunk_size": rel.chunk_size if dialect == "array" else 1,
            "transposed": rel.transposed,
            "flags": {str(i): f for i, f in enumerate(rel.fusion_flag_domain)},
            "index_cols": list(rel.index_cols),
            "records": record_count(rel, dialect),
            "shape": list(rel.shape),
            "stored_chunk_size": rel.chunk_size,
            "expert_indexed": rel.expert_indexed,
        }
    ddl = "\n".join(ddl_lines) + "\n"
    if out_dir is not None:
        try:
            with open(os.path.join(out_dir, "schema.sql"), "w", encoding="utf-8") as fh:
                fh.write(ddl)
            with open(os.path.join(out_dir, "weights.json"), "w", encoding="utf-8") as fh:
                json.dump(manifest, fh, indent=1, sort_keys=True)
        except OSError as exc:
            raise TensqlError(f"cannot write into {out_dir}: {exc}") from exc
    return ExportResult(ddl, files, manifest)


def read_relation_file(path: str, index_cols: Sequence[str], n: int, chunk_size: int,
                       dialect: str = "array", name: str = "matrix",
                       transposed: bool = False, shape: Sequence[int] = ()) -> ChunkedRelation:
    """Parse a data file written by :func:`export_weights` back into a relation."""
    k = len(index_cols)
    index, chunks, vecs = [], [], []
    scalar: dict[tuple[tuple[int, ...], int], np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split(DATA_DELIMITER)
            idx = tuple(int(x) for x in parts[:k])
            pos = int(parts[k])
            if dialect == "array":
                body = parts[k + 1].strip()[1:-1]
                vec = np.array([np.float32(x) for x in body.split(",")], dtype=np.float32)
                index.append(idx)
                chunks.append(pos)
                vecs.append(vec)
            else:
                key = (idx, pos // chunk_size)
                buf = scalar.setdefault(key, np.zeros(chunk_size, dtype=np.float32))
                buf[pos % chunk_size] = np.float32(parts[k + 1])
    if dialect != "array":
        for (idx, c), v in sorted(scalar.items()):
            index.append(idx)
            chunks.append(c)
            vecs.append(v)
    m = len(index) * chunk_size // n if n else 0
    return ChunkedRelation(
        name=name,
        index_cols=tuple(index_cols),
        index=np.array(index, dtype=np.int64).reshape(len(index), k),
        chunk_ids=np.array(chunks, dtype=np.int64),
        vecs=np.array(vecs, dtype=np.float32).reshape(len(vecs), chunk_size),
        m=m,
        n=n,
        chunk_size=chunk_size,
        transposed=transposed,
        shape=tuple(shape),
    )


# ---------------------------------------------------------------------------
# whole-model preparation


@dataclass
class PreparedModel:
    """Folded graph, its fused variant, and every weight either one needs."""

    graph: Graph
    fused: Graph
    weights: dict[str, np.ndarray]
    fusion: list[FusionGroup]

    def graph_for(self, fusion: bool) -> Graph:
        return self.fused if fusion else self.graph

    def relations(self) -> list[ChunkedRelation]:
        rels: dict[str, ChunkedRelation] = {}
        for g in (self.graph, self.fused):
            for name in sorted(g.tensors):
                if g.tensors[name].is_static and name not in rels:
                    rels[name] = relation_for(g, name, self.weights[name])
        return [rels[k] for k in sorted(rels)]


def prepare(g: Graph, weights: Mapping[str, Any]) -> PreparedModel:
    folded, w = fold_constants(g, weights)
    fused, fw, groups = fuse_weights(folded, w)
    merged = dict(w)
    merged.update(fw)
    return PreparedModel(folded, fused, merged, groups)


def scalar_graph(g: Graph) -> Graph:
    """The same graph with every chunk size forced to 1 (scalar dialect)."""
    tensors = {
        k: TensorDecl(t.name, t.shape, t.kind, 1, t.dims, t.parts) for k, t in g.tensors.items()
    }
    return g.replace(tensors=tensors)
