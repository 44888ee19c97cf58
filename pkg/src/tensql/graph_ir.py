"""Computation-graph IR: tensor declarations, operator nodes and the graph.

A graph document is JSON (see ``schema/graph_ir.schema.json``).  Parsing
validates it against the schema, categorizes every node into one of the nine
operator categories, derives the free/shared/group dimension parameters that
drive SQL generation, and checks the structural invariants (unique names,
single producer per tensor, acyclicity, chunk divisibility, shape agreement).

Conventions
-----------
* The last axis of a tensor is its *chunked* axis: it is split into vectors of
  ``chunk_size`` elements.  All other axes become integer index columns named
  by ``TensorDecl.dims``.
* A weight used as the right-hand operand of a non-transposed ``MatMul`` is
  stored transposed, so its second-to-last axis is the chunked one.
* Axis 0 of activations (inputs, intermediates, outputs) may be a sequence
  axis; its declared size is a capacity, never used by generated SQL.
"""

from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from typing import Any, Iterable, Mapping, Sequence

import jsonschema

from .errors import (
    ChunkingError,
    GraphCycleError,
    GraphParseError,
    UnsupportedOperatorError,
)

TENSOR_KINDS = ("weight", "constant", "input", "intermediate", "output")
STATIC_KINDS = ("weight", "constant")

CATEGORIES = (
    "matmul",
    "elementwise_fn",
    "elementwise_arith",
    "reshape",
    "normalization",
    "lookup",
    "slice",
    "concat",
    "transpose_fallback",
)

# raw operator name -> category
OP_REGISTRY: dict[str, str] = {
    "MatMul": "matmul",
    "Sigmoid": "elementwise_fn",
    "SiLU": "elementwise_fn",
    "Exp": "elementwise_fn",
    "Relu": "elementwise_fn",
    "Square": "elementwise_fn",
    "Identity": "elementwise_fn",
    "Neg": "elementwise_fn",
    "Scale": "elementwise_fn",
    "Add": "elementwise_arith",
    "Sub": "elementwise_arith",
    "Mul": "elementwise_arith",
    "Reshape": "reshape",
    "Softmax": "normalization",
    "RMSNorm": "normalization",
    "ReduceMax": "normalization",
    "ReduceSum": "normalization",
    "TopK": "normalization",
    "Normalize": "normalization",
    "Gather": "lookup",
    "Im2Col": "lookup",
    "Slice": "slice",
    "Concat": "concat",
    "CacheAppend": "concat",
    "Transpose": "transpose_fallback",
}

# element function name per elementwise_fn operator
FN_OF_OP = {
    "Sigmoid": "sigmoid",
    "SiLU": "silu",
    "Exp": "exp",
    "Relu": "relu",
    "Square": "square",
    "Identity": "identity",
    "Neg": "neg",
    "Scale": "scale",
}
ELEMENT_FNS = frozenset(FN_OF_OP.values())
ARITH_OPS = {"Add": "+", "Sub": "-", "Mul": "*"}

NORM_F = frozenset({"identity", "exp", "square"})
NORM_AGG = frozenset({"SUM", "MAX", "MEAN", "TOPK"})
NORM_G = frozenset({"div", "div_sqrt_eps", "identity", "keep"})

RESERVED_COLUMNS = frozenset({"chunk_id", "vec", "col_id", "value", "val", "n"})


@dataclass(frozen=True)
class TensorDecl:
    """A named tensor with its logical shape and relational chunking."""

    name: str
    shape: tuple[int, ...]
    kind: str
    chunk_size: int
    dims: tuple[str, ...] = ()
    parts: tuple[tuple[str, int], ...] = ()

    def __post_init__(self) -> None:
        if not self.dims:
            object.__setattr__(self, "dims", default_dims(len(self.shape)))

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def width(self) -> int:
        """Size of the last (chunked) logical axis."""
        return self.shape[-1]

    @property
    def index_dims(self) -> tuple[str, ...]:
        return self.dims[:-1]

    @property
    def is_static(self) -> bool:
        return self.kind in STATIC_KINDS

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "name": self.name,
            "shape": list(self.shape),
            "kind": self.kind,
            "chunk_size": self.chunk_size,
        }
        if self.dims != default_dims(len(self.shape)):
            out["dims"] = list(self.dims)
        if self.parts:
            out["parts"] = [[f, w] for f, w in self.parts]
        return out


def default_dims(rank: int) -> tuple[str, ...]:
    if rank == 1:
        return ("col",)
    if rank == 2:
        return ("row_id", "col")
    return tuple(f"d{i}" for i in range(rank - 2)) + ("row_id", "col")


@dataclass(frozen=True)
class NormalizationAttr:
    """Parameters of the two-step reduce-then-rescale pattern.

    ``f`` is applied element-wise and reduced with ``agg`` over the last axis;
    ``g`` combines each element with the reduction:

    * ``div``          -> f(x) / s
    * ``div_sqrt_eps`` -> x / sqrt(s + epsilon)
    * ``identity``     -> s itself (the output's last axis has size 1)
    * ``keep``         -> x for the ``k`` largest entries, dropped otherwise
      (only with ``agg == "TOPK"``)

    ``stable`` subtracts the row maximum before ``exp`` (softmax only).
    """

    f: str
    agg: str
    g: str
    epsilon: float = 0.0
    k: int = 0
    stable: bool = False

    def __post_init__(self) -> None:
        if self.f not in NORM_F:
            raise ValueError(f"unknown normalization element function {self.f!r}")
        if self.agg not in NORM_AGG:
            raise ValueError(f"unknown normalization aggregate {self.agg!r}")
        if self.g not in NORM_G:
            raise ValueError(f"unknown normalization post function {self.g!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.g == "div_sqrt_eps" and self.epsilon == 0:
            raise ValueError("div_sqrt_eps requires a positive epsilon")
        if (self.agg == "TOPK") != (self.g == "keep"):
            raise ValueError("TOPK aggregate pairs exactly with the 'keep' post function")
        if self.agg == "TOPK" and self.k < 1:
            raise ValueError("TOPK needs k >= 1")
        if self.stable and self.f != "exp":
            raise ValueError("max-subtraction only applies to exp")

    @property
    def reduces(self) -> bool:
        return self.g == "identity"


def normalization_attr(op: str, attr: Mapping[str, Any]) -> NormalizationAttr:
    if op == "Softmax":
        return NormalizationAttr("exp", "SUM", "div", stable=bool(attr.get("stable", True)))
    if op == "RMSNorm":
        return NormalizationAttr("square", "MEAN", "div_sqrt_eps", float(attr.get("epsilon", 1e-5)))
    if op == "ReduceMax":
        return NormalizationAttr("identity", "MAX", "identity")
    if op == "ReduceSum":
        return NormalizationAttr("identity", "SUM", "identity")
    if op == "TopK":
        return NormalizationAttr("identity", "TOPK", "keep", k=int(attr["k"]))
    return NormalizationAttr(
        attr.get("f", "identity"),
        attr.get("agg", "SUM"),
        attr.get("g", "div"),
        float(attr.get("epsilon", 0.0)),
        int(attr.get("k", 0)),
        bool(attr.get("stable", False)),
    )


@dataclass(frozen=True)
class ReshapeAttr:
    """Reshape of the row-major element order followed by an index permutation.

    ``shape`` is the target shape; entry 0 may be -1 (sequence axis).  ``perm``
    permutes the result's axes and must keep the last axis last.  The mapping
    from input to output indices is affine through the flat offset, hence a
    bijection whenever the element counts agree.
    """

    shape: tuple[int, ...]
    perm: tuple[int, ...]

    def validate(self, src: TensorDecl) -> None:
        if any(s <= 0 for s in self.shape[1:]) or self.shape[0] == 0 or self.shape[0] < -1:
            raise ValueError(f"invalid target shape {list(self.shape)}")
        if sorted(self.perm) != list(range(len(self.shape))):
            raise ValueError(f"perm {list(self.perm)} is not a permutation")
        if self.perm[-1] != len(self.shape) - 1:
            raise ValueError("perm must keep the chunked axis last")
        inner_in = _prod(src.shape[1:])
        inner_out = _prod(self.shape[1:])
        if self.shape[0] == -1:
            if inner_in % inner_out and inner_out % inner_in:
                raise ValueError("leading axis cannot be inferred for this reshape")
            if (src.shape[0] * inner_in) % inner_out:
                raise ValueError("reshape does not preserve the element count")
        elif _prod(self.shape) != _prod(src.shape):
            raise ValueError("reshape does not preserve the element count")

    def resolved_shape(self, src_shape: Sequence[int]) -> tuple[int, ...]:
        shape = list(self.shape)
        if shape[0] == -1:
            shape[0] = _prod(src_shape) // _prod(shape[1:])
        return tuple(shape[p] for p in self.perm)


def reshape_attr(attr: Mapping[str, Any]) -> ReshapeAttr:
    shape = tuple(int(s) for s in attr["shape"])
    perm = tuple(int(p) for p in attr.get("perm", range(len(shape))))
    return ReshapeAttr(shape, perm)


@dataclass(frozen=True)
class OpNode:
    """One parameterized operator instance.

    ``free_dims`` holds one tuple of labels per input; ``shared_dims`` holds
    label pairs that become join keys; ``group_dims`` holds grouping labels.
    Labels are written ``tensor.dim``.
    """

    id: str
    op: str
    category: str
    inputs: tuple[str, ...]
    output: str
    free_dims: tuple[tuple[str, ...], ...] = ()
    shared_dims: tuple[tuple[str, str], ...] = ()
    group_dims: tuple[str, ...] = ()
    attr: Mapping[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "id": self.id,
            "op": self.op,
            "inputs": list(self.inputs),
            "output": self.output,
        }
        if self.attr:
            out["attr"] = _plain(self.attr)
        return out


def _plain(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


@dataclass(frozen=True)
class MatmulSpec:
    """Resolved operand roles of a MatMul node (shared by oracle and codegen)."""

    a: TensorDecl
    b: TensorDecl
    route: TensorDecl | None
    transpose_b: bool
    a_idx: tuple[str, ...]  # A index columns (all but the chunked axis)
    b_n: str  # label of B's output axis
    b_batch: tuple[str, ...]  # B axes other than r and n, in order
    pairs: tuple[tuple[str, str, int], ...]  # (a_dim, b_dim, ratio)
    b_free: tuple[str, ...]  # B batch axes carried to the output
    causal: tuple[str, str] | None  # (a_dim, b_dim) with b <= a
    route_dim: str | None  # B axis joined with the routing relation

    @property
    def b_layout_index(self) -> tuple[str, ...]:
        """Physical index columns of B (its stored, chunk-over-r layout)."""
        if self.transpose_b:
            return self.b.dims[:-1]
        return self.b.dims[:-2] + ("row_id",)

    @property
    def b_n_column(self) -> str:
        return self.b.dims[-2] if self.transpose_b else "row_id"

    @property
    def r_size(self) -> int:
        return self.b.shape[-1] if self.transpose_b else self.b.shape[-2]

    @property
    def n_size(self) -> int:
        return self.b.shape[-2] if self.transpose_b else self.b.shape[-1]

    @property
    def out_index_sources(self) -> tuple[tuple[str, str], ...]:
        """(operand, column) for every output index column, in output order."""
        cols = [("B", d) for d in self.b_free] + [("A", d) for d in self.a_idx]
        if self.route is not None:
            cols.append(("R", "chunk_id"))
        return tuple(cols)

    def out_shape(self) -> tuple[int, ...]:
        b_size = dict(zip(self.b.dims, self.b.shape))
        a_size = dict(zip(self.a.dims, self.a.shape))
        shape = [b_size[d] for d in self.b_free] + [a_size[d] for d in self.a_idx]
        if self.route is not None:
            shape.append(self.route.width)
        shape.append(self.n_size)
        return tuple(shape)


@dataclass(frozen=True)
class Graph:
    """A validated, immutable computation graph."""

    tensors: Mapping[str, TensorDecl]
    nodes: tuple[OpNode, ...]
    outputs: tuple[str, ...]
    persistent: frozenset[str] = frozenset()
    name: str = "graph"

    # --- lookups -------------------------------------------------------
    @cached_property
    def _producers(self) -> dict[str, OpNode]:
        return {n.output: n for n in self.nodes}

    @cached_property
    def _consumers(self) -> dict[str, list[OpNode]]:
        out: dict[str, list[OpNode]] = {t: [] for t in self.tensors}
        for n in self.nodes:
            for t in dict.fromkeys(n.inputs):
                out[t].append(n)
        return out

    @cached_property
    def _by_id(self) -> dict[str, OpNode]:
        return {n.id: n for n in self.nodes}

    def node(self, node_id: str) -> OpNode:
        return self._by_id[node_id]

    def producer(self, tensor: str) -> OpNode | None:
        return self._producers.get(tensor)

    def consumers(self, tensor: str) -> list[OpNode]:
        return list(self._consumers.get(tensor, ()))

    def decl(self, tensor: str) -> TensorDecl:
        return self.tensors[tensor]

    @cached_property
    def transposed_weights(self) -> frozenset[str]:
        """Static tensors stored transposed (right operands of MatMul)."""
        out = set()
        for n in self.nodes:
            if n.op == "MatMul" and not n.attr.get("transpose_b", False):
                b = self.tensors[n.inputs[1]]
                if b.is_static:
                    out.add(b.name)
        return frozenset(out)

    def chunked_axis(self, tensor: str) -> int:
        return -2 if tensor in self.transposed_weights else -1

    def layout_index(self, tensor: str) -> tuple[str, ...]:
        """Index columns of the tensor's relation (chunk and vec columns excluded)."""
        t = self.tensors[tensor]
        if tensor in self.transposed_weights:
            return t.dims[:-2] + ("row_id",)
        return t.dims[:-1]

    def matmul_spec(self, node: OpNode) -> MatmulSpec:
        return matmul_spec(node, self.tensors)

    # --- serialization --------------------------------------------------
    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "name": self.name,
            "tensors": [t.to_json() for t in self.tensors.values()],
            "nodes": [n.to_json() for n in self.nodes],
            "outputs": list(self.outputs),
        }
        if self.persistent:
            doc["persistent"] = sorted(self.persistent)
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=False) + "\n"

    @cached_property
    def digest(self) -> str:
        canon = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def replace(self, **changes: Any) -> Graph:
        """Return a new validated graph with the given fields replaced."""
        doc = {
            "tensors": changes.pop("tensors", self.tensors),
            "nodes": changes.pop("nodes", self.nodes),
            "outputs": changes.pop("outputs", self.outputs),
            "persistent": changes.pop("persistent", self.persistent),
            "name": changes.pop("name", self.name),
        }
        if changes:
            raise TypeError(f"unknown fields {sorted(changes)}")
        return build_graph(
            list(doc["tensors"].values()),
            [dict(n.to_json()) for n in doc["nodes"]],
            doc["outputs"],
            doc["persistent"],
            doc["name"],
        )


# ---------------------------------------------------------------------------
# parsing


def _schema() -> dict[str, Any]:
    text = resources.files("tensql").joinpath("schema/graph_ir.schema.json").read_text()
    return json.loads(text)


_VALIDATOR: jsonschema.protocols.Validator | None = None


def _validator() -> jsonschema.protocols.Validator:
    global _VALIDATOR
    if _VALIDATOR is None:
        schema = _schema()
        _VALIDATOR = jsonschema.Draft202012Validator(schema)
    return _VALIDATOR


def parse_graph(text: str | bytes | Mapping[str, Any]) -> Graph:
    """Parse and validate a graph-IR document (JSON text or decoded mapping)."""
    if isinstance(text, (str, bytes)):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise GraphParseError(f"invalid JSON: {exc}") from exc
    else:
        doc = dict(text)
    errors = sorted(_validator().iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        node = None
        if len(path) >= 2 and path[0] == "nodes" and isinstance(path[1], int):
            raw = doc["nodes"][path[1]]
            node = raw.get("id") if isinstance(raw, Mapping) else None
            node = node if isinstance(node, str) else f"#{path[1]}"
        where = "/".join(str(p) for p in path) or "<root>"
        raise GraphParseError(f"schema violation at {where}: {err.message}", node=node)
    tensors = []
    for t in doc["tensors"]:
        tensors.append(
            TensorDecl(
                name=t["name"],
                shape=tuple(t["shape"]),
                kind=t["kind"],
                chunk_size=t["chunk_size"],
                dims=tuple(t.get("dims", ())),
                parts=tuple((str(f), int(w)) for f, w in t.get("parts", ())),
            )
        )
    return build_graph(
        tensors,
        doc["nodes"],
        doc["outputs"],
        doc.get("persistent", ()),
        doc.get("name", "graph"),
    )


def load_graph(path: str) -> Graph:
    with open(path, encoding="utf-8") as fh:
        return parse_graph(fh.read())


def build_graph(
    tensors: Iterable[TensorDecl],
    raw_nodes: Iterable[Mapping[str, Any]],
    outputs: Iterable[str],
    persistent: Iterable[str] = (),
    name: str = "graph",
) -> Graph:
    """Assemble a graph from declarations and raw node records, validating it."""
    decls: dict[str, TensorDecl] = {}
    for t in tensors:
        if t.name in decls:
            raise GraphParseError(f"duplicate tensor name {t.name!r}")
        _check_decl(t)
        decls[t.name] = t

    nodes: list[OpNode] = []
    seen_ids: set[str] = set()
    produced: dict[str, str] = {}
    for raw in raw_nodes:
        nid = raw["id"]
        if nid in seen_ids:
            raise GraphParseError("duplicate node id", node=nid)
        seen_ids.add(nid)
        for t in list(raw["inputs"]) + [raw["output"]]:
            if t not in decls:
                raise GraphParseError(f"undeclared tensor {t!r}", node=nid)
        out = raw["output"]
        if decls[out].is_static or decls[out].kind == "input":
            raise GraphParseError(f"cannot produce {decls[out].kind} tensor {out!r}", node=nid)
        if out in produced:
            raise GraphParseError(
                f"tensor {out!r} already produced by node {produced[out]!r}", node=nid
            )
        produced[out] = nid
        nodes.append(categorize(raw, decls))

    for n in nodes:
        for t in n.inputs:
            d = decls[t]
            if t not in produced and d.kind not in ("weight", "constant", "input"):
                raise GraphParseError(f"input {t!r} is never produced", node=n.id)
    outputs = tuple(outputs)
    for t in outputs:
        if t not in decls:
            raise GraphParseError(f"undeclared graph output {t!r}")
    persistent = frozenset(persistent)
    for t in persistent:
        if t not in produced:
            raise GraphParseError(f"persistent tensor {t!r} is not produced by any node")

    _check_acyclic(nodes)
    g = Graph(decls, tuple(nodes), outputs, persistent, name)
    _check_layouts(g)
    return g


def _check_decl(t: TensorDecl) -> None:
    if t.kind not in TENSOR_KINDS:
        raise GraphParseError(f"tensor {t.name!r}: unknown kind {t.kind!r}")
    if any(s <= 0 for s in t.shape):
        raise GraphParseError(f"tensor {t.name!r}: shape entries must be positive")
    if len(t.dims) != len(t.shape):
        raise GraphParseError(f"tensor {t.name!r}: {len(t.dims)} dim labels for rank {t.rank}")
    if len(set(t.dims)) != len(t.dims):
        raise GraphParseError(f"tensor {t.name!r}: repeated dim label")
    bad = RESERVED_COLUMNS.intersection(t.dims[:-1])
    if bad:
        raise GraphParseError(f"tensor {t.name!r}: reserved dim label {sorted(bad)[0]!r}")
    if t.parts:
        if t.rank != 3 or len(t.parts) != t.shape[0]:
            raise GraphParseError(f"tensor {t.name!r}: parts need a rank-3 (flag, r, n) shape")
        if any(w > t.shape[-1] for _, w in t.parts):
            raise GraphParseError(f"tensor {t.name!r}: part wider than the tensor")


def _check_layouts(g: Graph) -> None:
    """Chunk divisibility and per-node shape agreement."""
    for t in g.tensors.values():
        axis = g.chunked_axis(t.name)
        if len(t.shape) < -axis:
            raise GraphParseError(f"tensor {t.name!r}: rank too small for its layout")
        width = t.shape[axis]
        if width % t.chunk_size:
            raise ChunkingError(t.name, width, t.chunk_size)
        for _, w in t.parts:
            if axis == -1 and w % t.chunk_size:
                raise ChunkingError(t.name, w, t.chunk_size)
    for n in g.nodes:
        check_node_shapes(n, g)


def _check_acyclic(nodes: Sequence[OpNode]) -> None:
    producer = {n.output: n.id for n in nodes}
    deps = {n.id: sorted({producer[t] for t in n.inputs if t in producer}) for n in nodes}
    state: dict[str, int] = {}
    for start in sorted(deps):
        if state.get(start):
            continue
        stack = [(start, iter(deps[start]))]
        path = [start]
        state[start] = 1
        while stack:
            nid, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[nid] = 2
                stack.pop()
                path.pop()
                continue
            if state.get(nxt) == 1:
                cycle = path[path.index(nxt):] + [nxt]
                raise GraphCycleError(list(reversed(cycle)))
            if not state.get(nxt):
                state[nxt] = 1
                stack.append((nxt, iter(deps[nxt])))
                path.append(nxt)


# ---------------------------------------------------------------------------
# categorization


def _label(tensor: TensorDecl, dim: str) -> str:
    return f"{tensor.name}.{dim}"


def matmul_spec(node: OpNode | Mapping[str, Any], tensors: Mapping[str, TensorDecl]) -> MatmulSpec:
    if isinstance(node, OpNode):
        nid, inputs, attr = node.id, node.inputs, node.attr
    else:
        nid, inputs, attr = node["id"], node["inputs"], node.get("attr", {})
    if len(inputs) not in (2, 3):
        raise GraphParseError("MatMul takes two operands and an optional routing relation", node=nid)
    a, b = tensors[inputs[0]], tensors[inputs[1]]
    route = tensors[inputs[2]] if len(inputs) == 3 else None
    tb = bool(attr.get("transpose_b", False))
    if b.rank < 2:
        raise GraphParseError("right operand must have rank >= 2", node=nid)
    if tb:
        b_n, b_batch = b.dims[-2], b.dims[:-2]
    else:
        b_n, b_batch = "row_id", b.dims[:-2]
    pairs = []
    for entry in attr.get("batch", ()):
        a_dim, b_dim = entry[0], entry[1]
        ratio = int(entry[2]) if len(entry) > 2 else 1
        if a_dim not in a.index_dims or b_dim not in b_batch:
            raise GraphParseError(f"batch pair {a_dim}/{b_dim} does not name operand axes", node=nid)
        if ratio < 1:
            raise GraphParseError("batch ratio must be >= 1", node=nid)
        pairs.append((a_dim, b_dim, ratio))
    route_dim = None
    if route is not None:
        route_dim = attr.get("route_dim", b_batch[0] if b_batch else None)
        if route_dim not in b_batch:
            raise GraphParseError("routed MatMul needs an expert axis on the right operand", node=nid)
        if route.chunk_size != 1:
            raise GraphParseError("routing relation must have chunk size 1", node=nid)
        if route.rank != a.rank:
            raise GraphParseError("routing relation must share the left operand's index axes", node=nid)
    paired = {p[1] for p in pairs} | ({route_dim} if route_dim else set())
    b_free = tuple(d for d in b_batch if d not in paired)
    causal = None
    if attr.get("causal"):
        ca, cb = attr["causal"]
        b_cols = b.dims[:-1] if tb else ()
        if ca not in a.index_dims or cb not in b_cols:
            raise GraphParseError("causal pair must name A and B index axes", node=nid)
        causal = (ca, cb)
    return MatmulSpec(
        a=a,
        b=b,
        route=route,
        transpose_b=tb,
        a_idx=a.index_dims,
        b_n=b_n,
        b_batch=b_batch,
        pairs=tuple(pairs),
        b_free=b_free,
        causal=causal,
        route_dim=route_dim,
    )


def categorize(raw: Mapping[str, Any], tensors: Mapping[str, TensorDecl]) -> OpNode:
    """Assign a category and free/shared/group dimensions to a raw node."""
    nid = raw["id"]
    op = raw["op"]
    if op not in OP_REGISTRY:
        raise UnsupportedOperatorError(op, node=nid)
    category = OP_REGISTRY[op]
    inputs = tuple(raw["inputs"])
    attr = dict(raw.get("attr", {}))
    ins = [tensors[t] for t in inputs]
    out = tensors[raw["output"]]

    def expect(count: int) -> None:
        if len(inputs) != count:
            raise GraphParseError(f"{op} takes {count} input(s), got {len(inputs)}", node=nid)

    free: tuple[tuple[str, ...], ...] = tuple(() for _ in ins)
    shared: tuple[tuple[str, str], ...] = ()
    group: tuple[str, ...] = ()

    if category == "matmul":
        spec = matmul_spec(raw, tensors)
        a, b = spec.a, spec.b
        r_b = b.dims[-1] if spec.transpose_b else b.dims[-2]
        shared = ((_label(a, a.dims[-1]), _label(b, r_b)),)
        shared += tuple((_label(a, p[0]), _label(b, p[1])) for p in spec.pairs)
        group = tuple(_label(b, d) for d in spec.b_free)
        group += tuple(_label(a, d) for d in spec.a_idx)
        if spec.route is not None:
            shared += ((_label(spec.route, spec.route.dims[-1]), _label(b, spec.route_dim)),)
            group += (_label(spec.route, spec.route.dims[-1]),)
        group += (_label(b, spec.b_n if spec.transpose_b else b.dims[-1]),)
        free = tuple(() for _ in ins)
    elif category == "elementwise_fn":
        expect(1)
        if op == "Scale":
            if "alpha" not in attr:
                raise GraphParseError("Scale needs attr.alpha", node=nid)
            attr["alpha"] = float(attr["alpha"])
        free = (tuple(_label(ins[0], d) for d in ins[0].dims),)
    elif category == "elementwise_arith":
        expect(2)
        a, b = ins
        if b.rank > a.rank:
            raise GraphParseError("right operand has higher rank than left operand", node=nid)
        off = a.rank - b.rank
        pairs = []
        for i, d in enumerate(b.dims):
            pairs.append((_label(a, a.dims[off + i]), _label(b, d)))
        shared = tuple(pairs)
    elif category == "reshape":
        expect(1)
        try:
            ra = reshape_attr(attr)
            ra.validate(ins[0])
        except (KeyError, ValueError) as exc:
            raise GraphParseError(f"bad reshape: {exc}", node=nid) from exc
        free = (tuple(_label(ins[0], d) for d in ins[0].dims),)
    elif category == "normalization":
        expect(1)
        try:
            na = normalization_attr(op, attr)
        except (KeyError, ValueError) as exc:
            raise GraphParseError(f"bad normalization: {exc}", node=nid) from exc
        if na.agg == "TOPK" and ins[0].chunk_size != 1:
            raise GraphParseError("TopK requires chunk size 1", node=nid)
        a = ins[0]
        free = ((_label(a, a.dims[-1]),),)
        shared = tuple((_label(a, d), _label(a, d)) for d in a.index_dims)
        group = tuple(_label(a, d) for d in a.index_dims)
    elif category == "lookup":
        if op == "Gather":
            expect(2)
            table, ids = ins
            if table.rank != 2 or not table.is_static:
                raise GraphParseError("Gather table must be a static 2-D tensor", node=nid)
            if ids.rank != 1 or ids.kind != "input":
                raise GraphParseError("Gather ids must be a 1-D input tensor", node=nid)
            key = attr.setdefault("key", "token")
            if key not in ("token", "pos"):
                raise GraphParseError(f"unknown Gather key {key!r}", node=nid)
            shared = ((_label(table, table.dims[0]), _label(ids, ids.dims[0])),)
            free = ((_label(table, table.dims[1]),), (_label(ids, ids.dims[0]),))
        else:
            expect(1)
            img = ins[0]
            if img.rank != 3:
                raise GraphParseError("Im2Col expects an (H, W, C) image", node=nid)
            for k in ("kh", "kw"):
                if int(attr.get(k, 0)) < 1:
                    raise GraphParseError(f"Im2Col needs attr.{k} >= 1", node=nid)
            attr.setdefault("stride", 1)
            attr.setdefault("pad", 0)
            free = (tuple(_label(img, d) for d in img.dims),)
    elif category == "slice":
        expect(1)
        for k in ("axes", "starts", "stops"):
            if k not in attr:
                raise GraphParseError(f"Slice needs attr.{k}", node=nid)
        if not (len(attr["axes"]) == len(attr["starts"]) == len(attr["stops"])):
            raise GraphParseError("Slice axes/starts/stops lengths differ", node=nid)
        attr.setdefault("squeeze", [])
        free = (tuple(_label(ins[0], d) for d in ins[0].dims),)
    elif category == "concat":
        if op == "CacheAppend":
            expect(1)
            if "cache" not in attr:
                raise GraphParseError("CacheAppend needs attr.cache (table name)", node=nid)
            attr.setdefault("perm", list(range(ins[0].rank)))
            perm = list(attr["perm"])
            if sorted(perm) != list(range(ins[0].rank)) or perm[-1] != ins[0].rank - 1:
                raise GraphParseError("CacheAppend perm must keep the chunked axis last", node=nid)
        else:
            if len(inputs) < 2:
                raise GraphParseError("Concat needs at least two inputs", node=nid)
            attr.setdefault("axis", -1)
        free = tuple(tuple(_label(t, d) for d in t.dims) for t in ins)
    elif category == "transpose_fallback":
        expect(1)
        perm = list(attr.get("perm", ()))
        if sorted(perm) != list(range(ins[0].rank)):
            raise GraphParseError("Transpose needs a permutation attr.perm", node=nid)
        free = (tuple(_label(ins[0], d) for d in ins[0].dims),)

    node = OpNode(
        id=nid,
        op=op,
        category=category,
        inputs=inputs,
        output=out.name,
        free_dims=free,
        shared_dims=shared,
        group_dims=group,
        attr=attr,
    )
    _check_labels(node, ins)
    return node


def _check_labels(node: OpNode, ins: Sequence[TensorDecl]) -> None:
    known = {_label(t, d) for t in ins for d in t.dims}
    labels = [x for f in node.free_dims for x in f]
    labels += [x for p in node.shared_dims for x in p]
    labels += list(node.group_dims)
    for lab in labels:
        if lab not in known:
            raise GraphParseError(f"dimension label {lab!r} does not resolve", node=node.id)


# ---------------------------------------------------------------------------
# shape inference


def infer_shape(node: OpNode, tensors: Mapping[str, TensorDecl]) -> tuple[int, ...] | None:
    """Expected output shape of ``node``; None where the shape is data dependent."""
    ins = [tensors[t] for t in node.inputs]
    op = node.op
    if node.category == "matmul":
        return matmul_spec(node, tensors).out_shape()
    if node.category in ("elementwise_fn", "elementwise_arith"):
        return ins[0].shape
    if node.category == "reshape":
        ra = reshape_attr(node.attr)
        shape = list(ra.shape)
        if shape[0] == -1:
            shape[0] = _prod(ins[0].shape) // _prod(shape[1:])
        return tuple(shape[p] for p in ra.perm)
    if node.category == "normalization":
        na = normalization_attr(op, node.attr)
        if na.reduces:
            return ins[0].shape[:-1] + (1,)
        return ins[0].shape
    if op == "Gather":
        return ins[1].shape + (ins[0].shape[1],)
    if op == "Im2Col":
        h, w, c = ins[0].shape
        oh, ow = conv_out_hw(h, w, node.attr)
        return (oh * ow, int(node.attr["kh"]) * int(node.attr["kw"]) * c)
    if node.category == "slice":
        shape = list(ins[0].shape)
        for ax, s, e in zip(node.attr["axes"], node.attr["starts"], node.attr["stops"]):
            shape[ax] = e - s
        return tuple(s for i, s in enumerate(shape) if i not in _norm_axes(node.attr["squeeze"], len(shape)))
    if op == "CacheAppend":
        return tuple(ins[0].shape[p] for p in node.attr["perm"])
    if op == "Concat":
        axis = node.attr["axis"] % ins[0].rank
        shape = list(ins[0].shape)
        shape[axis] = sum(t.shape[axis] for t in ins)
        return tuple(shape)
    if node.category == "transpose_fallback":
        return tuple(ins[0].shape[p] for p in node.attr["perm"])
    return None


def _norm_axes(axes: Iterable[int], rank: int) -> set[int]:
    return {a % rank for a in axes}


def conv_out_hw(h: int, w: int, attr: Mapping[str, Any]) -> tuple[int, int]:
    kh, kw = int(attr["kh"]), int(attr["kw"])
    s, p = int(attr.get("stride", 1)), int(attr.get("pad", 0))
    return (h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1


def check_node_shapes(node: OpNode, g: Graph) -> None:
    ins = [g.tensors[t] for t in node.inputs]
    out = g.tensors[node.output]
    op = node.op
    if node.category == "matmul":
        spec = matmul_spec(node, g.tensors)
        if spec.a.width != spec.r_size:
            raise GraphParseError(
                f"contraction sizes differ ({spec.a.width} vs {spec.r_size})", node=node.id
            )
        if spec.a.chunk_size != spec.b.chunk_size:
            raise GraphParseError("operands have different chunk sizes", node=node.id)
        if spec.route is not None and spec.route.width != dict(zip(spec.b.dims, spec.b.shape))[spec.route_dim]:
            raise GraphParseError("routing width differs from the expert count", node=node.id)
    elif node.category == "elementwise_arith":
        a, b = ins
        off = a.rank - b.rank
        for i, s in enumerate(b.shape):
            if s not in (1, a.shape[off + i]):
                raise GraphParseError(f"shapes {list(a.shape)} and {list(b.shape)} do not broadcast", node=node.id)
        if b.width == a.width and b.chunk_size != a.chunk_size:
            raise GraphParseError("operands have different chunk sizes", node=node.id)
    elif node.category == "reshape":
        if out.chunk_size != ins[0].chunk_size:
            raise GraphParseError("reshape cannot change the chunk size", node=node.id)
    elif op == "Gather":
        if ins[0].chunk_size != out.chunk_size:
            raise GraphParseError("lookup output must keep the table chunk size", node=node.id)
    elif op == "Im2Col":
        if ins[0].width % out.chunk_size or ins[0].chunk_size != out.chunk_size:
            raise GraphParseError("Im2Col chunks must tile the channel axis", node=node.id)
    elif op == "CacheAppend":
        if out.chunk_size != ins[0].chunk_size:
            raise GraphParseError("cache chunk size differs from its input", node=node.id)
    expected = infer_shape(node, g.tensors)
    if expected is not None and tuple(expected) != out.shape:
        raise GraphParseError(
            f"declared output shape {list(out.shape)} differs from inferred {list(expected)}",
            node=node.id,
        )
    if len(out.dims) != out.rank:
        raise GraphParseError("output rank mismatch", node=node.id)


# ---------------------------------------------------------------------------
# ordering


def topo_sort(g: Graph) -> list[OpNode]:
    """Kahn's algorithm; among ready nodes the smallest id goes first."""
    producer = {n.output: n.id for n in g.nodes}
    indeg = {n.id: 0 for n in g.nodes}
    succ: dict[str, list[str]] = {n.id: [] for n in g.nodes}
    for n in g.nodes:
        for dep in {producer[t] for t in n.inputs if t in producer}:
            indeg[n.id] += 1
            succ[dep].append(n.id)
    ready = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order: list[OpNode] = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(g.node(nid))
        for s in succ[nid]:
            indeg[s] -= 1
            if indeg[s] == 0:
                heapq.heappush(ready, s)
    if len(order) != len(g.nodes):  # pragma: no cover - parse guarantees acyclicity
        raise GraphCycleError(sorted(nid for nid, d in indeg.items() if d))
    return order


def _prod(values: Iterable[int]) -> int:
    out = 1
    for v in values:
        out *= int(v)
    return out
