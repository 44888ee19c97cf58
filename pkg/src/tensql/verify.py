"""Randomized operator-level verification against the reference oracle.

:func:`generate_instances` draws small random instances of one operator
category (shapes, chunk sizes, attributes and values).  Many instances are
packed side by side into a single graph so that one compiled script and one
engine run check them all; every instance output is then compared with
:func:`tensql.oracle.ref_forward`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .graph_ir import CATEGORIES, Graph, parse_graph
from .oracle import ref_forward
from .preprocess import scalar_graph
from .runtime import run_graph

MAX_DIM = 64
CHUNK_SIZES = (1, 2, 4, 8, 16, 32, 64)
VALUE_RANGE = 2.0
TOKENS_LEN = 8


@dataclass
class Instance:
    """One operator instance: its tensors, nodes (usually one) and values."""

    category: str
    tensors: list[dict[str, Any]]
    nodes: list[dict[str, Any]]
    output: str
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    inputs: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def label(self) -> str:
        return f"{self.nodes[-1]['op']}:{self.output}"


class _Draw:
    def __init__(self, rng: np.random.Generator, prefix: str):
        self.rng = rng
        self.p = prefix
        self.tensors: list[dict[str, Any]] = []
        self.nodes: list[dict[str, Any]] = []
        self.weights: dict[str, np.ndarray] = {}
        self.inputs: dict[str, np.ndarray] = {}

    def chunk_size(self, max_width: int = MAX_DIM) -> int:
        return int(self.rng.choice([c for c in CHUNK_SIZES if c <= max_width]))

    def chunked(self, max_width: int = MAX_DIM) -> tuple[int, int]:
        """(width, chunk size) with width <= max_width."""
        cs = self.chunk_size(max_width)
        k = int(self.rng.integers(1, max(1, max_width // cs) + 1))
        return cs * k, cs

    def multiple(self, cs: int, most: int, max_width: int = MAX_DIM) -> int:
        """A multiple of ``cs`` of at most ``most`` chunks and ``max_width`` entries."""
        return cs * self.dim(1, max(1, min(most, max_width // cs)))

    def dim(self, lo: int = 1, hi: int = 6) -> int:
        return int(self.rng.integers(lo, hi + 1))

    def values(self, shape: tuple[int, ...], scale: float = 1.0) -> np.ndarray:
        return (self.rng.uniform(-VALUE_RANGE, VALUE_RANGE, shape) * scale).astype(np.float32)

    def tensor(self, name: str, shape: tuple[int, ...], kind: str, cs: int,
               dims: tuple[str, ...] | None = None, scale: float = 1.0) -> str:
        full = self.p + name
        t: dict[str, Any] = {"name": full, "shape": list(shape), "kind": kind, "chunk_size": cs}
        if dims is not None:
            t["dims"] = list(dims)
        self.tensors.append(t)
        if kind in ("weight", "constant"):
            self.weights[full] = self.values(shape, scale)
        elif kind == "input":
            self.inputs[full] = self.values(shape, scale)
        return full

    def node(self, op: str, inputs: list[str], shape: tuple[int, ...], cs: int,
             dims: tuple[str, ...] | None = None, attr: dict[str, Any] | None = None,
             name: str = "out") -> str:
        out = self.tensor(name, shape, "output", cs, dims)
        n: dict[str, Any] = {"id": out, "op": op, "inputs": inputs, "output": out}
        if attr:
            n["attr"] = attr
        self.nodes.append(n)
        return out

    def done(self, category: str, out: str) -> Instance:
        return Instance(category, self.tensors, self.nodes, out, self.weights, self.inputs)


# ---------------------------------------------------------------------------
# generators


def _gen_matmul(d: _Draw) -> Instance:
    kind = d.rng.choice(["static", "runtime", "transposed", "batched"])
    r, cs = d.chunked()
    n, ocs = d.chunked()
    if kind == "batched":
        groups = d.dim(1, 3)
        ratio = d.dim(1, 3)
        m = d.dim(1, 5)
        a = d.tensor("a", (m, groups * ratio, r), "input", cs, ("pos", "head", "col"))
        b = d.tensor("b", (groups, n, r), "weight", cs, ("grp", "kpos", "col"))
        out = d.node("MatMul", [a, b], (m, groups * ratio, n), ocs, ("pos", "head", "col"),
                     {"transpose_b": True, "batch": [["head", "grp", ratio]]})
        return d.done("matmul", out)
    m = d.dim(1, 8)
    a = d.tensor("a", (m, r), "input", cs)
    if kind == "transposed":
        b = d.tensor("b", (n, r), "input", cs)
        out = d.node("MatMul", [a, b], (m, n), ocs, attr={"transpose_b": True})
    elif kind == "runtime":
        n = cs * d.dim(1, MAX_DIM // cs)
        b = d.tensor("b", (r, n), "input", cs)
        out = d.node("MatMul", [a, b], (m, n), ocs if n % ocs == 0 else 1)
    else:
        b = d.tensor("b", (r, n), "weight", cs)
        out = d.node("MatMul", [a, b], (m, n), ocs)
    return d.done("matmul", out)


def _gen_elementwise_fn(d: _Draw) -> Instance:
    op = str(d.rng.choice(["Sigmoid", "SiLU", "Exp", "Relu", "Square", "Identity", "Neg", "Scale"]))
    w, cs = d.chunked()
    shape = (d.dim(1, 6), w)
    x = d.tensor("x", shape, "input", cs)
    attr = {"alpha": float(np.float32(d.rng.uniform(-2, 2)))} if op == "Scale" else None
    return d.done("elementwise_fn", d.node(op, [x], shape, cs, attr=attr))


def _gen_elementwise_arith(d: _Draw) -> Instance:
    op = str(d.rng.choice(["Add", "Sub", "Mul"]))
    w, cs = d.chunked()
    m, k = d.dim(1, 5), d.dim(1, 4)
    a = d.tensor("a", (m, k, w), "input", cs, ("pos", "head", "col"))
    form = d.rng.choice(["same", "row", "vector", "scalar"])
    if form == "same":
        b = d.tensor("b", (m, k, w), "input", cs, ("pos", "head", "col"))
    elif form == "row":
        b = d.tensor("b", (m, 1, w), "input", cs, ("pos", "one", "col"))
    elif form == "vector":
        b = d.tensor("b", (w,), "weight", cs)
    else:
        b = d.tensor("b", (m, k, 1), "input", 1, ("pos", "head", "col"))
    return d.done("elementwise_arith", d.node(op, [a, b], (m, k, w), cs, ("pos", "head", "col")))


def _gen_reshape(d: _Draw) -> Instance:
    cs = d.chunk_size()
    inner = d.multiple(cs, 4)
    k = d.dim(1, 4)
    m = d.dim(1, 5)
    if d.rng.random() < 0.5:
        # split the last axis: (m, k*inner) -> (m, k, inner), maybe permuted
        x = d.tensor("x", (m, k * inner), "input", cs)
        perm = [1, 0, 2] if d.rng.random() < 0.5 else [0, 1, 2]
        pre = (m, k, inner)
        shape = tuple(pre[p] for p in perm)
        out = d.node("Reshape", [x], shape, cs, ("p", "q", "col"), {"shape": [-1, k, inner], "perm": perm})
    else:
        x = d.tensor("x", (m, k, inner), "input", cs, ("pos", "head", "col"))
        out = d.node("Reshape", [x], (m, k * inner), cs, attr={"shape": [-1, k * inner]})
    return d.done("reshape", out)


def _gen_normalization(d: _Draw) -> Instance:
    op = str(d.rng.choice(["Softmax", "RMSNorm", "ReduceMax", "ReduceSum", "TopK", "Normalize"]))
    if op in ("TopK", "Normalize"):
        w, cs = d.dim(2, 16), 1
    else:
        w, cs = d.chunked()
    m = d.dim(1, 6)
    x = d.tensor("x", (m, w), "input", cs)
    attr: dict[str, Any] | None = None
    shape = (m, w)
    if op in ("ReduceMax", "ReduceSum"):
        shape, cs = (m, 1), 1
    elif op == "TopK":
        attr = {"k": d.dim(1, w)}
    elif op == "RMSNorm":
        attr = {"epsilon": 1e-5}
    elif op == "Normalize":
        d.inputs[x] = np.abs(d.inputs[x]) * np.float32(0.95) + np.float32(0.1)
        attr = {"f": "identity", "agg": "SUM", "g": "div"}
    return d.done("normalization", d.node(op, [x], shape, cs, attr=attr))


def _gen_lookup(d: _Draw) -> Instance:
    if d.rng.random() < 0.5:
        dim, cs = d.chunked()
        vocab = d.dim(TOKENS_LEN, MAX_DIM)
        table = d.tensor("table", (vocab, dim), "weight", cs)
        ids = d.tensor("ids", (TOKENS_LEN,), "input", 1, ("pos",))
        del d.inputs[ids]  # bound to the shared token table
        key = str(d.rng.choice(["token", "pos"]))
        out = d.node("Gather", [table, ids], (TOKENS_LEN, dim), cs, ("pos", "col"), {"key": key})
        return d.done("lookup", out)
    cs = d.chunk_size()
    c = d.multiple(cs, 2)
    h, w = d.dim(2, 6), d.dim(2, 6)
    kh, kw = d.dim(1, min(3, h)), d.dim(1, min(3, w))
    stride, pad = d.dim(1, 2), d.dim(0, 1)
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    img = d.tensor("img", (h, w, c), "input", cs, ("h", "w", "col"))
    attr = {"kh": kh, "kw": kw, "stride": stride, "pad": pad}
    out = d.node("Im2Col", [img], (oh * ow, kh * kw * c), cs, ("patch", "col"), attr)
    return d.done("lookup", out)


def _gen_slice(d: _Draw) -> Instance:
    w, cs = d.chunked()
    m, k = d.dim(2, 6), d.dim(1, 4)
    x = d.tensor("x", (m, k, w), "input", cs, ("pos", "head", "col"))
    s0 = int(d.rng.integers(0, m))
    e0 = int(d.rng.integers(s0 + 1, m + 1))
    nch = w // cs
    c0 = int(d.rng.integers(0, nch))
    c1 = int(d.rng.integers(c0 + 1, nch + 1))
    squeeze = k == 1 and d.rng.random() < 0.5
    axes, starts, stops = [0, 2], [s0, c0 * cs], [e0, c1 * cs]
    shape = [e0 - s0, k, (c1 - c0) * cs]
    dims = ["pos", "head", "col"]
    attr: dict[str, Any] = {"axes": axes, "starts": starts, "stops": stops}
    if squeeze:
        attr["squeeze"] = [1]
        del shape[1]
        del dims[1]
    out = d.node("Slice", [x], tuple(shape), cs, tuple(dims), attr)
    return d.done("slice", out)


def _gen_concat(d: _Draw) -> Instance:
    cs = d.chunk_size()
    m = d.dim(1, 5)
    parts = d.dim(2, 3)
    if d.rng.random() < 0.5:
        w = d.multiple(cs, 4)
        rows = [d.dim(1, 4) for _ in range(parts)]
        ins = [d.tensor(f"x{i}", (r, w), "input", cs) for i, r in enumerate(rows)]
        out = d.node("Concat", ins, (sum(rows), w), cs, attr={"axis": 0})
    else:
        widths = [d.multiple(cs, 3) for _ in range(parts)]
        ins = [d.tensor(f"x{i}", (m, wi), "input", cs) for i, wi in enumerate(widths)]
        out = d.node("Concat", ins, (m, sum(widths)), cs, attr={"axis": -1})
    return d.done("concat", out)


def _gen_transpose(d: _Draw) -> Instance:
    cs = d.chunk_size()
    shape = (d.dim(1, 5), d.dim(1, 5), d.multiple(cs, 4))
    x = d.tensor("x", shape, "input", cs, ("a", "b", "col"))
    perm = [int(p) for p in d.rng.permutation(3)]
    out_shape = tuple(shape[p] for p in perm)
    ocs = 1 if d.rng.random() < 0.5 else max(c for c in CHUNK_SIZES if out_shape[-1] % c == 0)
    out = d.node("Transpose", [x], out_shape, ocs, ("p", "q", "col"), {"perm": perm})
    return d.done("transpose_fallback", out)


GENERATORS: dict[str, Callable[[_Draw], Instance]] = {
    "matmul": _gen_matmul,
    "elementwise_fn": _gen_elementwise_fn,
    "elementwise_arith": _gen_elementwise_arith,
    "reshape": _gen_reshape,
    "normalization": _gen_normalization,
    "lookup": _gen_lookup,
    "slice": _gen_slice,
    "concat": _gen_concat,
    "transpose_fallback": _gen_transpose,
}
assert set(GENERATORS) == set(CATEGORIES)


def generate_instances(category: str, count: int, seed: int = 0) -> list[Instance]:
    rng = np.random.default_rng([seed, CATEGORIES.index(category)])
    return [GENERATORS[category](_Draw(rng, f"i{i}_")) for i in range(count)]


def combine(instances: list[Instance], name: str = "operator_suite") -> tuple[Graph, dict, dict]:
    """One graph holding every instance side by side."""
    doc = {
        "name": name,
        "tensors": [t for inst in instances for t in inst.tensors],
        "nodes": [n for inst in instances for n in inst.nodes],
        "outputs": [inst.output for inst in instances],
    }
    weights = {k: v for inst in instances for k, v in inst.weights.items()}
    inputs = {k: v for inst in instances for k, v in inst.inputs.items()}
    return parse_graph(doc), weights, inputs


# ---------------------------------------------------------------------------
# checking


@dataclass
class CategoryResult:
    category: str
    instances: int
    max_error: float
    failures: list[str]

    @property
    def passed(self) -> bool:
        return not self.failures


def output_error(got: np.ndarray, mask: np.ndarray, ref: np.ndarray) -> float:
    """Max absolute error; absent entries count as zero."""
    ref = np.asarray(ref, dtype=np.float64)
    full = np.zeros(got.shape)
    full[tuple(slice(0, s) for s in ref.shape)] = ref
    val = np.where(mask, got, 0.0)
    return float(np.max(np.abs(val - full))) if full.size else 0.0


def check_category(
    category: str,
    count: int = 100,
    seed: int = 0,
    dialect: str = "array",
    tol: float = 1e-4,
) -> CategoryResult:
    instances = generate_instances(category, count, seed)
    g, weights, inputs = combine(instances, f"suite_{category}")
    tokens = np.random.default_rng(seed).integers(0, TOKENS_LEN, TOKENS_LEN)
    ref = ref_forward(g, weights, inputs, tokens=tokens)
    from .optimizer import compile_program

    run_g = scalar_graph(g) if dialect == "scalar" else g
    prog, _ = compile_program(run_g, dialect=dialect, cte=False)
    got = run_graph(run_g, prog, weights, inputs, tokens=tokens)
    failures, worst = [], 0.0
    for inst in instances:
        vals, mask = got[inst.output]
        err = output_error(vals, mask, ref[inst.output])
        worst = max(worst, err)
        if not err <= tol:
            failures.append(f"{inst.label} error {err:.3e}")
    return CategoryResult(category, count, worst, failures)


def run_operator_suite(
    count: int = 100,
    seed: int = 0,
    dialect: str = "array",
    tol: float = 1e-4,
    categories: tuple[str, ...] = CATEGORIES,
) -> list[CategoryResult]:
    return [check_category(c, count, seed, dialect, tol) for c in categories]


# ---------------------------------------------------------------------------
# attention and convolution harnesses


def run_attention_sql(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, groups: int, chunk_size: int = 1,
    causal: bool = True, dialect: str = "array",
) -> np.ndarray:
    """Grouped-query attention of q (T,H,dk), k/v (T,G,dk) evaluated in SQL."""
    from .models import attention_document
    from .optimizer import compile_program

    t_len, heads, dk = q.shape
    g = parse_graph(attention_document(t_len, heads, groups, dk, chunk_size, causal))
    if dialect == "scalar":
        g = scalar_graph(g)
    inputs = {
        "q": q.astype(np.float32),
        "k": np.transpose(k, (1, 0, 2)).astype(np.float32),
        "v": np.transpose(v, (1, 2, 0)).astype(np.float32),
    }
    prog, _ = compile_program(g, dialect=dialect)
    vals, mask = run_graph(g, prog, {}, inputs)["attn"]
    return np.where(mask, vals, 0.0)


@dataclass
class ConvCase:
    channels: int
    size: int
    kernel: int
    stride: int
    pad: int
    filters: int = 8

    @property
    def label(self) -> str:
        return f"C{self.channels} {self.size}x{self.size} k{self.kernel} s{self.stride} p{self.pad}"


def conv_grid(
    channels: tuple[int, ...] = (1, 3, 16, 32),
    sizes: tuple[int, ...] = (7, 16, 32),
    kernels: tuple[int, ...] = (1, 3, 5, 7),
) -> list[ConvCase]:
    """Grid of convolution cases; stride and padding alternate across the grid."""
    cases = []
    i = 0
    for c in channels:
        for n in sizes:
            for k in kernels:
                if k > n:
                    continue
                stride = 1 + i % 2
                pad = (k // 2) if (i // 2) % 2 == 0 else 0
                cases.append(ConvCase(c, n, k, stride, pad))
                i += 1
    return cases


def check_conv(case: ConvCase, seed: int = 0, dialect: str = "array") -> float:
    """Max absolute difference between the SQL convolution and the direct loop."""
    from .models import ConvSpec, conv_document
    from .oracle import conv_weight_matrix, ref_conv2d
    from .optimizer import compile_program

    cs = max(c for c in CHUNK_SIZES if case.channels % c == 0 and c <= 16)
    spec = ConvSpec(
        height=case.size, width=case.size, channels=case.channels, kernels=case.filters,
        kh=case.kernel, kw=case.kernel, stride=case.stride, pad=case.pad,
        chunk_size=cs, out_chunk=4, relu=False,
    )
    rng = np.random.default_rng([seed, case.channels, case.size, case.kernel])
    kern = rng.uniform(-1, 1, (case.filters, case.channels, case.kernel, case.kernel)).astype(np.float32)
    image = rng.uniform(-1, 1, (case.size, case.size, case.channels)).astype(np.float32)
    g = parse_graph(conv_document(spec))
    if dialect == "scalar":
        g = scalar_graph(g)
    prog, _ = compile_program(g, dialect=dialect)
    vals, mask = run_graph(g, prog, {"conv_w": conv_weight_matrix(kern)}, {"image": image})["conv"]
    ref = ref_conv2d(np.transpose(image, (2, 0, 1)), kern, case.stride, case.pad, method="direct")
    ref_rows = np.transpose(ref, (1, 2, 0)).reshape(-1, case.filters)
    return output_error(vals, mask, ref_rows)

