"""Model manifests, fixture graph builders and seeded fixture weights.

The fixture graphs are written in the IR exactly as an exporter would emit
them: attention scaling and the rotary "rotate half" step appear as explicit
constant operators, so constant folding has real work to do.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping

import numpy as np

from .graph_ir import Graph, parse_graph
from .oracle import rope_tables

FIXED_TEXT = (
    "In a hole in the ground there lived a database. Not a nasty, dirty, wet hole."
)


def encode(text: str | bytes) -> list[int]:
    """Byte-level tokenizer: one token per UTF-8 byte (vocabulary 256)."""
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return list(data)


def decode(tokens: list[int]) -> bytes:
    return bytes(int(t) & 0xFF for t in tokens)


def prompt_tokens(length: int) -> list[int]:
    """The first ``length`` bytes of the fixed prompt text, repeated as needed."""
    if length < 1:
        raise ValueError("prompt length must be positive")
    toks = encode(FIXED_TEXT)
    return (toks * (length // len(toks) + 1))[:length]


@dataclass(frozen=True)
class ModelManifest:
    """Architecture description of a decoder-only transformer."""

    name: str
    layers: int
    d_model: int
    heads: int
    kv_groups: int
    head_dim: int
    ffn_hidden: int
    vocab_size: int
    chunk_size: int
    experts: int = 0
    top_k: int = 0
    rope_theta: float = 10000.0
    table_length: int = 256
    norm_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.heads % self.kv_groups:
            raise ValueError("heads must be a multiple of kv_groups")
        if self.d_model != self.heads * self.head_dim:
            raise ValueError("d_model must equal heads * head_dim")
        if self.head_dim % 2:
            raise ValueError("rotary embedding needs an even head_dim")
        for name in ("head_dim", "d_model", "ffn_hidden", "vocab_size"):
            if getattr(self, name) % self.chunk_size:
                raise ValueError(f"{name} is not divisible by chunk_size {self.chunk_size}")
        if self.experts and not 1 <= self.top_k <= self.experts:
            raise ValueError("top_k must be in 1..experts")

    @property
    def kv_width(self) -> int:
        return self.kv_groups * self.head_dim

    @property
    def moe(self) -> dict[str, int] | None:
        if not self.experts:
            return None
        return {"experts": self.experts, "top_k": self.top_k}

    @property
    def rope(self) -> dict[str, float]:
        return {"theta": self.rope_theta, "table_length": self.table_length}

    def replace(self, **changes: Any) -> ModelManifest:
        data = asdict(self)
        data.update(changes)
        return ModelManifest(**data)

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "name": self.name,
            "layers": self.layers,
            "d_model": self.d_model,
            "heads": self.heads,
            "kv_groups": self.kv_groups,
            "head_dim": self.head_dim,
            "ffn_hidden": self.ffn_hidden,
            "vocab_size": self.vocab_size,
            "chunk_size": self.chunk_size,
            "rope": self.rope,
            "norm_eps": self.norm_eps,
            "seed": self.seed,
        }
        if self.moe:
            doc["moe"] = self.moe
        return doc

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> ModelManifest:
        data = dict(doc)
        rope = data.pop("rope", {})
        moe = data.pop("moe", None) or {}
        return cls(
            rope_theta=float(rope.get("theta", 10000.0)),
            table_length=int(rope.get("table_length", 256)),
            experts=int(moe.get("experts", 0)),
            top_k=int(moe.get("top_k", 0)),
            **data,
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1) + "\n"


TINY_DENSE = ModelManifest(
    name="tiny_dense",
    layers=2,
    d_model=64,
    heads=4,
    kv_groups=2,
    head_dim=16,
    ffn_hidden=128,
    vocab_size=256,
    chunk_size=8,
    seed=7,
)

TINY_MOE = ModelManifest(
    name="tiny_moe",
    layers=2,
    d_model=64,
    heads=4,
    kv_groups=2,
    head_dim=16,
    ffn_hidden=64,
    vocab_size=256,
    chunk_size=8,
    experts=8,
    top_k=2,
    seed=11,
)


@dataclass(frozen=True)
class ConvSpec:
    """Single convolution layer lowered through im2col."""

    height: int = 8
    width: int = 8
    channels: int = 4
    kernels: int = 4
    kh: int = 3
    kw: int = 3
    stride: int = 1
    pad: int = 1
    chunk_size: int = 4
    out_chunk: int = 4
    relu: bool = True
    seed: int = 3


TINY_CONV = ConvSpec()


# ---------------------------------------------------------------------------
# graph building


@dataclass
class _Builder:
    name: str
    tensors: dict[str, dict[str, Any]] = field(default_factory=dict)
    nodes: list[dict[str, Any]] = field(default_factory=list)

    def tensor(
        self,
        name: str,
        shape: tuple[int, ...],
        kind: str,
        chunk: int,
        dims: tuple[str, ...] | None = None,
    ) -> str:
        if name in self.tensors:
            raise ValueError(f"duplicate tensor {name}")
        t: dict[str, Any] = {"name": name, "shape": list(shape), "kind": kind, "chunk_size": chunk}
        if dims is not None:
            t["dims"] = list(dims)
        self.tensors[name] = t
        return name

    def op(
        self,
        nid: str,
        op: str,
        inputs: list[str],
        shape: tuple[int, ...],
        chunk: int,
        dims: tuple[str, ...] | None = None,
        attr: dict[str, Any] | None = None,
    ) -> str:
        self.tensor(nid, shape, "intermediate", chunk, dims)
        node: dict[str, Any] = {"id": nid, "op": op, "inputs": inputs, "output": nid}
        if attr:
            node["attr"] = attr
        self.nodes.append(node)
        return nid

    def doc(self, outputs: list[str], persistent: list[str] = ()) -> dict[str, Any]:
        for t in outputs:
            self.tensors[t]["kind"] = "output"
        return {
            "name": self.name,
            "tensors": list(self.tensors.values()),
            "nodes": self.nodes,
            "outputs": outputs,
            "persistent": sorted(persistent),
        }


SEQ = ("pos", "col")


def transformer_document(m: ModelManifest) -> dict[str, Any]:
    """Graph-IR document of a dense or mixture-of-experts transformer."""
    b = _Builder(m.name)
    cs, d, dk, T = m.chunk_size, m.d_model, m.head_dim, m.table_length
    H, G = m.heads, m.kv_groups
    kvw = m.kv_width
    ratio = H // G
    alpha = 1.0 / float(np.sqrt(dk))

    b.tensor("tokens", (T,), "input", 1, ("pos",))
    b.tensor("embed", (m.vocab_size, d), "weight", cs)
    b.tensor("rope_cos", (T, dk), "constant", cs)
    b.tensor("rope_sin", (T, dk), "constant", cs)
    b.tensor("final_norm_g", (d,), "weight", cs)
    b.tensor("lm_head", (d, m.vocab_size), "weight", cs)

    h = b.op("embedding", "Gather", ["embed", "tokens"], (T, d), cs, SEQ)
    cos = b.op("rope_cos_lookup", "Gather", ["rope_cos", "tokens"], (T, dk), cs, SEQ, {"key": "pos"})
    sin = b.op("rope_sin_lookup", "Gather", ["rope_sin", "tokens"], (T, dk), cs, SEQ, {"key": "pos"})
    bdims = ("pos", "one", "col")
    cos_b = b.op("rope_cos_b", "Reshape", [cos], (T, 1, dk), cs, bdims, {"shape": [-1, 1, dk]})
    sin_b = b.op("rope_sin_b", "Reshape", [sin], (T, 1, dk), cs, bdims, {"shape": [-1, 1, dk]})

    persistent = []
    for i in range(m.layers):
        p = f"l{i}_"
        w = {}
        for nm, shape, kind in (
            ("attn_norm_g", (d,), "weight"),
            ("wq", (d, d), "weight"),
            ("wk", (d, kvw), "weight"),
            ("wv", (d, kvw), "weight"),
            ("wo", (d, d), "weight"),
            ("rot_q", (d, d), "constant"),
            ("rot_k", (kvw, kvw), "constant"),
            ("ffn_norm_g", (d,), "weight"),
        ):
            w[nm] = b.tensor(p + nm, shape, kind, cs)

        an = b.op(p + "attn_norm", "RMSNorm", [h], (T, d), cs, SEQ, {"epsilon": m.norm_eps})
        anw = b.op(p + "attn_norm_w", "Mul", [an, w["attn_norm_g"]], (T, d), cs, SEQ)
        wq_rot = b.op(p + "wq_rot", "MatMul", [w["wq"], w["rot_q"]], (d, d), cs)
        wk_rot = b.op(p + "wk_rot", "MatMul", [w["wk"], w["rot_k"]], (d, kvw), cs)
        q = b.op(p + "q_proj", "MatMul", [anw, w["wq"]], (T, d), cs, SEQ)
        q = b.op(p + "q_scale", "Scale", [q], (T, d), cs, SEQ, {"alpha": alpha})
        qr = b.op(p + "qr_proj", "MatMul", [anw, wq_rot], (T, d), cs, SEQ)
        qr = b.op(p + "qr_scale", "Scale", [qr], (T, d), cs, SEQ, {"alpha": alpha})
        k = b.op(p + "k_proj", "MatMul", [anw, w["wk"]], (T, kvw), cs, SEQ)
        kr = b.op(p + "kr_proj", "MatMul", [anw, wk_rot], (T, kvw), cs, SEQ)
        v = b.op(p + "v_proj", "MatMul", [anw, w["wv"]], (T, kvw), cs, SEQ)

        hd = ("pos", "head", "col")
        gd = ("pos", "grp", "col")
        qh = b.op(p + "q_heads", "Reshape", [q], (T, H, dk), cs, hd, {"shape": [-1, H, dk]})
        qrh = b.op(p + "qr_heads", "Reshape", [qr], (T, H, dk), cs, hd, {"shape": [-1, H, dk]})
        kh = b.op(p + "k_heads", "Reshape", [k], (T, G, dk), cs, gd, {"shape": [-1, G, dk]})
        krh = b.op(p + "kr_heads", "Reshape", [kr], (T, G, dk), cs, gd, {"shape": [-1, G, dk]})
        vh = b.op(p + "v_heads", "Reshape", [v], (T, G, dk), cs, gd, {"shape": [-1, G, dk]})

        qc = b.op(p + "q_cos", "Mul", [qh, cos_b], (T, H, dk), cs, hd)
        qs = b.op(p + "q_sin", "Mul", [qrh, sin_b], (T, H, dk), cs, hd)
        qrope = b.op(p + "q_rope", "Add", [qc, qs], (T, H, dk), cs, hd)
        kc = b.op(p + "k_cos", "Mul", [kh, cos_b], (T, G, dk), cs, gd)
        ks = b.op(p + "k_sin", "Mul", [krh, sin_b], (T, G, dk), cs, gd)
        krope = b.op(p + "k_rope", "Add", [kc, ks], (T, G, dk), cs, gd)

        kcache = b.op(
            p + "k_cache", "CacheAppend", [krope], (G, T, dk), cs, ("grp", "kpos", "col"),
            {"cache": f"kv_cache_k_{i}", "perm": [1, 0, 2]},
        )
        vdims = ("grp", "dcol", "kpos")
        vt = b.op(p + "v_t", "Transpose", [vh], (G, dk, T), 1, vdims, {"perm": [1, 2, 0]})
        vcache = b.op(p + "v_cache", "CacheAppend", [vt], (G, dk, T), 1, vdims, {"cache": f"kv_cache_v_{i}"})
        persistent += [kcache, vcache]

        sdims = ("pos", "head", "kpos")
        scores = b.op(
            p + "scores", "MatMul", [qrope, kcache], (T, H, T), 1, sdims,
            {"transpose_b": True, "batch": [["head", "grp", ratio]], "causal": ["pos", "kpos"]},
        )
        probs = b.op(p + "probs", "Softmax", [scores], (T, H, T), 1, sdims)
        attn = b.op(
            p + "attn", "MatMul", [probs, vcache], (T, H, dk), cs, hd,
            {"transpose_b": True, "batch": [["head", "grp", ratio]]},
        )
        merged = b.op(p + "attn_merge", "Reshape", [attn], (T, d), cs, SEQ, {"shape": [-1, d]})
        o = b.op(p + "o_proj", "MatMul", [merged, w["wo"]], (T, d), cs, SEQ)
        h1 = b.op(p + "resid1", "Add", [h, o], (T, d), cs, SEQ)
        fn = b.op(p + "ffn_norm", "RMSNorm", [h1], (T, d), cs, SEQ, {"epsilon": m.norm_eps})
        fnw = b.op(p + "ffn_norm_w", "Mul", [fn, w["ffn_norm_g"]], (T, d), cs, SEQ)
        if m.experts:
            ffn_out = _moe_block(b, m, p, fnw)
        else:
            ffn_out = _swiglu_block(b, m, p, fnw)
        h = b.op(p + "resid2", "Add", [h1, ffn_out], (T, d), cs, SEQ)

    fnorm = b.op("final_norm", "RMSNorm", [h], (T, d), cs, SEQ, {"epsilon": m.norm_eps})
    fnorm_w = b.op("final_norm_w", "Mul", [fnorm, "final_norm_g"], (T, d), cs, SEQ)
    logits = b.op("logits", "MatMul", [fnorm_w, "lm_head"], (T, m.vocab_size), cs, SEQ)
    return b.doc([logits, h], persistent)


def _swiglu_block(b: _Builder, m: ModelManifest, p: str, x: str) -> str:
    cs, d, f, T = m.chunk_size, m.d_model, m.ffn_hidden, m.table_length
    w1 = b.tensor(p + "w1", (d, f), "weight", cs)
    b1 = b.tensor(p + "b1", (f,), "weight", cs)
    w2 = b.tensor(p + "w2", (d, f), "weight", cs)
    b2 = b.tensor(p + "b2", (f,), "weight", cs)
    w3 = b.tensor(p + "w3", (f, d), "weight", cs)
    up = b.op(p + "up", "MatMul", [x, w1], (T, f), cs, SEQ)
    gate = b.op(p + "gate", "MatMul", [x, w2], (T, f), cs, SEQ)
    up_b = b.op(p + "up_b", "Add", [up, b1], (T, f), cs, SEQ)
    gate_b = b.op(p + "gate_b", "Add", [gate, b2], (T, f), cs, SEQ)
    sig = b.op(p + "gate_sig", "Sigmoid", [gate_b], (T, f), cs, SEQ)
    swish = b.op(p + "gate_swish", "Mul", [gate_b, sig], (T, f), cs, SEQ)
    glu = b.op(p + "glu", "Mul", [up_b, swish], (T, f), cs, SEQ)
    return b.op(p + "down", "MatMul", [glu, w3], (T, d), cs, SEQ)


def _moe_block(b: _Builder, m: ModelManifest, p: str, x: str) -> str:
    cs, d, f, T, E = m.chunk_size, m.d_model, m.ffn_hidden, m.table_length, m.experts
    router = b.tensor(p + "router", (d, E), "weight", cs)
    edims = ("expert_id", "row_id", "col")
    w1 = b.tensor(p + "e_w1", (E, d, f), "weight", cs, edims)
    w2 = b.tensor(p + "e_w2", (E, d, f), "weight", cs, edims)
    w3 = b.tensor(p + "e_w3", (E, f, d), "weight", cs, edims)
    rd = ("pos", "col")
    logits = b.op(p + "router_logits", "MatMul", [x, router], (T, E), 1, rd)
    probs = b.op(p + "router_probs", "Softmax", [logits], (T, E), 1, rd)
    top = b.op(p + "router_topk", "TopK", [probs], (T, E), 1, rd, {"k": m.top_k})
    gates = b.op(p + "gates", "Normalize", [top], (T, E), 1, rd, {"f": "identity", "agg": "SUM", "g": "div"})
    xd = ("pos", "expert", "col")
    up = b.op(p + "up", "MatMul", [x, w1, gates], (T, E, f), cs, xd, {"route_dim": "expert_id"})
    gate = b.op(p + "gate", "MatMul", [x, w2, gates], (T, E, f), cs, xd, {"route_dim": "expert_id"})
    sig = b.op(p + "gate_sig", "Sigmoid", [gate], (T, E, f), cs, xd)
    swish = b.op(p + "gate_swish", "Mul", [gate, sig], (T, E, f), cs, xd)
    glu = b.op(p + "glu", "Mul", [up, swish], (T, E, f), cs, xd)
    down = b.op(
        p + "down", "MatMul", [glu, w3], (T, E, d), cs, xd,
        {"batch": [["expert", "expert_id", 1]]},
    )
    down_t = b.op(p + "down_t", "Transpose", [down], (T, d, E), 1, ("pos", "dcol", "expert"), {"perm": [0, 2, 1]})
    gates_r = b.op(p + "gates_r", "Reshape", [gates], (T, 1, E), 1, ("pos", "one", "col"), {"shape": [-1, 1, E]})
    mix = b.op(
        p + "moe_mix", "MatMul", [gates_r, down_t], (T, 1, d), cs, ("pos", "one", "col"),
        {"transpose_b": True, "batch": [["pos", "pos", 1]]},
    )
    return b.op(p + "moe_out", "Reshape", [mix], (T, d), cs, SEQ, {"shape": [-1, d]})


def conv_document(spec: ConvSpec = TINY_CONV) -> dict[str, Any]:
    """Graph-IR document of one convolution (+ optional ReLU) via im2col."""
    b = _Builder("tiny_conv")
    oh = (spec.height + 2 * spec.pad - spec.kh) // spec.stride + 1
    ow = (spec.width + 2 * spec.pad - spec.kw) // spec.stride + 1
    patch = spec.kh * spec.kw * spec.channels
    b.tensor("image", (spec.height, spec.width, spec.channels), "input", spec.chunk_size, ("h", "w", "col"))
    b.tensor("conv_w", (patch, spec.kernels), "weight", spec.chunk_size)
    cols = b.op(
        "im2col", "Im2Col", ["image"], (oh * ow, patch), spec.chunk_size, ("patch", "col"),
        {"kh": spec.kh, "kw": spec.kw, "stride": spec.stride, "pad": spec.pad},
    )
    out = b.op("conv", "MatMul", [cols, "conv_w"], (oh * ow, spec.kernels), spec.out_chunk, ("patch", "col"))
    if spec.relu:
        out = b.op("conv_relu", "Relu", [out], (oh * ow, spec.kernels), spec.out_chunk, ("patch", "col"))
    return b.doc([out])


def attention_document(
    seq: int, heads: int, groups: int, head_dim: int, chunk_size: int = 1, causal: bool = True
) -> dict[str, Any]:
    """Graph-IR document of one grouped-query attention block.

    Inputs use the cache layouts of the transformer graphs: ``q`` is
    (T, H, dk), ``k`` is (G, T, dk) and ``v`` is (G, dk, T).
    """
    if heads % groups:
        raise ValueError("heads must be a multiple of groups")
    b = _Builder(f"attention_h{heads}_g{groups}")
    T, H, G, dk, cs = seq, heads, groups, head_dim, chunk_size
    hd = ("pos", "head", "col")
    q = b.tensor("q", (T, H, dk), "input", cs, hd)
    k = b.tensor("k", (G, T, dk), "input", cs, ("grp", "kpos", "col"))
    v = b.tensor("v", (G, dk, T), "input", 1, ("grp", "dcol", "kpos"))
    qs = b.op("q_scale", "Scale", [q], (T, H, dk), cs, hd, {"alpha": 1.0 / float(np.sqrt(dk))})
    sdims = ("pos", "head", "kpos")
    attr: dict[str, Any] = {"transpose_b": True, "batch": [["head", "grp", H // G]]}
    if causal:
        attr["causal"] = ["pos", "kpos"]
    scores = b.op("scores", "MatMul", [qs, k], (T, H, T), 1, sdims, attr)
    probs = b.op("probs", "Softmax", [scores], (T, H, T), 1, sdims)
    out = b.op(
        "attn", "MatMul", [probs, v], (T, H, dk), cs, hd,
        {"transpose_b": True, "batch": [["head", "grp", H // G]]},
    )
    return b.doc([out])


def build_graph_for(m: ModelManifest) -> Graph:
    return parse_graph(transformer_document(m))


# ---------------------------------------------------------------------------
# weights


def rotate_half_matrix(heads: int, head_dim: int) -> np.ndarray:
    """Block-diagonal R with (x R) = rotate_half(x) independently per head."""
    half = head_dim // 2
    r = np.zeros((head_dim, head_dim))
    for j in range(half):
        r[j + half, j] = -1.0
        r[j, j + half] = 1.0
    return np.kron(np.eye(heads), r)


def init_weights(m: ModelManifest, seed: int | None = None) -> dict[str, np.ndarray]:
    """Seeded float32 weights for a transformer manifest (biases are zero)."""
    rng = np.random.default_rng(m.seed if seed is None else seed)
    d, f, V = m.d_model, m.ffn_hidden, m.vocab_size

    def normal(shape: tuple[int, ...], std: float) -> np.ndarray:
        return (rng.standard_normal(shape) * std).astype(np.float32)

    w: dict[str, np.ndarray] = {}
    w["embed"] = normal((V, d), 1.0)
    cos, sin = rope_tables(m.table_length, m.head_dim, m.rope_theta)
    w["rope_cos"] = cos.astype(np.float32)
    w["rope_sin"] = sin.astype(np.float32)
    for i in range(m.layers):
        p = f"l{i}_"
        w[p + "attn_norm_g"] = (1.0 + normal((d,), 0.1)).astype(np.float32)
        w[p + "wq"] = normal((d, d), d ** -0.5)
        w[p + "wk"] = normal((d, m.kv_width), d ** -0.5)
        w[p + "wv"] = normal((d, m.kv_width), d ** -0.5)
        w[p + "wo"] = normal((d, d), d ** -0.5)
        w[p + "rot_q"] = rotate_half_matrix(m.heads, m.head_dim).astype(np.float32)
        w[p + "rot_k"] = rotate_half_matrix(m.kv_groups, m.head_dim).astype(np.float32)
        w[p + "ffn_norm_g"] = (1.0 + normal((d,), 0.1)).astype(np.float32)
        if m.experts:
            E = m.experts
            w[p + "router"] = normal((d, E), d ** -0.5)
            w[p + "e_w1"] = normal((E, d, f), d ** -0.5)
            w[p + "e_w2"] = normal((E, d, f), d ** -0.5)
            w[p + "e_w3"] = normal((E, f, d), f ** -0.5)
        else:
            w[p + "w1"] = normal((d, f), d ** -0.5)
            w[p + "b1"] = np.zeros(f, dtype=np.float32)
            w[p + "w2"] = normal((d, f), d ** -0.5)
            w[p + "b2"] = np.zeros(f, dtype=np.float32)
            w[p + "w3"] = normal((f, d), f ** -0.5)
    w["final_norm_g"] = (1.0 + normal((d,), 0.1)).astype(np.float32)
    w["lm_head"] = normal((d, V), 2.0 * d ** -0.5)
    return w


def init_conv_weights(spec: ConvSpec = TINY_CONV) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """(weights, inputs) for the convolution fixture; kernels are (K, C, kh, kw)."""
    from .oracle import conv_weight_matrix

    rng = np.random.default_rng(spec.seed)
    kernels = rng.uniform(-1, 1, (spec.kernels, spec.channels, spec.kh, spec.kw)).astype(np.float32)
    image = rng.uniform(-1, 1, (spec.height, spec.width, spec.channels)).astype(np.float32)
    return {"conv_w": conv_weight_matrix(kernels).astype(np.float32)}, {"image": image}


FIXTURES: dict[str, ModelManifest] = {"tiny_dense": TINY_DENSE, "tiny_moe": TINY_MOE}


def fixture(name: str, seed: int | None = None) -> tuple[ModelManifest, Graph, dict[str, np.ndarray]]:
    """(manifest, authored graph, weights) for a named transformer fixture."""
    m = FIXTURES[name]
    if seed is not None:
        m = m.replace(seed=seed)
    return m, build_graph_for(m), init_weights(m)
