"""Dense reference interpreter.

Every operator the compiler lowers to SQL has a plain numpy counterpart here.
Values are float64 arrays; weights arrive as float32 and are widened, which
mirrors the database (32-bit storage, 64-bit arithmetic).  The functions are
pure and deterministic.

Two independent paths exist for end-to-end checks: :func:`ref_forward`
interprets a :class:`~tensql.graph_ir.Graph` node by node, while
:func:`ref_transformer` is a hand-written model forward pass that never looks
at the graph.
"""

from __future__ import annotations

from typing import Any, Mapping, Sequence

import numpy as np

from .errors import ShapeError
from .graph_ir import (
    FN_OF_OP,
    Graph,
    OpNode,
    conv_out_hw,
    normalization_attr,
    reshape_attr,
    topo_sort,
)

DenseTensor = np.ndarray

# Fill value for attention scores removed by the causal predicate.
MASKED = -np.inf


def as_dense(x: Any) -> DenseTensor:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# primitive operators


def ref_matmul(a: Any, b: Any) -> DenseTensor:
    """Plain 2-D matrix product with 64-bit accumulation."""
    a, b = as_dense(a), as_dense(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            out[i, j] = float(np.dot(a[i], b[:, j]))
    return out


def ref_softmax(a: Any, axis: int = -1) -> DenseTensor:
    a = as_dense(a)
    m = np.max(a, axis=axis, keepdims=True)
    with np.errstate(invalid="ignore"):
        e = np.exp(a - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def ref_rmsnorm(x: Any, gamma: Any | None = None, eps: float = 1e-5) -> DenseTensor:
    """x * gamma / sqrt(mean(x^2) + eps) over the last axis."""
    x = as_dense(x)
    y = x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    if gamma is not None:
        gamma = as_dense(gamma)
        if gamma.shape != x.shape[-1:]:
            raise ShapeError(f"gamma shape {gamma.shape} does not match {x.shape}")
        y = y * gamma
    return y


def sigmoid(x: Any) -> DenseTensor:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-as_dense(x)))


def ref_swiglu(h: Any, w1: Any, b1: Any, w2: Any, b2: Any) -> DenseTensor:
    """(h W1 + b1) * Swish(h W2 + b2) with Swish(x) = x * sigmoid(x)."""
    h = as_dense(h)
    left = h @ as_dense(w1) + as_dense(b1)
    right = h @ as_dense(w2) + as_dense(b2)
    return left * (right * sigmoid(right))


def ref_attention_gqa(
    q: Any,
    k: Any,
    v: Any,
    groups: int,
    causal: bool = True,
    scale: float | None = None,
) -> DenseTensor:
    """Grouped-query attention.

    ``q`` is (T, H, dk); ``k`` and ``v`` are (S, G, dk) with ``G == groups``.
    Head ``h`` reads key/value group ``h // (H // G)``.  With ``causal`` the
    query at row ``t`` sees keys ``0 .. t + S - T``.
    """
    q, k, v = as_dense(q), as_dense(k), as_dense(v)
    if q.ndim != 3 or k.ndim != 3 or v.shape != k.shape:
        raise ShapeError("expected q (T,H,dk) and k, v (S,G,dk)")
    t_len, heads, dk = q.shape
    s_len = k.shape[0]
    if k.shape[1] != groups or heads % groups or k.shape[2] != dk:
        raise ShapeError(f"{heads} heads cannot share {k.shape[1]} groups of width {k.shape[2]}")
    if scale is None:
        scale = 1.0 / np.sqrt(dk)
    per = heads // groups
    out = np.zeros_like(q)
    for h in range(heads):
        g = h // per
        scores = (q[:, h, :] @ k[:, g, :].T) * scale
        if causal:
            offset = s_len - t_len
            mask = np.arange(s_len)[None, :] > (np.arange(t_len)[:, None] + offset)
            scores = np.where(mask, MASKED, scores)
        out[:, h, :] = ref_softmax(scores) @ v[:, g, :]
    return out


def _masked_softmax_rows(scores: np.ndarray, causal: bool) -> np.ndarray:
    t_len, s_len = scores.shape[-2:]
    if causal:
        mask = np.arange(s_len)[None, :] > (np.arange(t_len)[:, None] + (s_len - t_len))
        scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


def ref_attention_mha(q: Any, k: Any, v: Any, causal: bool = True, scale: float | None = None) -> DenseTensor:
    """Multi-head attention: every head has its own keys; k, v are (S, H, dk)."""
    q, k, v = as_dense(q), as_dense(k), as_dense(v)
    scale = 1.0 / np.sqrt(q.shape[-1]) if scale is None else scale
    scores = np.einsum("thd,shd->hts", q, k) * scale
    return np.einsum("hts,shd->thd", _masked_softmax_rows(scores, causal), v)


def ref_attention_mqa(q: Any, k: Any, v: Any, causal: bool = True, scale: float | None = None) -> DenseTensor:
    """Multi-query attention: all heads share one key/value set; k, v are (S, dk)."""
    q, k, v = as_dense(q), as_dense(k), as_dense(v)
    scale = 1.0 / np.sqrt(q.shape[-1]) if scale is None else scale
    scores = np.einsum("thd,sd->hts", q, k) * scale
    return np.einsum("hts,sd->thd", _masked_softmax_rows(scores, causal), v)


def top_k_gates(logits: Any, top_k: int) -> DenseTensor:
    """Softmax over experts, keep the k largest (ties: lower id), renormalize."""
    p = ref_softmax(logits)
    keep = ref_topk(p, top_k)
    return keep / np.sum(keep, axis=-1, keepdims=True)


def ref_topk(x: Any, k: int) -> DenseTensor:
    """Zero all but the k largest entries of each row (ties to the lower index)."""
    x = as_dense(x)
    order = np.argsort(-x, axis=-1, kind="stable")[..., :k]
    out = np.zeros_like(x)
    np.put_along_axis(out, order, np.take_along_axis(x, order, axis=-1), axis=-1)
    return out


def ref_moe_ffn(
    h: Any,
    gate_w: Any,
    experts: Sequence[Mapping[str, Any]],
    top_k: int,
) -> DenseTensor:
    """Mixture of SwiGLU experts with softmax-then-renormalized top-k gating.

    Each expert is a mapping with ``w1``, ``w2`` (d x ffn), ``w3`` (ffn x d)
    and optional biases ``b1``, ``b2``.
    """
    h = as_dense(h)
    gates = top_k_gates(h @ as_dense(gate_w), top_k)
    out = np.zeros_like(h)
    for e, ex in enumerate(experts):
        ffn = as_dense(ex["w1"]).shape[1]
        b1 = ex.get("b1", np.zeros(ffn))
        b2 = ex.get("b2", np.zeros(ffn))
        y = ref_swiglu(h, ex["w1"], b1, ex["w2"], b2) @ as_dense(ex["w3"])
        sel = gates[:, e] != 0
        out[sel] += gates[sel, e : e + 1] * y[sel]
    return out


def ref_conv2d(
    image: Any,
    kernels: Any,
    stride: int = 1,
    pad: int = 0,
    method: str = "direct",
) -> DenseTensor:
    """2-D cross-correlation of a (C, H, W) image with (K, C, kh, kw) kernels.

    ``method`` selects the sliding-window loop (``direct``) or the patch
    matrix product (``im2col``); both return (K, OH, OW).
    """
    x = as_dense(image)
    w = as_dense(kernels)
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"image {x.shape} incompatible with kernels {w.shape}")
    c, hgt, wid = x.shape
    kn, _, kh, kw = w.shape
    oh, ow = conv_out_hw(hgt, wid, {"kh": kh, "kw": kw, "stride": stride, "pad": pad})
    if oh < 1 or ow < 1:
        raise ShapeError("kernel larger than padded image")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    if method == "direct":
        out = np.zeros((kn, oh, ow))
        for k in range(kn):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[:, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[k, i, j] = float(np.sum(patch * w[k]))
        return out
    if method == "im2col":
        cols = ref_im2col(np.transpose(x, (1, 2, 0)), kh, kw, stride, pad)
        wmat = conv_weight_matrix(w)
        return (cols @ wmat).T.reshape(kn, oh, ow)
    raise ValueError(f"unknown convolution method {method!r}")


def ref_im2col(image_hwc: Any, kh: int, kw: int, stride: int = 1, pad: int = 0) -> DenseTensor:
    """Patch matrix (OH*OW, kh*kw*C); column order is (ki, kj, channel)."""
    x = as_dense(image_hwc)
    hgt, wid, c = x.shape
    oh, ow = conv_out_hw(hgt, wid, {"kh": kh, "kw": kw, "stride": stride, "pad": pad})
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    out = np.zeros((oh * ow, kh * kw * c))
    for i in range(oh):
        for j in range(ow):
            patch = xp[i * stride : i * stride + kh, j * stride : j * stride + kw, :]
            out[i * ow + j] = patch.reshape(-1)
    return out


def conv_weight_matrix(kernels: Any) -> np.ndarray:
    """(K, C, kh, kw) kernels -> (kh*kw*C, K) matrix matching :func:`ref_im2col`."""
    w = np.asarray(kernels)
    kn = w.shape[0]
    return np.transpose(w, (2, 3, 1, 0)).reshape(-1, kn)


# ---------------------------------------------------------------------------
# graph interpreter


def _matmul_node(node: OpNode, g: Graph, vals: Mapping[str, np.ndarray]) -> np.ndarray:
    spec = g.matmul_spec(node)
    a = vals[node.inputs[0]]
    b = vals[node.inputs[1]]
    route = vals[node.inputs[2]] if spec.route is not None else None
    if spec.transpose_b:
        b = np.swapaxes(b, -1, -2)
    # b is now (batch..., r, n)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"node {node.id}: contraction {a.shape[-1]} vs {b.shape[-2]}")
    a_dims = list(spec.a.dims[:-1])
    b_batch = list(spec.b_batch)
    pair_of = {p[1]: (a_dims.index(p[0]), p[2]) for p in spec.pairs}
    free_axes = [b_batch.index(d) for d in spec.b_free]
    route_axis = b_batch.index(spec.route_dim) if spec.route_dim else None
    causal = None
    if spec.causal:
        causal = a_dims.index(spec.causal[0])
    free_shape = [b.shape[i] for i in free_axes]
    n_experts = b.shape[route_axis] if route_axis is not None else None
    out_shape = free_shape + list(a.shape[:-1])
    if n_experts is not None:
        out_shape.append(n_experts)
    out_shape.append(b.shape[-1])
    out = np.zeros(out_shape)
    for a_idx in np.ndindex(*a.shape[:-1]):
        row = a[a_idx]
        sel: list[Any] = [slice(None)] * len(b_batch)
        for d, (ax, ratio) in pair_of.items():
            sel[b_batch.index(d)] = a_idx[ax] // ratio
        bsel = b[tuple(sel)]  # remaining axes: free..., [expert], r, n in batch order
        prod = np.einsum("r,...rn->...n", row, bsel)
        if route_axis is not None:
            # remaining B axes are the unpaired batch axes, in declaration order
            remaining = [d for d in b_batch if d not in pair_of]
            prod = np.moveaxis(prod, remaining.index(spec.route_dim), -2)
            prod = prod * (route[a_idx] != 0)[:, None]
        if causal is not None:
            limit = a_idx[causal]
            prod = prod.copy()
            prod[..., limit + 1 :] = MASKED
        out[(slice(None),) * len(free_shape) + tuple(a_idx)] = prod
    return out


def _normalization_node(node: OpNode, x: np.ndarray) -> np.ndarray:
    na = normalization_attr(node.op, node.attr)
    if na.agg == "TOPK":
        return ref_topk(x, na.k)
    present = np.isfinite(x)
    with np.errstate(invalid="ignore", over="ignore"):
        if na.stable:
            m = np.max(x, axis=-1, keepdims=True)
            fx = np.exp(x - m)
        elif na.f == "exp":
            fx = np.exp(x)
        elif na.f == "square":
            fx = x * x
        else:
            fx = np.where(present, x, 0.0) if na.agg != "MAX" else x
    if na.agg == "SUM":
        s = np.sum(fx, axis=-1, keepdims=True)
    elif na.agg == "MEAN":
        s = np.sum(fx, axis=-1, keepdims=True) / x.shape[-1]
    else:
        s = np.max(fx, axis=-1, keepdims=True)
    if na.g == "identity":
        return s
    if na.g == "div":
        return fx / s
    return x / np.sqrt(s + na.epsilon)


def _apply_fn(name: str, x: np.ndarray, attr: Mapping[str, Any]) -> np.ndarray:
    with np.errstate(over="ignore"):
        if name == "sigmoid":
            return sigmoid(x)
        if name == "silu":
            return x * sigmoid(x)
        if name == "exp":
            return np.exp(x)
        if name == "relu":
            return np.maximum(x, 0.0)
        if name == "square":
            return x * x
        if name == "identity":
            return x.copy()
        if name == "neg":
            return -x
        if name == "scale":
            return x * float(attr["alpha"])
    raise ValueError(f"unknown element function {name!r}")


def eval_node(node: OpNode, g: Graph, vals: Mapping[str, np.ndarray]) -> np.ndarray:
    """Evaluate one node given the values of its inputs."""
    ins = [vals[t] for t in node.inputs]
    op = node.op
    cat = node.category
    if cat == "matmul":
        return _matmul_node(node, g, vals)
    if cat == "elementwise_fn":
        return _apply_fn(FN_OF_OP[op], ins[0], node.attr)
    if cat == "elementwise_arith":
        a, b = ins
        if op == "Add":
            return a + b
        if op == "Sub":
            return a - b
        return a * b
    if cat == "reshape":
        ra = reshape_attr(node.attr)
        shape = list(ra.shape)
        if shape[0] == -1:
            shape[0] = ins[0].size // int(np.prod(shape[1:]))
        return np.transpose(ins[0].reshape(shape), ra.perm)
    if cat == "normalization":
        return _normalization_node(node, ins[0])
    if op == "Gather":
        table, ids = ins
        ids = np.asarray(ids, dtype=np.int64)
        key = node.attr.get("key", "token")
        rows = ids if key == "token" else np.arange(len(ids))
        if rows.size and (rows.min() < 0 or rows.max() >= table.shape[0]):
            raise ShapeError(f"node {node.id}: lookup key outside the table")
        return table[rows]
    if op == "Im2Col":
        a = node.attr
        return ref_im2col(ins[0], int(a["kh"]), int(a["kw"]), int(a["stride"]), int(a["pad"]))
    if cat == "slice":
        x = ins[0]
        sel = [slice(None)] * x.ndim
        for ax, s, e in zip(node.attr["axes"], node.attr["starts"], node.attr["stops"]):
            sel[ax] = slice(s, e)
        x = x[tuple(sel)]
        sq = tuple(sorted({a % x.ndim for a in node.attr["squeeze"]}))
        return np.squeeze(x, axis=sq) if sq else x
    if op == "CacheAppend":
        # The reference recomputes every position, so the cache starts empty.
        return np.transpose(ins[0], node.attr["perm"])
    if op == "Concat":
        return np.concatenate(ins, axis=node.attr["axis"])
    if cat == "transpose_fallback":
        return np.transpose(ins[0], node.attr["perm"])
    raise ValueError(f"no reference for operator {op!r}")  # pragma: no cover


def ref_forward(
    g: Graph,
    weights: Mapping[str, Any],
    inputs: Mapping[str, Any] | None = None,
    tokens: Sequence[int] | None = None,
    keep_all: bool = False,
) -> dict[str, np.ndarray]:
    """Interpret ``g`` and return the values of its outputs.

    ``tokens`` is a shortcut that binds every 1-D input consumed as lookup ids.
    With ``keep_all`` every intermediate value is returned as well.
    """
    vals: dict[str, np.ndarray] = {}
    for name, decl in g.tensors.items():
        if decl.is_static:
            if name not in weights:
                raise ShapeError(f"missing value for {decl.kind} tensor {name!r}")
            vals[name] = as_dense(weights[name])
    inputs = dict(inputs or {})
    if tokens is not None:
        for n in g.nodes:
            if n.op == "Gather":
                inputs.setdefault(n.inputs[1], np.asarray(tokens, dtype=np.int64))
    for name, decl in g.tensors.items():
        if decl.kind == "input":
            if name not in inputs:
                raise ShapeError(f"missing value for input tensor {name!r}")
            arr = np.asarray(inputs[name])
            vals[name] = arr if arr.dtype.kind in "iu" else as_dense(arr)
    for node in topo_sort(g):
        vals[node.output] = eval_node(node, g, vals)
    if keep_all:
        return vals
    return {t: vals[t] for t in g.outputs}


def logits_output(g: Graph) -> str:
    """Name of the graph output holding next-token logits."""
    for t in g.outputs:
        if t == "logits" or t.endswith("logits"):
            return t
    return g.outputs[0]


def ref_greedy_decode(
    g: Graph,
    weights: Mapping[str, Any],
    prompt: Sequence[int],
    steps: int,
    return_logits: bool = False,
) -> list[int] | tuple[list[int], list[np.ndarray]]:
    """Greedy generation by full recomputation; returns ``steps + 1`` tokens.

    The first token comes from the prompt forward pass (prefill), each further
    token from the sequence extended by the previous choice.  Ties resolve to
    the smallest token id.
    """
    seq = [int(t) for t in prompt]
    if not seq:
        raise ShapeError("empty prompt")
    out: list[int] = []
    rows: list[np.ndarray] = []
    name = logits_output(g)
    for _ in range(steps + 1):
        logits = ref_forward(g, weights, tokens=seq)[name]
        last = logits[-1]
        tok = int(np.argmax(last))
        out.append(tok)
        rows.append(last)
        seq.append(tok)
    if return_logits:
        return out, rows
    return out


def argmax_gap(row: np.ndarray) -> float:
    """Margin between the largest and second largest logit."""
    top = np.sort(np.asarray(row))[-2:]
    return float(top[1] - top[0])


# ---------------------------------------------------------------------------
# independent model forward


def rope_tables(table_length: int, head_dim: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables (table_length, head_dim) for half-split rotary pairing."""
    half = head_dim // 2
    inv = theta ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    ang = np.arange(table_length, dtype=np.float64)[:, None] * inv[None, :]
    ang = np.concatenate([ang, ang], axis=1)
    return np.cos(ang), np.sin(ang)


def apply_rope(x: np.ndarray, positions: np.ndarray, theta: float) -> np.ndarray:
    """Rotate (T, heads, dk) by position: x*cos + rotate_half(x)*sin."""
    dk = x.shape[-1]
    half = dk // 2
    inv = theta ** (-np.arange(half, dtype=np.float64) * 2.0 / dk)
    ang = positions[:, None].astype(np.float64) * inv[None, :]
    cos = np.cos(np.concatenate([ang, ang], axis=1))[:, None, :]
    sin = np.sin(np.concatenate([ang, ang], axis=1))[:, None, :]
    rot = np.concatenate([-x[..., half:], x[..., :half]], axis=-1)
    return x * cos + rot * sin


def ref_transformer(manifest: Any, weights: Mapping[str, Any], tokens: Sequence[int]) -> np.ndarray:
    """Logits (T, vocab) of the fixture transformer, written out by hand.

    Uses the raw (unfolded, unfused) weights named ``embed``, ``lm_head``,
    ``final_norm_g`` and ``l<i>_<name>`` per layer.
    """
    w = {k: as_dense(v) for k, v in weights.items()}
    toks = np.asarray(tokens, dtype=np.int64)
    pos = np.arange(len(toks))
    h_heads, g_groups, dk = manifest.heads, manifest.kv_groups, manifest.head_dim
    theta = manifest.rope_theta
    x = w["embed"][toks]
    for i in range(manifest.layers):
        p = f"l{i}_"
        a = ref_rmsnorm(x, w[p + "attn_norm_g"], manifest.norm_eps)
        q = (a @ w[p + "wq"]).reshape(len(toks), h_heads, dk)
        k = (a @ w[p + "wk"]).reshape(len(toks), g_groups, dk)
        v = (a @ w[p + "wv"]).reshape(len(toks), g_groups, dk)
        q = apply_rope(q, pos, theta)
        k = apply_rope(k, pos, theta)
        att = ref_attention_gqa(q, k, v, g_groups, causal=True)
        x = x + att.reshape(len(toks), -1) @ w[p + "wo"]
        f = ref_rmsnorm(x, w[p + "ffn_norm_g"], manifest.norm_eps)
        if manifest.experts:
            experts = [
                {"w1": w[p + "e_w1"][e], "w2": w[p + "e_w2"][e], "w3": w[p + "e_w3"][e]}
                for e in range(manifest.experts)
            ]
            x = x + ref_moe_ffn(f, w[p + "router"], experts, manifest.top_k)
        else:
            y = ref_swiglu(f, w[p + "w1"], w[p + "b1"], w[p + "w2"], w[p + "b2"])
            x = x + y @ w[p + "w3"]
    x = ref_rmsnorm(x, w["final_norm_g"], manifest.norm_eps)
    return x @ w["lm_head"]
