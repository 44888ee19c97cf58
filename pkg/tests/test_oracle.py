"""The numpy reference implementation, checked against independent formulations."""

from __future__ import annotations

import numpy as np
import pytest

from tensql.errors import ShapeError
from tensql.models import ConvSpec, conv_document, init_conv_weights, prompt_tokens
from tensql.graph_ir import parse_graph
from tensql.oracle import (
    argmax_gap,
    conv_weight_matrix,
    ref_attention_gqa,
    ref_attention_mha,
    ref_attention_mqa,
    ref_conv2d,
    ref_forward,
    ref_greedy_decode,
    ref_im2col,
    ref_matmul,
    ref_moe_ffn,
    ref_rmsnorm,
    ref_softmax,
    ref_swiglu,
    ref_topk,
    ref_transformer,
    top_k_gates,
)

rng = np.random.default_rng(0)


def test_matmul_matches_numpy():
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    np.testing.assert_allclose(ref_matmul(a, b), a @ b, atol=1e-12)


def test_matmul_identity():
    a = rng.standard_normal((4, 4))
    np.testing.assert_array_equal(ref_matmul(a, np.eye(4)), a)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        ref_matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(ref_softmax([0.0, 0.0, 0.0]), [1 / 3] * 3)


def test_softmax_is_shift_invariant_and_handles_large_values():
    x = np.array([1000.0, 1001.0, 1002.0])
    np.testing.assert_allclose(ref_softmax(x), ref_softmax(x - 1000.0))
    assert np.isfinite(ref_softmax(x)).all()


def test_rmsnorm_unit_rms():
    x = rng.standard_normal((3, 16))
    y = ref_rmsnorm(x, eps=0.0)
    np.testing.assert_allclose(np.sqrt(np.mean(y * y, axis=-1)), 1.0)


def test_swiglu_formula():
    h = rng.standard_normal((2, 4))
    w1, w2 = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    b1, b2 = rng.standard_normal(6), rng.standard_normal(6)
    left, right = h @ w1 + b1, h @ w2 + b2
    np.testing.assert_allclose(ref_swiglu(h, w1, b1, w2, b2), left * right / (1 + np.exp(-right)))


def test_topk_ties_prefer_lower_index():
    out = ref_topk([[0.5, 0.5, 0.5, 0.1]], 2)
    np.testing.assert_array_equal(out, [[0.5, 0.5, 0.0, 0.0]])


def test_top_k_gates_renormalize():
    g = top_k_gates(rng.standard_normal((3, 8)), 2)
    assert ((g > 0).sum(axis=1) == 2).all()
    np.testing.assert_allclose(g.sum(axis=1), 1.0)


def test_moe_with_all_experts_selected_is_gated_sum():
    h = rng.standard_normal((2, 4))
    gate_w = rng.standard_normal((4, 3))
    experts = [
        {"w1": rng.standard_normal((4, 5)), "w2": rng.standard_normal((4, 5)), "w3": rng.standard_normal((5, 4))}
        for _ in range(3)
    ]
    p = ref_softmax(h @ gate_w)
    want = sum(
        p[:, [e]] * (ref_swiglu(h, x["w1"], 0, x["w2"], 0) @ x["w3"]) for e, x in enumerate(experts)
    )
    np.testing.assert_allclose(ref_moe_ffn(h, gate_w, experts, 3), want, atol=1e-12)


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_gqa_with_one_group_per_head_is_mha(heads):
    q = rng.standard_normal((5, heads, 8))
    k, v = rng.standard_normal((5, heads, 8)), rng.standard_normal((5, heads, 8))
    np.testing.assert_allclose(ref_attention_gqa(q, k, v, heads), ref_attention_mha(q, k, v), atol=1e-12)


def test_gqa_with_one_group_is_mqa():
    q = rng.standard_normal((6, 4, 8))
    k, v = rng.standard_normal((6, 1, 8)), rng.standard_normal((6, 1, 8))
    np.testing.assert_allclose(ref_attention_gqa(q, k, v, 1), ref_attention_mqa(q, k[:, 0], v[:, 0]), atol=1e-12)


def test_causal_first_row_attends_to_first_key_only():
    q, k, v = rng.standard_normal((3, 2, 4)), rng.standard_normal((3, 2, 4)), rng.standard_normal((3, 2, 4))
    out = ref_attention_gqa(q, k, v, 2)
    np.testing.assert_allclose(out[0], v[0])


@pytest.mark.parametrize("kernel,stride,pad", [(1, 1, 0), (3, 1, 1), (3, 2, 0), (5, 2, 2)])
def test_direct_conv_equals_im2col(kernel, stride, pad):
    x = rng.standard_normal((3, 9, 9))
    w = rng.standard_normal((4, 3, kernel, kernel))
    direct = ref_conv2d(x, w, stride, pad, method="direct")
    lowered = ref_conv2d(x, w, stride, pad, method="im2col")
    np.testing.assert_allclose(direct, lowered, atol=1e-10)


def test_im2col_row_order():
    x = np.arange(2 * 2 * 1, dtype=float).reshape(2, 2, 1)
    np.testing.assert_array_equal(ref_im2col(x, 2, 2), [[0, 1, 2, 3]])


def test_conv_graph_interpreter_matches_direct():
    spec = ConvSpec()
    w, inputs = init_conv_weights(spec)
    g = parse_graph(conv_document(spec))
    out = ref_forward(g, w, inputs)["conv_relu"]
    rng_w = np.random.default_rng(spec.seed)
    kern = rng_w.uniform(-1, 1, (spec.kernels, spec.channels, spec.kh, spec.kw))
    np.testing.assert_allclose(conv_weight_matrix(kern), w["conv_w"], atol=1e-7)
    direct = ref_conv2d(np.transpose(inputs["image"], (2, 0, 1)), kern.astype(np.float32), spec.stride, spec.pad)
    want = np.maximum(np.transpose(direct, (1, 2, 0)).reshape(-1, spec.kernels), 0)
    np.testing.assert_allclose(out, want, atol=1e-5)


@pytest.mark.parametrize("which", ["dense", "moe"])
def test_graph_interpreter_matches_handwritten_transformer(which, dense, moe):
    m, g, w, _ = dense if which == "dense" else moe
    toks = prompt_tokens(6)
    logits = ref_forward(g, w, tokens=toks)["logits"][: len(toks)]
    # the graph stores its rotary tables as float32 constants
    np.testing.assert_allclose(logits, ref_transformer(m, w, toks), atol=1e-6)


def test_greedy_decode_deterministic_and_gapped(dense):
    _, g, w, _ = dense
    toks, logits = ref_greedy_decode(g, w, prompt_tokens(4), 3, return_logits=True)
    assert toks == ref_greedy_decode(g, w, prompt_tokens(4), 3)
    assert len(toks) == 4
    assert min(argmax_gap(r) for r in logits) > 1e-3


def test_greedy_decode_rejects_empty_prompt(dense):
    _, g, w, _ = dense
    with pytest.raises(ShapeError):
        ref_greedy_decode(g, w, [], 1)
