import math

import numpy as np
import pytest

from mmtsvit import nn
from mmtsvit import tensor as T
from mmtsvit.errors import ConfigError
from mmtsvit.nn import AttentionParams, LinearParams
from mmtsvit.tensor import Tensor

from test_tensor import assert_grads_close


def softmax_rows(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def self_attention_oracle(tokens, wq, wk, wv, wo):
    """Single-head scaled dot-product attention by explicit scalar loops."""
    s, d = tokens.shape
    q = tokens @ wq
    k = tokens @ wk
    v = tokens @ wv
    scores = np.zeros((s, s))
    for i in range(s):
        for j in range(s):
            for a in range(d):
                scores[i, j] += q[i, a] * k[j, a]
            scores[i, j] /= math.sqrt(d)
    weights = softmax_rows(scores)
    out = np.zeros((s, d))
    for i in range(s):
        for j in range(s):
            out[i] += weights[i, j] * v[j]
    return out @ wo


def cross_attention_oracle(tokens_all, j, wq_all, wk_j, wv_j, wo_j):
    """Averaged cross-attention for modality j, single head, scalar loops."""
    m = len(tokens_all)
    s, d = tokens_all[j].shape
    k = tokens_all[j] @ wk_j
    v = tokens_all[j] @ wv_j
    acc = np.zeros((s, s))
    for i in range(m):
        if i == j:
            continue
        q_i = tokens_all[i] @ wq_all[i]
        acc += softmax_rows(q_i @ k.T / math.sqrt(d))
    weights = acc / (m - 1)
    return (weights @ v) @ wo_j


def make_attention(rng, d, heads):
    return AttentionParams(
        *(Tensor(rng.normal(size=(d, d)), requires_grad=True) for _ in range(4)),
        heads=heads,
    )


class TestSelfAttention:
    def test_single_token(self):
        rng = np.random.default_rng(0)
        p = make_attention(rng, 4, 1)
        tokens = rng.normal(size=(1, 1, 4))
        out = nn.self_attention(Tensor(tokens), p)
        # with one token the softmax weight is [[1.0]] and output is Wo.(V row)
        v = tokens[0] @ p.w_v.data
        np.testing.assert_allclose(out.data[0], v @ p.w_o.data, atol=1e-12)

    def test_identical_tokens_give_identical_outputs(self):
        rng = np.random.default_rng(1)
        p = make_attention(rng, 4, 2)
        row = rng.normal(size=4)
        tokens = np.tile(row, (1, 5, 1))
        out = nn.self_attention(Tensor(tokens), p).data
        np.testing.assert_allclose(out, np.tile(out[0, 0], (1, 5, 1)), atol=1e-12)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(2)
        p = make_attention(rng, 4, 1)
        tokens = rng.normal(size=(1, 3, 4))
        out = nn.self_attention(Tensor(tokens), p)
        expected = self_attention_oracle(
            tokens[0], p.w_q.data, p.w_k.data, p.w_v.data, p.w_o.data
        )
        np.testing.assert_allclose(out.data[0], expected, atol=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        p = make_attention(rng, 8, 2)
        tokens = rng.normal(size=(2, 6, 8))
        perm = rng.permutation(6)
        out = nn.self_attention(Tensor(tokens), p).data
        out_perm = nn.self_attention(Tensor(tokens[:, perm]), p).data
        np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-10)

    def test_indivisible_heads_rejected(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ConfigError):
            make_attention(rng, 6, 4)


class TestCrossAttention:
    def test_zero_queries_give_uniform_rows(self):
        rng = np.random.default_rng(5)
        q = Tensor(np.zeros((1, 1, 4, 3)))
        k = Tensor(rng.normal(size=(1, 1, 4, 3)))
        w = nn.cross_attention_weights(q, k).data
        np.testing.assert_allclose(w, np.full((1, 1, 4, 4), 0.25), atol=1e-15)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(6)
        q = Tensor(rng.normal(size=(2, 2, 5, 3)))
        k = Tensor(rng.normal(size=(2, 2, 5, 3)))
        w = nn.cross_attention_weights(q, k).data
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)

    def test_equal_queries_reduce_to_self_attention_weights(self):
        rng = np.random.default_rng(7)
        tokens = rng.normal(size=(1, 4, 6))
        p = make_attention(rng, 6, 2)
        q = nn._project_heads(Tensor(tokens), p.w_q, 2)
        k = nn._project_heads(Tensor(tokens), p.w_k, 2)
        np.testing.assert_array_equal(
            nn.cross_attention_weights(q, k).data, nn.attention_weights(q, k).data
        )

    def test_m2_uses_exactly_the_other_modality(self):
        rng = np.random.default_rng(8)
        p = make_attention(rng, 4, 1)
        q0 = Tensor(rng.normal(size=(1, 1, 3, 4)))
        q1 = Tensor(rng.normal(size=(1, 1, 3, 4)))
        k1 = Tensor(rng.normal(size=(1, 1, 3, 4)))
        v1 = Tensor(rng.normal(size=(1, 1, 3, 4)))
        out = nn.cross_attention([q0, q1], k1, v1, p, j=1)
        direct = nn.merge_heads(T.matmul(nn.cross_attention_weights(q0, k1), v1))
        np.testing.assert_array_equal(
            out.data, nn.linear(direct, LinearParams(p.w_o)).data
        )

    def test_m1_rejected(self):
        rng = np.random.default_rng(9)
        p = make_attention(rng, 4, 1)
        x = Tensor(rng.normal(size=(1, 1, 3, 4)))
        with pytest.raises(ConfigError, match="CAF requires"):
            nn.cross_attention([x], x, x, p, j=0)

    def test_m3_matches_scalar_oracle(self):
        rng = np.random.default_rng(10)
        d, s, m, j = 4, 3, 3, 1
        tokens = [rng.normal(size=(s, d)) for _ in range(m)]
        ps = [make_attention(rng, d, 1) for _ in range(m)]
        queries = [
            nn._project_heads(Tensor(t[None]), p.w_q, 1) for t, p in zip(tokens, ps)
        ]
        k_j = nn._project_heads(Tensor(tokens[j][None]), ps[j].w_k, 1)
        v_j = nn._project_heads(Tensor(tokens[j][None]), ps[j].w_v, 1)
        out = nn.cross_attention(queries, k_j, v_j, ps[j], j)
        expected = cross_attention_oracle(
            tokens, j,
            [p.w_q.data for p in ps],
            ps[j].w_k.data, ps[j].w_v.data, ps[j].w_o.data,
        )
        np.testing.assert_allclose(out.data[0], expected, atol=1e-12)


class TestEncoderLayer:
    def test_zeroed_projections_make_identity(self):
        rng = np.random.default_rng(11)
        p = nn.init_encoder_layer(rng, 8, 2)
        p.attention.w_o.data[:] = 0.0
        p.mlp_out.weight.data[:] = 0.0
        p.mlp_out.bias.data[:] = 0.0
        x = rng.normal(size=(2, 5, 8))
        out = nn.encoder_layer(Tensor(x), p)
        np.testing.assert_array_equal(out.data, x)

    def test_preserves_shape(self):
        rng = np.random.default_rng(12)
        p = nn.init_encoder_layer(rng, 8, 4)
        for shape in [(1, 1, 8), (3, 7, 8)]:
            assert nn.encoder_layer(Tensor(rng.normal(size=shape)), p).shape == shape

    def test_gradient_check(self):
        rng = np.random.default_rng(13)
        p = nn.init_encoder_layer(rng, 4, 2, mlp_ratio=2)
        x = rng.normal(size=(1, 3, 4))
        target = rng.normal(size=(1, 3, 4))
        params = p.named("layer")

        def f(_):
            out = nn.encoder_layer(Tensor(x), p)
            diff = T.add(out, T.scale(Tensor(target), -1.0))
            return T.sum_all(T.multiply(diff, diff))

        assert_grads_close(f, params, tol=1e-5)

    def test_cross_layer_gradients(self):
        rng = np.random.default_rng(14)
        layers = [nn.init_encoder_layer(rng, 4, 1, mlp_ratio=2) for _ in range(2)]
        xs = [rng.normal(size=(1, 3, 4)) for _ in range(2)]
        params = {}
        for j, layer in enumerate(layers):
            params.update(layer.named(f"mod{j}"))

        def f(_):
            outs = nn.cross_encoder_layer([Tensor(x) for x in xs], layers)
            return T.sum_all(T.multiply(outs[0], outs[0]))

        assert_grads_close(f, params, tol=1e-5)
        # queries flow from modality 1 into modality 0's output
        T.backward(f(None))
        assert np.abs(layers[1].attention.w_q.grad).max() > 0
