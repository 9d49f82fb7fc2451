"""Transformer building blocks: linear maps, self- and cross-attention,
MLP, and pre-norm encoder layers.

All blocks are pure functions over explicit parameter containers, so the
same parameters can be reused across modality branches and across calls
without hidden state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class LinearParams:
    weight: Tensor  # (d_in, d_out)
    bias: Tensor | None = None

    def named(self, prefix: str) -> dict:
        out = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            out[f"{prefix}.bias"] = self.bias
        return out


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.heads != 0:
            raise ConfigError(f"token dimension {d} not divisible by {self.heads} heads")

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    def named(self, prefix: str) -> dict:
        return {
            f"{prefix}.w_q": self.w_q,
            f"{prefix}.w_k": self.w_k,
            f"{prefix}.w_v": self.w_v,
            f"{prefix}.w_o": self.w_o,
        }


@dataclass
class EncoderLayerParams:
    attention: AttentionParams
    mlp_in: LinearParams   # d -> r*d
    mlp_out: LinearParams  # r*d -> d
    norm1_gamma: Tensor
    norm1_beta: Tensor
    norm2_gamma: Tensor
    norm2_beta: Tensor

    def named(self, prefix: str) -> dict:
        out = self.attention.named(f"{prefix}.attn")
        out.update(self.mlp_in.named(f"{prefix}.mlp_in"))
        out.update(self.mlp_out.named(f"{prefix}.mlp_out"))
        out[f"{prefix}.norm1_gamma"] = self.norm1_gamma
        out[f"{prefix}.norm1_beta"] = self.norm1_beta
        out[f"{prefix}.norm2_gamma"] = self.norm2_gamma
        out[f"{prefix}.norm2_beta"] = self.norm2_beta
        return out


# ---------------------------------------------------------------------------
# initialization


def init_linear(rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True) -> LinearParams:
    # fan-in scaled uniform, zero bias
    bound = 1.0 / math.sqrt(d_in)
    w = Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)), requires_grad=True)
    b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None
    return LinearParams(w, b)


def init_attention(rng: np.random.Generator, d: int, heads: int) -> AttentionParams:
    def proj():
        bound = 1.0 / math.sqrt(d)
        return Tensor(rng.uniform(-bound, bound, size=(d, d)), requires_grad=True)

    return AttentionParams(proj(), proj(), proj(), proj(), heads)


def init_encoder_layer(
    rng: np.random.Generator, d: int, heads: int, mlp_ratio: int = 4
) -> EncoderLayerParams:
    return EncoderLayerParams(
        attention=init_attention(rng, d, heads),
        mlp_in=init_linear(rng, d, mlp_ratio * d),
        mlp_out=init_linear(rng, mlp_ratio * d, d),
        norm1_gamma=Tensor(np.ones(d), requires_grad=True),
        norm1_beta=Tensor(np.zeros(d), requires_grad=True),
        norm2_gamma=Tensor(np.ones(d), requires_grad=True),
        norm2_beta=Tensor(np.zeros(d), requires_grad=True),
    )


# ---------------------------------------------------------------------------
# forward computations


def linear(x: Tensor, p: LinearParams) -> Tensor:
    """Apply x @ W + b over the last axis; leading axes are flattened."""
    d_in, d_out = p.weight.shape
    lead = x.shape[:-1]
    flat = T.reshape(x, (int(np.prod(lead)) if lead else 1, x.shape[-1]))
    y = T.matmul(flat, p.weight)
    if p.bias is not None:
        y = T.add(y, T.broadcast_to(p.bias, y.shape))
    return T.reshape(y, lead + (d_out,))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, S, d) -> (B, heads, S, d // heads)."""
    b, s, d = x.shape
    return T.transpose(T.reshape(x, (b, s, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """(B, heads, S, dh) -> (B, S, heads * dh)."""
    b, h, s, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, s, h * dh))


def _project_heads(tokens: Tensor, w: Tensor, heads: int) -> Tensor:
    return split_heads(linear(tokens, LinearParams(w)), heads)


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic softmax(q kT / sqrt(dh)) over per-head slices.

    ``q`` and ``k`` are (B, heads, S, dh); the scaling uses the per-head
    dimension, which coincides with the full token dimension for one head.
    """
    if q.shape != k.shape:
        raise ShapeError(f"attention_weights: shapes {q.shape} and {k.shape} differ")
    dh = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    return T.softmax_lastdim(scores)


def self_attention(tokens: Tensor, p: AttentionParams) -> Tensor:
    """Multi-head scaled dot-product self-attention over (B, S, d)."""
    q = _project_heads(tokens, p.w_q, p.heads)
    k = _project_heads(tokens, p.w_k, p.heads)
    v = _project_heads(tokens, p.w_v, p.heads)
    a = attention_weights(q, k)
    out = merge_heads(T.matmul(a, v))
    return linear(out, LinearParams(p.w_o))


def cross_attention_weights(q_i: Tensor, k_j: Tensor) -> Tensor:
    """Attention weights with queries imported from another modality.

    Same computation as the self-attention weights; kept as a named entry
    point because the cross-modal pairing (i != j) is the semantic contract.
    """
    return attention_weights(q_i, k_j)


def cross_attention(
    queries_all: list[Tensor], k_j: Tensor, v_j: Tensor, p_j: AttentionParams, j: int
) -> Tensor:
    """Cross-attention for modality j: weights averaged over senders i != j.

    ``queries_all`` holds the per-head query tensors of all M modalities
    (each (B, heads, S, dh)); the averaged weight matrix stays
    row-stochastic and multiplies modality j's values.
    """
    m = len(queries_all)
    if m < 2:
        raise ConfigError("CAF requires >= 2 modalities")
    acc = None
    for i in range(m):
        if i == j:
            continue
        a = cross_attention_weights(queries_all[i], k_j)
        acc = a if acc is None else T.add(acc, a)
    avg = T.scale(acc, 1.0 / (m - 1))
    out = merge_heads(T.matmul(avg, v_j))
    return linear(out, LinearParams(p_j.w_o))


def mlp(x: Tensor, p_in: LinearParams, p_out: LinearParams) -> Tensor:
    return linear(T.gelu(linear(x, p_in)), p_out)


def encoder_layer(tokens: Tensor, p: EncoderLayerParams) -> Tensor:
    """Pre-norm residual encoder layer with self-attention."""
    h = T.add(tokens, self_attention(T.layernorm(tokens, p.norm1_gamma, p.norm1_beta), p.attention))
    return T.add(h, mlp(T.layernorm(h, p.norm2_gamma, p.norm2_beta), p.mlp_in, p.mlp_out))


def cross_encoder_layer(
    inputs: list[Tensor], params: list[EncoderLayerParams]
) -> list[Tensor]:
    """One synchronous cross-attention layer over all M modality streams.

    Every modality's queries come from its own normalized layer input via
    its own query projection; modality j consumes the mean of the other
    modalities' attention weights against its own keys and values. All
    branches read the previous layer's activations.
    """
    m = len(inputs)
    if m < 2:
        raise ConfigError("CAF requires >= 2 modalities")
    if len(params) != m:
        raise ConfigError(f"got {m} streams but {len(params)} parameter sets")
    normed = [
        T.layernorm(x, p.norm1_gamma, p.norm1_beta) for x, p in zip(inputs, params)
    ]
    queries = [
        _project_heads(n, p.attention.w_q, p.attention.heads)
        for n, p in zip(normed, params)
    ]
    outputs = []
    for j in range(m):
        p = params[j]
        k_j = _project_heads(normed[j], p.attention.w_k, p.attention.heads)
        v_j = _project_heads(normed[j], p.attention.w_v, p.attention.heads)
        attended = cross_attention(queries, k_j, v_j, p.attention, j)
        h = T.add(inputs[j], attended)
        outputs.append(
            T.add(h, mlp(T.layernorm(h, p.norm2_gamma, p.norm2_beta), p.mlp_in, p.mlp_out))
        )
    return outputs
