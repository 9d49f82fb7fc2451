"""Temporo-spatial vision transformer for a single satellite modality.

Input time series are cut into non-overlapping 3D patches, projected to
tokens, and processed by two stacked encoders: a temporal one attending
over acquisitions per spatial patch (with per-class learnable tokens
prepended), and a spatial one attending over patch locations per class
channel. A linear head maps each class channel back to pixel space and a
per-pixel softmax yields the class probability map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, DataError
from .nn import EncoderLayerParams, LinearParams
from .tensor import Tensor

DAYS_TABLE_ROWS = 366


@dataclass
class TokenizerConfig:
    t: int = 1
    h: int = 2
    w: int = 2
    d: int = 128
    channels: int = 1

    def __post_init__(self):
        if min(self.t, self.h, self.w, self.d, self.channels) < 1:
            raise ConfigError("tokenizer extents and dimensions must be >= 1")

    @property
    def patch_len(self) -> int:
        return self.t * self.h * self.w * self.channels

    def grid(self, t_len: int, height: int, width: int) -> tuple[int, int, int]:
        """Return (N_T, N_H, N_W); extents must divide exactly."""
        for name, total, step in (("T", t_len, self.t), ("H", height, self.h), ("W", width, self.w)):
            if total % step != 0:
                raise ConfigError(
                    f"axis {name} of extent {total} is not divisible by patch extent {step}"
                )
        return t_len // self.t, height // self.h, width // self.w


@dataclass
class ModelConfig:
    t: int = 1
    h: int = 2
    w: int = 2
    d: int = 128
    k: int = 2
    depth_temporal: int = 6
    depth_spatial: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    max_spatial_tokens: int = 256  # rows of the learnable spatial position table

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("class count must be >= 1")
        if self.depth_temporal < 1 or self.depth_spatial < 1:
            raise ConfigError("encoder depths must be >= 1")
        if self.d % self.heads != 0:
            raise ConfigError(f"token dimension {self.d} not divisible by {self.heads} heads")

    def tokenizer(self, channels: int) -> TokenizerConfig:
        return TokenizerConfig(self.t, self.h, self.w, self.d, channels)


@dataclass
class TSViTParams:
    tokenizer_proj: LinearParams          # patch_len -> d
    temporal_table: Tensor                # 366 x d, indexed by day of year
    spatial_table: Tensor                 # max_spatial_tokens x d
    class_tokens: Tensor                  # K x d
    temporal_layers: list[EncoderLayerParams] = field(default_factory=list)
    spatial_layers: list[EncoderLayerParams] = field(default_factory=list)
    head: LinearParams = None             # d -> h*w, shared across classes

    def named(self, prefix: str = "") -> dict:
        pre = prefix + "." if prefix else ""
        out = self.tokenizer_proj.named(f"{pre}tokenizer")
        out[f"{pre}temporal_table"] = self.temporal_table
        out[f"{pre}spatial_table"] = self.spatial_table
        out[f"{pre}class_tokens"] = self.class_tokens
        for i, layer in enumerate(self.temporal_layers):
            out.update(layer.named(f"{pre}temporal.{i}"))
        for i, layer in enumerate(self.spatial_layers):
            out.update(layer.named(f"{pre}spatial.{i}"))
        out.update(self.head.named(f"{pre}head"))
        return out


def init_tsvit(cfg: ModelConfig, channels: int, rng: np.random.Generator) -> TSViTParams:
    tok = cfg.tokenizer(channels)
    return TSViTParams(
        tokenizer_proj=nn.init_linear(rng, tok.patch_len, cfg.d),
        temporal_table=Tensor(
            rng.normal(0.0, 0.02, size=(DAYS_TABLE_ROWS, cfg.d)), requires_grad=True
        ),
        spatial_table=Tensor(
            rng.normal(0.0, 0.02, size=(cfg.max_spatial_tokens, cfg.d)), requires_grad=True
        ),
        class_tokens=Tensor(rng.normal(0.0, 0.02, size=(cfg.k, cfg.d)), requires_grad=True),
        temporal_layers=[
            nn.init_encoder_layer(rng, cfg.d, cfg.heads, cfg.mlp_ratio)
            for _ in range(cfg.depth_temporal)
        ],
        spatial_layers=[
            nn.init_encoder_layer(rng, cfg.d, cfg.heads, cfg.mlp_ratio)
            for _ in range(cfg.depth_spatial)
        ],
        head=nn.init_linear(rng, cfg.d, cfg.h * cfg.w),
    )


# ---------------------------------------------------------------------------
# pipeline stages


def patchify(x: Tensor, cfg: TokenizerConfig) -> Tensor:
    """(T, H, W, C) -> (N_H * N_W, N_T, t*h*w*C), row-major over patch rows/cols."""
    t_len, height, width, channels = x.shape
    if channels != cfg.channels:
        raise ConfigError(f"expected {cfg.channels} channels, got {channels}")
    n_t, n_h, n_w = cfg.grid(t_len, height, width)
    x = T.reshape(x, (n_t, cfg.t, n_h, cfg.h, n_w, cfg.w, channels))
    x = T.transpose(x, (2, 4, 0, 1, 3, 5, 6))  # (n_h, n_w, n_t, t, h, w, C)
    return T.reshape(x, (n_h * n_w, n_t, cfg.patch_len))


def unpatchify(patches: Tensor, cfg: TokenizerConfig, shape: tuple) -> Tensor:
    """Inverse of :func:`patchify` for a target (T, H, W, C) shape."""
    t_len, height, width, channels = shape
    n_t, n_h, n_w = cfg.grid(t_len, height, width)
    x = T.reshape(patches, (n_h, n_w, n_t, cfg.t, cfg.h, cfg.w, channels))
    x = T.transpose(x, (2, 3, 0, 4, 1, 5, 6))
    return T.reshape(x, shape)


def embed_and_prepend(patches: Tensor, dates, p: TSViTParams) -> Tensor:
    """Project patches to tokens, add date embeddings, prepend class tokens.

    Returns (N, K + N_T, d); class tokens receive no position embedding.
    """
    dates = np.asarray(dates, dtype=np.int64)
    n, n_t, _ = patches.shape
    if len(dates) != n_t:
        raise DataError(f"got {len(dates)} dates for {n_t} temporal tokens (requires t=1)")
    if dates.min() < 1 or dates.max() > DAYS_TABLE_ROWS:
        raise DataError(f"acquisition day-of-year outside [1, {DAYS_TABLE_ROWS}]: {dates}")
    z = nn.linear(patches, p.tokenizer_proj)
    pos = T.gather_rows(p.temporal_table, dates - 1)  # (N_T, d)
    z = T.add(z, T.broadcast_to(pos, z.shape))
    k, d = p.class_tokens.shape
    cls = T.broadcast_to(T.reshape(p.class_tokens, (1, k, d)), (n, k, d))
    return T.concat_over_axis([cls, z], axis=1)


def temporal_encode(z0: Tensor, layers: list[EncoderLayerParams], k: int) -> Tensor:
    """Run the temporal encoder and keep the first K (class) positions."""
    z = z0
    for layer in layers:
        z = nn.encoder_layer(z, layer)
    return T.slice_(z, (slice(None), slice(0, k)))


def spatial_encode(cls_tokens: Tensor, p: TSViTParams) -> Tensor:
    """(N, K, d) -> (K, N, d): add spatial positions, run the spatial encoder."""
    n = cls_tokens.shape[0]
    if n > p.spatial_table.shape[0]:
        raise ConfigError(
            f"{n} spatial tokens exceed the position table of {p.spatial_table.shape[0]} rows"
        )
    z = T.transpose(cls_tokens, (1, 0, 2))
    pos = T.slice_(p.spatial_table, (slice(0, n),))
    z = T.add(z, T.broadcast_to(pos, z.shape))
    for layer in p.spatial_layers:
        z = nn.encoder_layer(z, layer)
    return z


def segmentation_head(z_s: Tensor, head: LinearParams, cfg: ModelConfig, height: int, width: int) -> Tensor:
    """(K, N, d) -> per-pixel class probabilities (H, W, K)."""
    k, n, _ = z_s.shape
    n_h, n_w = height // cfg.h, width // cfg.w
    logits = nn.linear(z_s, head)                       # (K, N, h*w)
    logits = T.reshape(logits, (k, n_h, n_w, cfg.h, cfg.w))
    logits = T.transpose(logits, (1, 3, 2, 4, 0))       # (n_h, h, n_w, w, K)
    logits = T.reshape(logits, (height, width, k))
    return T.softmax_lastdim(logits)


def sm_tsvit_forward(x: Tensor, dates, p: TSViTParams, cfg: ModelConfig) -> Tensor:
    """Full single-modality forward pass: (T, H, W, C) -> (H, W, K)."""
    _, height, width, channels = x.shape
    tok = cfg.tokenizer(channels)
    patches = patchify(x, tok)
    z0 = embed_and_prepend(patches, dates, p)
    cls = temporal_encode(z0, p.temporal_layers, cfg.k)
    z_s = spatial_encode(cls, p)
    return segmentation_head(z_s, p.head, cfg, height, width)
