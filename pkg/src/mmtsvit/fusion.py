"""Multi-modal architectures over M co-registered modality streams.

Three strategies are provided:

* early fusion: channel-concatenate the modalities and run the
  single-modality model on the stacked series;
* synchronized class tokens: one temporal encoder per modality whose
  per-class tokens are replaced by their cross-modality mean before the
  first layer and after every layer;
* cross-attention: one temporal encoder per modality, with each layer's
  attention weights computed from the other modalities' queries and
  averaged over senders.

The synchronized and cross-attention variants aggregate the final class
tokens by a class-wise mean (fixed modality order) and share one spatial
encoder and head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .data import SITSSample
from .errors import ConfigError, DataError, FusionError
from .model import (
    ModelConfig,
    TSViTParams,
    embed_and_prepend,
    init_tsvit,
    patchify,
    segmentation_head,
    sm_tsvit_forward,
    spatial_encode,
)
from .tensor import Tensor

MODES = ("SM", "EF", "SCTF", "CAF")


@dataclass
class ModalityBranch:
    """Per-modality tokenizer, temporal position table, class tokens, encoder."""

    tokenizer_proj: nn.LinearParams
    temporal_table: Tensor
    class_tokens: Tensor
    temporal_layers: list[nn.EncoderLayerParams]

    def named(self, prefix: str) -> dict:
        out = self.tokenizer_proj.named(f"{prefix}.tokenizer")
        out[f"{prefix}.temporal_table"] = self.temporal_table
        out[f"{prefix}.class_tokens"] = self.class_tokens
        for i, layer in enumerate(self.temporal_layers):
            out.update(layer.named(f"{prefix}.temporal.{i}"))
        return out


@dataclass
class MMParams:
    """Parameters of one fused architecture.

    EF and SM hold a single :class:`TSViTParams`. SCTF and CAF hold one
    branch per modality plus a shared spatial encoder, spatial position
    table, and head (carried by ``shared`` with unused temporal parts).
    """

    mode: str
    shared: TSViTParams
    branches: list[ModalityBranch] = field(default_factory=list)
    sync_before_first: bool = True  # SCTF: also sync before layer 1

    def named(self) -> dict:
        if self.mode in ("SM", "EF"):
            return self.shared.named()
        out: dict = {}
        for j, br in enumerate(self.branches):
            out.update(br.named(f"branch{j}"))
        out["spatial_table"] = self.shared.spatial_table
        for i, layer in enumerate(self.shared.spatial_layers):
            out.update(layer.named(f"spatial.{i}"))
        out.update(self.shared.head.named("head"))
        return out


def branch_from_tsvit(p: TSViTParams) -> ModalityBranch:
    """View a single-modality parameter set as one modality branch."""
    return ModalityBranch(p.tokenizer_proj, p.temporal_table, p.class_tokens, p.temporal_layers)


def init_mm_params(
    mode: str, cfg: ModelConfig, channels: list[int], seed: int
) -> MMParams:
    """Seeded initialization for any architecture.

    ``channels`` lists the per-modality channel counts; EF concatenates
    them, SM uses exactly one entry.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown fusion mode {mode!r}, expected one of {MODES}")
    rng = np.random.default_rng(seed)
    if mode == "SM":
        if len(channels) != 1:
            raise ConfigError("SM expects exactly one modality")
        return MMParams(mode, init_tsvit(cfg, channels[0], rng))
    if mode == "EF":
        return MMParams(mode, init_tsvit(cfg, sum(channels), rng))
    if mode == "CAF" and len(channels) < 2:
        raise ConfigError("CAF requires >= 2 modalities")
    branches = [branch_from_tsvit(init_tsvit(cfg, c, rng)) for c in channels]
    shared = init_tsvit(cfg, channels[0], rng)
    return MMParams(mode, shared, branches)


# ---------------------------------------------------------------------------
# early fusion


def early_fusion_concat(samples: list[SITSSample]) -> SITSSample:
    """Stack modalities along the channel axis; extents and dates must match."""
    if not samples:
        raise FusionError("early fusion needs at least one modality")
    first = samples[0]
    for j, s in enumerate(samples[1:], start=1):
        for axis, name in ((0, "T"), (1, "H"), (2, "W")):
            if s.x.shape[axis] != first.x.shape[axis]:
                raise FusionError(
                    f"modality {s.modality_id!r} (index {j}) disagrees on axis {name}: "
                    f"{s.x.shape[axis]} vs {first.x.shape[axis]}"
                )
        if list(s.dates) != list(first.dates):
            raise DataError(f"modality {s.modality_id!r} has mismatched acquisition dates")
    if len(samples) == 1:
        return first
    stacked = np.concatenate([s.x for s in samples], axis=-1)
    return SITSSample(stacked, list(first.dates), "+".join(s.modality_id for s in samples))


# ---------------------------------------------------------------------------
# synchronized class tokens


def sctf_sync(class_tokens: list[Tensor]) -> Tensor:
    """Mean of the M per-modality class-token blocks, in list order."""
    shape = class_tokens[0].shape
    for c in class_tokens[1:]:
        if c.shape != shape:
            raise FusionError(f"class-token shapes differ: {c.shape} vs {shape}")
    acc = class_tokens[0]
    for c in class_tokens[1:]:
        acc = T.add(acc, c)
    return T.scale(acc, 1.0 / len(class_tokens))


def _split_cls(z: Tensor, k: int) -> tuple[Tensor, Tensor]:
    return (
        T.slice_(z, (slice(None), slice(0, k))),
        T.slice_(z, (slice(None), slice(k, None))),
    )


def _branch_embed(sample: SITSSample, br: ModalityBranch, cfg: ModelConfig) -> Tensor:
    tok = cfg.tokenizer(sample.x.shape[-1])
    patches = patchify(Tensor(sample.x), tok)
    p_view = TSViTParams(
        tokenizer_proj=br.tokenizer_proj,
        temporal_table=br.temporal_table,
        spatial_table=br.temporal_table,  # unused by embed
        class_tokens=br.class_tokens,
        head=br.tokenizer_proj,
    )
    return embed_and_prepend(patches, sample.dates, p_view)


def _check_token_grids(samples: list[SITSSample], cfg: ModelConfig) -> None:
    grids = [cfg.tokenizer(s.x.shape[-1]).grid(*s.x.shape[:3]) for s in samples]
    if any(g != grids[0] for g in grids[1:]):
        raise FusionError(f"modalities disagree on the token grid: {grids}")


def sctf_forward(samples: list[SITSSample], p: MMParams, cfg: ModelConfig) -> Tensor:
    """Synchronized class-token forward pass -> (H, W, K) probabilities."""
    m = len(samples)
    if len(p.branches) != m:
        raise FusionError(f"{m} modalities but {len(p.branches)} parameter branches")
    _check_token_grids(samples, cfg)
    streams = [_branch_embed(s, br, cfg) for s, br in zip(samples, p.branches)]
    k = cfg.k

    synced = None
    if p.sync_before_first:
        cls_parts, rest_parts = zip(*[_split_cls(z, k) for z in streams])
        synced = sctf_sync(list(cls_parts))
        streams = [T.concat_over_axis([synced, rest], axis=1) for rest in rest_parts]

    for layer_idx in range(cfg.depth_temporal):
        streams = [
            nn.encoder_layer(z, br.temporal_layers[layer_idx])
            for z, br in zip(streams, p.branches)
        ]
        cls_parts, rest_parts = zip(*[_split_cls(z, k) for z in streams])
        synced = sctf_sync(list(cls_parts))
        streams = [T.concat_over_axis([synced, rest], axis=1) for rest in rest_parts]

    height, width = samples[0].x.shape[1], samples[0].x.shape[2]
    z_s = spatial_encode(synced, p.shared)
    return segmentation_head(z_s, p.shared.head, cfg, height, width)


# ---------------------------------------------------------------------------
# cross-attention fusion


def caf_forward(samples: list[SITSSample], p: MMParams, cfg: ModelConfig) -> Tensor:
    """Cross-attention forward pass -> (H, W, K) probabilities."""
    m = len(samples)
    if m < 2:
        raise ConfigError("CAF requires >= 2 modalities")
    if len(p.branches) != m:
        raise FusionError(f"{m} modalities but {len(p.branches)} parameter branches")
    _check_token_grids(samples, cfg)
    streams = [_branch_embed(s, br, cfg) for s, br in zip(samples, p.branches)]

    for layer_idx in range(cfg.depth_temporal):
        layer_params = [br.temporal_layers[layer_idx] for br in p.branches]
        streams = nn.cross_encoder_layer(streams, layer_params)

    cls_parts = [T.slice_(z, (slice(None), slice(0, cfg.k))) for z in streams]
    aggregated = sctf_sync(cls_parts)  # class-wise mean, fixed modality order

    height, width = samples[0].x.shape[1], samples[0].x.shape[2]
    z_s = spatial_encode(aggregated, p.shared)
    return segmentation_head(z_s, p.shared.head, cfg, height, width)


# ---------------------------------------------------------------------------
# dispatch


def mm_forward(samples: list[SITSSample], p: MMParams, cfg: ModelConfig) -> Tensor:
    """Run whichever architecture ``p`` was built for; returns (H, W, K)."""
    if p.mode == "SM":
        if len(samples) != 1:
            raise ConfigError(f"SM expects one modality, got {len(samples)}")
        s = samples[0]
        return sm_tsvit_forward(Tensor(s.x), s.dates, p.shared, cfg)
    if p.mode == "EF":
        s = early_fusion_concat(samples)
        return sm_tsvit_forward(Tensor(s.x), s.dates, p.shared, cfg)
    if p.mode == "SCTF":
        return sctf_forward(samples, p, cfg)
    if p.mode == "CAF":
        return caf_forward(samples, p, cfg)
    raise ConfigError(f"unknown fusion mode {p.mode!r}")
