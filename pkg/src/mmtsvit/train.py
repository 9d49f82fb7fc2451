"""Loss, Adam optimizer, training loop, and evaluation."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import (
    CoRegisteredSet,
    DatasetManifest,
    prepare_set,
    random_flip,
    read_container,
)
from .errors import ConfigError, ContractError
from .fusion import MMParams, init_mm_params, mm_forward
from .metrics import ConfusionMatrix
from .model import ModelConfig
from .tensor import Tensor


def cross_entropy_loss(yhat: Tensor, labels: np.ndarray, ignore: set[int] | None = None) -> Tensor:
    """Mean -log p(true class) over non-ignored pixels; log clamped at 1e-12."""
    h, w, k = yhat.shape
    if labels.shape != (h, w):
        raise ContractError(f"label map {labels.shape} does not match output ({h}, {w})")
    flat_labels = labels.reshape(-1)
    keep = np.ones(flat_labels.shape, dtype=bool)
    if ignore:
        keep = ~np.isin(flat_labels, list(ignore))
    if not keep.any():
        raise ContractError("all pixels are ignored; loss is undefined")
    rows = np.nonzero(keep)[0]
    probs = T.reshape(yhat, (h * w, k))
    picked = T.pick(probs, rows, flat_labels[rows])
    return T.neg_log_mean(picked)


@dataclass
class OptimizerState:
    """Adam moment buffers keyed by parameter name."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(named_params: dict, state: OptimizerState) -> None:
    """One Adam update with bias correction; all parameters need gradients."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in named_params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class RunConfig:
    mode: str = "SM"
    model: ModelConfig = field(default_factory=ModelConfig)
    modalities: list[int] | None = None  # indices into the container, None = all
    seed: int = 0
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True
    ignore_background: bool = False
    max_gap: int = 5
    out_dir: str = "run"

    @property
    def ignore(self) -> set[int] | None:
        return {0} if self.ignore_background else None


def load_split(manifest: DatasetManifest, split: str | None, run: RunConfig) -> list[CoRegisteredSet]:
    return [
        prepare_set(read_container(p), run.modalities, run.max_gap)
        for p in manifest.paths(split)
    ]


def evaluate_params(
    params: MMParams,
    cfg: ModelConfig,
    sets: list[CoRegisteredSet],
    ignore: set[int] | None = None,
) -> dict:
    """Forward every set, argmax per pixel (ties to the lowest class index),
    and derive MA/OA/mIoU from the pooled confusion matrix."""
    if not sets:
        raise ContractError("cannot evaluate an empty split")
    cm = ConfusionMatrix(cfg.k)
    for cset in sets:
        yhat = mm_forward(cset.samples, params, cfg)
        pred = np.argmax(yhat.data, axis=-1)
        labels = cset.labels
        if ignore:
            keep = ~np.isin(labels, list(ignore))
            cm.update(labels[keep], pred[keep])
        else:
            cm.update(labels, pred)
    out = cm.metrics()
    out["confusion"] = cm.counts.tolist()
    return out


def train(manifest: DatasetManifest, run: RunConfig) -> dict:
    """Seeded training; writes ``metrics.jsonl``, ``best.ckpt`` and ``last.ckpt``.

    Returns a summary with the log records and checkpoint paths. Validation
    runs every epoch; the best checkpoint maximizes validation MA (falling
    back to the train split when the manifest has no validation samples).
    """
    if manifest.k != run.model.k:
        raise ConfigError(
            f"manifest has {manifest.k} classes but model is configured for {run.model.k}"
        )
    train_sets = load_split(manifest, "train", run)
    if not train_sets:
        raise ContractError("manifest has no training samples")
    val_sets = load_split(manifest, "val", run) or train_sets

    channels = [s.x.shape[-1] for s in train_sets[0].samples]
    params = init_mm_params(run.mode, run.model, channels, run.seed)
    named = params.named()
    state = OptimizerState(lr=run.lr, beta1=run.beta1, beta2=run.beta2, eps=run.eps)
    rng = np.random.default_rng(run.seed)

    os.makedirs(run.out_dir, exist_ok=True)
    log_path = os.path.join(run.out_dir, "metrics.jsonl")
    best_path = os.path.join(run.out_dir, "best.ckpt")
    last_path = os.path.join(run.out_dir, "last.ckpt")
    meta = {
        "channels": channels,
        "modalities": run.modalities,
        "classes": manifest.classes,
        "seed": run.seed,
        "ignore_background": run.ignore_background,
    }

    best_ma = -1.0
    records = []
    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(1, run.epochs + 1):
            order = rng.permutation(len(train_sets))
            batch_losses = []
            for start in range(0, len(order), run.batch_size):
                batch = order[start : start + run.batch_size]
                for p in named.values():
                    p.zero_grad()
                terms = []
                for i in batch:
                    cset = train_sets[i]
                    if run.augment:
                        cset = random_flip(cset, rng)
                    yhat = mm_forward(cset.samples, params, run.model)
                    terms.append(cross_entropy_loss(yhat, cset.labels, run.ignore))
                total = terms[0]
                for term in terms[1:]:
                    total = T.add(total, term)
                total = T.scale(total, 1.0 / len(terms))
                T.backward(total)
                adam_step(named, state)
                batch_losses.append(total.item())

            val = evaluate_params(params, run.model, val_sets, run.ignore)
            record = {
                "epoch": epoch,
                "train_loss": float(np.mean(batch_losses)),
                "val_MA": val["MA"],
                "val_OA": val["OA"],
                "val_mIoU": val["mIoU"],
            }
            records.append(record)
            log.write(json.dumps(record, sort_keys=True) + "\n")
            if val["MA"] > best_ma:
                best_ma = val["MA"]
                save_checkpoint(params, run.model, meta, best_path)

    save_checkpoint(params, run.model, meta, last_path)
    return {
        "log": log_path,
        "best": best_path,
        "last": last_path,
        "records": records,
        "params": params,
    }
