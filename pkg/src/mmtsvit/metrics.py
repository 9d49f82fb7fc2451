"""Confusion-matrix based segmentation metrics: OA, MA, mIoU."""

from __future__ import annotations

import numpy as np

from .errors import ContractError


class ConfusionMatrix:
    """K x K integer counts indexed (true class, predicted class)."""

    def __init__(self, k: int):
        self.k = k
        self.counts = np.zeros((k, k), dtype=np.int64)

    def update(self, true_labels: np.ndarray, predictions: np.ndarray) -> None:
        t = np.asarray(true_labels).reshape(-1)
        p = np.asarray(predictions).reshape(-1)
        if t.shape != p.shape:
            raise ContractError(f"label/prediction sizes differ: {t.shape} vs {p.shape}")
        np.add.at(self.counts, (t, p), 1)

    def merge(self, other: "ConfusionMatrix") -> None:
        self.counts += other.counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def metrics(self) -> dict:
        """OA, MA and mIoU plus per-class recall and IoU.

        MA and mIoU average only over classes present in the reference;
        absent classes get NaN in the per-class tables.
        """
        if self.total == 0:
            raise ContractError("cannot compute metrics from an empty confusion matrix")
        counts = self.counts.astype(np.float64)
        diag = np.diag(counts)
        row = counts.sum(axis=1)
        col = counts.sum(axis=0)
        present = row > 0

        with np.errstate(divide="ignore", invalid="ignore"):
            recall = np.where(row > 0, diag / row, np.nan)
            union = row + col - diag
            iou = np.where(union > 0, diag / union, np.nan)
        iou = np.where(present, iou, np.nan)

        return {
            "OA": float(diag.sum() / counts.sum()),
            "MA": float(np.nanmean(recall[present])),
            "mIoU": float(np.nanmean(iou[present])),
            "per_class_recall": [None if np.isnan(r) else float(r) for r in recall],
            "per_class_iou": [None if np.isnan(i) else float(i) for i in iou],
        }
