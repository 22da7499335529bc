"""Confusion-matrix accumulation and evaluation metrics: accuracy, per-class
F1 / macro-F1, per-class IoU / MIoU, plus the deterministic evaluation
runners for patch classification and semantic segmentation.

Conventions: rows are ground truth, columns are predictions; zero-denominator
metrics are 0 rather than NaN; argmax ties resolve to the lower class index;
segmentation pools pixels globally into a single confusion matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import DatasetManifest, TileSample, load_tile

EVAL_BATCH = 16


@dataclass
class ConfusionMatrix:
    counts: np.ndarray = field(default_factory=lambda: np.zeros((2, 2), dtype=np.int64))

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (2, 2):
            raise ValueError(f"expected 2x2 counts, got shape {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class EvalReport:
    accuracy: float
    f1_per_class: tuple[float, float]
    macro_f1: float
    iou_per_class: tuple[float, float]
    miou: float
    confusion: ConfusionMatrix
    n_units: int

    def to_dict(self, provenance: Optional[dict] = None) -> dict:
        out = {
            "accuracy": self.accuracy,
            "f1_per_class": list(self.f1_per_class),
            "macro_f1": self.macro_f1,
            "iou_per_class": list(self.iou_per_class),
            "miou": self.miou,
            "confusion": self.confusion.counts.tolist(),
            "n_units": self.n_units,
        }
        if provenance:
            out["provenance"] = dict(provenance)
        return out

    @staticmethod
    def from_dict(payload: dict) -> "EvalReport":
        return EvalReport(
            accuracy=float(payload["accuracy"]),
            f1_per_class=tuple(float(v) for v in payload["f1_per_class"]),
            macro_f1=float(payload["macro_f1"]),
            iou_per_class=tuple(float(v) for v in payload["iou_per_class"]),
            miou=float(payload["miou"]),
            confusion=ConfusionMatrix(np.asarray(payload["confusion"])),
            n_units=int(payload["n_units"]),
        )


def accumulate(cm: ConfusionMatrix, truth, pred) -> ConfusionMatrix:
    """Return a new matrix with one increment per (truth, pred) pair.
    Associative and commutative across chunks (integer counts)."""
    t = np.asarray(truth).reshape(-1).astype(np.int64)
    p = np.asarray(pred).reshape(-1).astype(np.int64)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.shape[0]} truths vs {p.shape[0]} predictions")
    if t.size == 0:
        return ConfusionMatrix(cm.counts.copy())
    for name, arr in (("truth", t), ("pred", p)):
        if arr.min() < 0 or arr.max() > 1:
            raise ValueError(f"{name} values must be in {{0, 1}}")
    inc = np.bincount(t * 2 + p, minlength=4).reshape(2, 2)
    return ConfusionMatrix(cm.counts + inc)


def metrics_from_cm(cm: ConfusionMatrix) -> EvalReport:
    counts = cm.counts
    total = counts.sum()
    if total < 1:
        raise ValueError("cannot compute metrics from an empty confusion matrix")
    accuracy = float(np.trace(counts) / total)
    f1s, ious = [], []
    for c in range(2):
        tp = float(counts[c, c])
        colsum = float(counts[:, c].sum())
        rowsum = float(counts[c, :].sum())
        precision = tp / colsum if colsum > 0 else 0.0
        recall = tp / rowsum if rowsum > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        union = rowsum + colsum - tp
        iou = tp / union if union > 0 else 0.0
        f1s.append(f1)
        ious.append(iou)
    return EvalReport(
        accuracy=accuracy,
        f1_per_class=(f1s[0], f1s[1]),
        macro_f1=float(np.mean(f1s)),
        iou_per_class=(ious[0], ious[1]),
        miou=float(np.mean(ious)),
        confusion=ConfusionMatrix(counts.copy()),
        n_units=int(total),
    )


def _argmax_lowest(logits: torch.Tensor, axis: int) -> np.ndarray:
    # np.argmax documents first-occurrence tie-breaking (lower class index).
    return np.argmax(logits.detach().cpu().numpy(), axis=axis)


def _batched(ids: Sequence[str], size: int):
    for i in range(0, len(ids), size):
        yield list(ids[i : i + size])


def evaluate_classifier(
    model: nn.Module, manifest: DatasetManifest, ids: Sequence[str]
) -> EvalReport:
    """Image-level top-1 evaluation over pure tiles. Deterministic: eval
    mode, no augmentation, fixed batching (chunking cannot change counts)."""
    ids = list(ids)
    if not ids:
        raise ValueError("evaluate_classifier needs at least one id")
    model.eval()
    cm = ConfusionMatrix()
    with torch.no_grad():
        for chunk in _batched(ids, EVAL_BATCH):
            samples = [load_tile(manifest, tid) for tid in chunk]
            for s in samples:
                if s.label is None:
                    raise ValueError(f"tile {s.id!r} is not pure: no classification label")
            images = torch.stack([s.rgb for s in samples])
            logits = model(images)
            pred = _argmax_lowest(logits, axis=1)
            truth = np.array([s.label for s in samples], dtype=np.int64)
            cm = accumulate(cm, truth, pred)
    return metrics_from_cm(cm)


def evaluate_segmenter(
    model: nn.Module, manifest: DatasetManifest, ids: Sequence[str]
) -> EvalReport:
    """Pixel-level evaluation pooling all masks into one confusion matrix."""
    ids = list(ids)
    if not ids:
        raise ValueError("evaluate_segmenter needs at least one id")
    model.eval()
    cm = ConfusionMatrix()
    with torch.no_grad():
        for chunk in _batched(ids, EVAL_BATCH):
            samples = [load_tile(manifest, tid) for tid in chunk]
            images = torch.stack([s.rgb for s in samples])
            logits = model(images)  # [N, 2, H, W]
            pred = _argmax_lowest(logits, axis=1)
            truth = torch.stack([s.mask for s in samples]).numpy()
            cm = accumulate(cm, truth, pred)
    return metrics_from_cm(cm)
