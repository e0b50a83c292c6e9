"""Confusion matrices, IoU/F1, mIoU and the challenge's overall score."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .imageproc import NUM_CLASSES


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """cm[g, p] = number of pixels with ground truth g predicted as p."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ")
    idx = truth.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def class_scores(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-class IoU and F1. A class absent from both prediction and truth scores 1."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    union = tp + fp + fn
    empty = union == 0
    safe = np.where(empty, 1.0, union)
    iou = np.where(empty, 1.0, tp / safe)
    f1 = np.where(empty, 1.0, 2 * tp / np.where(empty, 1.0, 2 * tp + fp + fn))
    return iou, f1


def image_miou(pred: np.ndarray, truth: np.ndarray) -> float:
    iou, _ = class_scores(confusion_matrix(pred, truth))
    return float(iou.mean())


def dataset_miou(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray]) -> float:
    """Mean over images of the per-image mean IoU across the four classes."""
    if len(preds) != len(truths):
        raise ValueError("prediction and truth lists differ in length")
    if not preds:
        raise ValueError("dataset_miou needs at least one image")
    return float(np.mean([image_miou(p, t) for p, t in zip(preds, truths)]))


def global_miou(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray]) -> float:
    """mIoU from a single confusion matrix pooled over all images."""
    if not preds:
        raise ValueError("global_miou needs at least one image")
    cm = sum(confusion_matrix(p, t) for p, t in zip(preds, truths))
    return float(class_scores(cm)[0].mean())


def overall_from_size(miou: float, size_mb: float) -> float:
    if size_mb <= 0:
        raise ValueError("model size must be positive")
    return (miou + min(1.0 / size_mb, 1.0)) / 2.0


@dataclass
class ScoreReport:
    iou: list[float] = field(default_factory=list)
    f1: list[float] = field(default_factory=list)
    miou: float = 0.0
    mean_f1: float = 0.0
    param_count: int = 0
    size_mb: float = 0.0  # 10^6 bytes
    size_mib: float = 0.0  # 2^20 bytes
    overall: float = 0.0
    overall_mib: float = 0.0
    images: int = 0

    def as_dict(self) -> dict[str, float | int]:
        out: dict[str, float | int] = {}
        for c, (i, f) in enumerate(zip(self.iou, self.f1)):
            out[f"iou_{c}"] = i
            out[f"f1_{c}"] = f
        for k in ("miou", "mean_f1", "param_count", "size_mb", "size_mib", "overall", "overall_mib", "images"):
            out[k] = getattr(self, k)
        return out

    def to_text(self) -> str:
        names = ("background", "sclera", "iris", "pupil")
        lines = [f"images        {self.images}"]
        for c, (i, f) in enumerate(zip(self.iou, self.f1)):
            label = names[c] if c < len(names) else f"class{c}"
            lines.append(f"{label:<13} IoU {i:.4f}  F1 {f:.4f}")
        lines += [
            f"mIoU          {self.miou:.4f}",
            f"mean F1       {self.mean_f1:.4f}",
            f"parameters    {self.param_count}",
            f"size          {self.size_mb:.4f} MB ({self.size_mib:.4f} MiB)",
            f"overall score {self.overall:.4f} (MiB convention {self.overall_mib:.4f})",
        ]
        return "\n".join(lines)

    def to_kv(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.as_dict().items())

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_kv())


def overall_score(miou: float, param_count: int) -> ScoreReport:
    """(mIoU + min(1/S, 1)) / 2 with S = 4 bytes per parameter, in MB."""
    if param_count <= 0:
        raise ValueError("parameter count must be positive")
    nbytes = 4 * param_count
    size_mb, size_mib = nbytes / 1e6, nbytes / 2**20
    return ScoreReport(
        miou=float(miou),
        param_count=int(param_count),
        size_mb=size_mb,
        size_mib=size_mib,
        overall=overall_from_size(miou, size_mb),
        overall_mib=overall_from_size(miou, size_mib),
    )


def score_predictions(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray], param_count: int) -> ScoreReport:
    report = overall_score(dataset_miou(preds, truths), param_count)
    ious, f1s = zip(*(class_scores(confusion_matrix(p, t)) for p, t in zip(preds, truths)))
    report.iou = [float(v) for v in np.mean(ious, axis=0)]
    report.f1 = [float(v) for v in np.mean(f1s, axis=0)]
    report.mean_f1 = float(np.mean(report.f1))
    report.images = len(preds)
    return report
