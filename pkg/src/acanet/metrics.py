"""Dataset-level per-class precision, recall and Jaccard index.

Counts are pooled over all images before dividing; a ratio with a zero
denominator is ``None`` (undefined), never 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError

DEFAULT_CLASS_NAMES = ("background", "graspable", "contain", "arm")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    num_images: int = 0

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionCounts":
        z = np.zeros(num_classes, dtype=np.int64)
        return cls(z, z.copy(), z.copy())

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    def __eq__(self, other):
        if not isinstance(other, ConfusionCounts):
            return NotImplemented
        return (
            self.num_images == other.num_images
            and np.array_equal(self.tp, other.tp)
            and np.array_equal(self.fp, other.fp)
            and np.array_equal(self.fn, other.fn)
        )


def _as_numpy(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def update_counts(counts: ConfusionCounts, pred, gt) -> ConfusionCounts:
    """Add one image's (or a batch's) TP/FP/FN to ``counts``."""
    pred = _as_numpy(pred).astype(np.int64)
    gt = _as_numpy(gt).astype(np.int64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and annotation {gt.shape} differ")
    c = counts.num_classes
    for name, arr in (("prediction", pred), ("annotation", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= c):
            raise ValueError(f"{name} contains class IDs outside [0, {c})")
    # rows: annotation, cols: prediction
    cm = np.bincount(gt.ravel() * c + pred.ravel(), minlength=c * c).reshape(c, c)
    tp = np.diag(cm)
    n_images = 1 if pred.ndim <= 2 else int(np.prod(pred.shape[:-2]))
    return ConfusionCounts(
        counts.tp + tp,
        counts.fp + cm.sum(axis=0) - tp,
        counts.fn + cm.sum(axis=1) - tp,
        counts.num_images + n_images,
    )


def merge_counts(a: ConfusionCounts, b: ConfusionCounts) -> ConfusionCounts:
    if a.num_classes != b.num_classes:
        raise ValueError(f"cannot merge counts over {a.num_classes} and {b.num_classes} classes")
    return ConfusionCounts(a.tp + b.tp, a.fp + b.fp, a.fn + b.fn, a.num_images + b.num_images)


def _ratio(num: int, den: int) -> Optional[float]:
    return None if den == 0 else num / den


@dataclass(frozen=True)
class ClassMetrics:
    name: str
    precision: Optional[float]
    recall: Optional[float]
    jaccard: Optional[float]


@dataclass(frozen=True)
class MetricsReport:
    classes: tuple[ClassMetrics, ...]
    mean_iou: Optional[float]
    num_images: int
    miou_classes: tuple[int, ...] = field(default=())

    def __getitem__(self, name: str) -> ClassMetrics:
        for c in self.classes:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "classes": [vars(c) for c in self.classes],
            "mean_iou": self.mean_iou,
            "num_images": self.num_images,
            "miou_classes": list(self.miou_classes),
        }


def compute_report(
    counts: ConfusionCounts,
    class_names: Optional[Sequence[str]] = None,
    miou_classes: Optional[Sequence[int]] = None,
) -> MetricsReport:
    """Pooled P/R/J per class. ``mean_iou`` averages the defined J over
    ``miou_classes`` (default: every class except background, ID 0)."""
    c = counts.num_classes
    if class_names is None:
        class_names = DEFAULT_CLASS_NAMES if c == len(DEFAULT_CLASS_NAMES) else [f"class_{i}" for i in range(c)]
    if miou_classes is None:
        miou_classes = range(1, c) if c > 1 else range(c)
    rows = []
    for i in range(c):
        tp, fp, fn = int(counts.tp[i]), int(counts.fp[i]), int(counts.fn[i])
        rows.append(ClassMetrics(class_names[i], _ratio(tp, tp + fp), _ratio(tp, tp + fn), _ratio(tp, tp + fp + fn)))
    js = [rows[i].jaccard for i in miou_classes if rows[i].jaccard is not None]
    mean_iou = sum(js) / len(js) if js else None
    return MetricsReport(tuple(rows), mean_iou, counts.num_images, tuple(miou_classes))


def _pct(v: Optional[float]) -> str:
    return "n/a" if v is None else f"{100 * v:.2f}"


def format_report(report: MetricsReport, include_background: bool = False) -> str:
    """Whitespace-aligned table with columns class, P, R, J as percentages."""
    lines = [f"{'class':<12}{'P':>8}{'R':>8}{'J':>8}"]
    for i, c in enumerate(report.classes):
        if i == 0 and not include_background:
            continue
        lines.append(f"{c.name:<12}{_pct(c.precision):>8}{_pct(c.recall):>8}{_pct(c.jaccard):>8}")
    return "\n".join(lines) + "\n"


def report_to_json(report: MetricsReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
