"""Confusion-matrix accumulation and PA / MPA / mIoU / fwIoU.

``counts[i, j]`` is the number of pixels of true class ``i`` predicted as
class ``j``. All metrics are computed from the matrix alone.

Two denominator conventions are available:

* ``"standard"`` (default): PA = trace / total, fwIoU weights each class IoU
  by its ground-truth frequency. This matches the verbal definitions.
* ``"typeset"``: the double sums exactly as printed in the original
  formulas, where the ``j``-sum adds the diagonal count ``C`` times
  (e.g. PA = trace / (C * trace + total)). Provided for comparison only.

Classes absent from the ground truth are excluded from the MPA average, and
classes absent from both ground truth and prediction are excluded from the
mIoU average. ``strict=True`` scores them as 0 and averages over all C.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import CLASS_NAMES, NUM_CLASSES

DENOMINATORS = ("standard", "typeset")


class MetricsError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    num_classes: int = NUM_CLASSES
    counts: np.ndarray = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            self.num_classes = self.counts.shape[0]
        if self.counts.shape != (self.num_classes, self.num_classes) or (self.counts < 0).any():
            raise MetricsError("confusion matrix must be a non-negative C x C table")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts.copy())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise MetricsError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    __add__ = merge


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    """Return ``cm`` plus the counts of one (pred, gt) mask pair."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricsError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    c = cm.num_classes
    for name, m in (("prediction", pred), ("ground truth", gt)):
        if m.size and (m.min() < 0 or m.max() >= c):
            raise MetricsError(f"{name} contains class values outside 0..{c - 1}")
    idx = gt.astype(np.int64).ravel() * c + pred.astype(np.int64).ravel()
    return ConfusionMatrix(c, cm.counts + np.bincount(idx, minlength=c * c).reshape(c, c))


def confusion_matrix(pred, gt, num_classes: int = NUM_CLASSES) -> ConfusionMatrix:
    return accumulate(ConfusionMatrix(num_classes), pred, gt)


def _require_pixels(cm: ConfusionMatrix):
    if cm.total == 0:
        raise MetricsError("metrics of an empty confusion matrix are undefined")


def _parts(cm: ConfusionMatrix):
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    gt = counts.sum(axis=1)  # tp + fn
    pred = counts.sum(axis=0)  # tp + fp
    return counts, tp, gt, pred


def pixel_accuracy(cm: ConfusionMatrix, denominators: str = "standard") -> float:
    _require_pixels(cm)
    _, tp, _, _ = _parts(cm)
    if denominators == "typeset":
        return float(tp.sum() / (cm.num_classes * tp.sum() + cm.total))
    return float(tp.sum() / cm.total)


def per_class_accuracy(cm: ConfusionMatrix, denominators: str = "standard") -> np.ndarray:
    """Recall per class; NaN where the class is absent from the ground truth."""
    _, tp, gt, _ = _parts(cm)
    denom = cm.num_classes * tp + gt if denominators == "typeset" else gt
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(gt > 0, tp / denom, np.nan)


def mean_pixel_accuracy(cm: ConfusionMatrix, strict: bool = False, denominators: str = "standard") -> float:
    _require_pixels(cm)
    acc = per_class_accuracy(cm, denominators)
    if strict:
        return float(np.nan_to_num(acc, nan=0.0).mean())
    return float(np.nanmean(acc))


def per_class_iou(cm: ConfusionMatrix, denominators: str = "standard") -> np.ndarray:
    """IoU per class; NaN where the class is absent from both ground truth and prediction."""
    _, tp, gt, pred = _parts(cm)
    union = gt + pred - tp
    denom = cm.num_classes * tp + gt + pred if denominators == "typeset" else union
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / denom, np.nan)


def mean_iou(cm: ConfusionMatrix, strict: bool = False, denominators: str = "standard"):
    """Return ``(mIoU, per-class IoU list)``."""
    _require_pixels(cm)
    iou = per_class_iou(cm, denominators)
    miou = np.nan_to_num(iou, nan=0.0).mean() if strict else np.nanmean(iou)
    return float(miou), [float(v) for v in iou]


def fw_iou(cm: ConfusionMatrix, denominators: str = "standard") -> float:
    _require_pixels(cm)
    _, tp, gt, _ = _parts(cm)
    iou = np.nan_to_num(per_class_iou(cm, denominators), nan=0.0)
    freq = (gt + cm.num_classes * tp) / cm.total if denominators == "typeset" else gt / cm.total
    return float((freq * iou).sum())


@dataclass
class MetricsReport:
    miou: float
    pa: float
    mpa: float
    fwiou: float
    per_class_iou: list[float]
    pixel_total: int
    denominators: str = "standard"
    strict: bool = False
    meta: dict = field(default_factory=dict)

    CSV_COLUMNS = ("miou", "pa", "mpa", "fwiou") + tuple(f"iou_{n}" for n in CLASS_NAMES)

    def csv_row(self) -> dict:
        row = {"miou": self.miou, "pa": self.pa, "mpa": self.mpa, "fwiou": self.fwiou}
        for name, v in zip(CLASS_NAMES, self.per_class_iou):
            row[f"iou_{name}"] = v
        return row

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerow({k: _fmt(v) for k, v in self.csv_row().items()})
        return buf.getvalue()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_iou"] = {n: v for n, v in zip(CLASS_NAMES, self.per_class_iou)}
        return d

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        iou = d["per_class_iou"]
        if isinstance(iou, dict):
            d["per_class_iou"] = [iou[n] for n in CLASS_NAMES[: len(iou)]]
        return cls(**d)


def _fmt(v) -> str:
    return "nan" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and np.isnan(obj):
        return None
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def evaluate(cm: ConfusionMatrix, strict: bool = False, denominators: str = "standard", **meta) -> MetricsReport:
    if denominators not in DENOMINATORS:
        raise MetricsError(f"denominators must be one of {DENOMINATORS}")
    miou, per_class = mean_iou(cm, strict, denominators)
    return MetricsReport(
        miou=miou,
        pa=pixel_accuracy(cm, denominators),
        mpa=mean_pixel_accuracy(cm, strict, denominators),
        fwiou=fw_iou(cm, denominators),
        per_class_iou=per_class,
        pixel_total=cm.total,
        denominators=denominators,
        strict=strict,
        meta=dict(meta),
    )


def evaluate_masks(preds, gts, num_classes: int = NUM_CLASSES, **kwargs) -> MetricsReport:
    cm = ConfusionMatrix(num_classes)
    for p, g in zip(preds, gts):
        cm = accumulate(cm, p, g)
    return evaluate(cm, **kwargs)
