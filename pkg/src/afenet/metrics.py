"""Confusion-matrix accumulation and segmentation scores (OA, F1, IoU)."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np


class EmptyConfusionError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """Rows are ground-truth classes, columns are predictions."""

    num_classes: int
    counts: np.ndarray = field(default=None)
    ignored_pixels: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def accumulate(self, pred, label, ignore_class: int | None = None) -> ConfusionMatrix:
        return accumulate(self, pred, label, ignore_class)

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different size")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts,
                               self.ignored_pixels + other.ignored_pixels)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred, label, ignore_class: int | None = None) -> ConfusionMatrix:
    pred = np.asarray(pred).astype(np.int64).ravel()
    label = np.asarray(label).astype(np.int64).ravel()
    if pred.shape != label.shape:
        raise ValueError(f"prediction has {pred.size} pixels but label has {label.size}")
    k = cm.num_classes
    keep = np.ones(label.shape, dtype=bool) if ignore_class is None else label != ignore_class
    for name, arr in (("label", label[keep]), ("prediction", pred[keep])):
        bad = (arr < 0) | (arr >= k)
        if bad.any():
            raise ValueError(f"{name} value {int(arr[bad][0])} outside [0, {k})")
    cm.ignored_pixels += int((~keep).sum())
    cm.counts += np.bincount(k * label[keep] + pred[keep], minlength=k * k).reshape(k, k)
    return cm


def _check(cm: ConfusionMatrix) -> np.ndarray:
    c = cm.counts.astype(np.float64)
    if c.sum() <= 0:
        raise EmptyConfusionError("confusion matrix is empty")
    return c


def _div(num, den):
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den > 0)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    c = _check(cm)
    return float(np.trace(c) / c.sum())


def present_classes(cm: ConfusionMatrix) -> np.ndarray:
    """Classes with ground-truth or predicted pixels."""
    c = cm.counts
    return (c.sum(axis=0) + c.sum(axis=1)) > 0


def precision(cm: ConfusionMatrix) -> np.ndarray:
    c = _check(cm)
    return _div(np.diag(c), c.sum(axis=0))


def recall(cm: ConfusionMatrix) -> np.ndarray:
    c = _check(cm)
    return _div(np.diag(c), c.sum(axis=1))


def f1(cm: ConfusionMatrix) -> np.ndarray:
    p, r = precision(cm), recall(cm)
    return _div(2 * p * r, p + r)


def iou(cm: ConfusionMatrix) -> np.ndarray:
    c = _check(cm)
    tp = np.diag(c)
    return _div(tp, c.sum(axis=0) + c.sum(axis=1) - tp)


def _classes(cm: ConfusionMatrix, exclude: int | None) -> np.ndarray:
    keep = present_classes(cm).copy()
    if exclude is not None:
        keep[exclude] = False
    return keep


def mean_f1(cm: ConfusionMatrix, exclude: int | None = None, macro_harmonic: bool = False) -> float:
    """Mean per-class F1, or the harmonic mean of mean precision and mean recall."""
    keep = _classes(cm, exclude)
    if not keep.any():
        raise EmptyConfusionError("no classes present")
    if macro_harmonic:
        p = float(precision(cm)[keep].mean())
        r = float(recall(cm)[keep].mean())
        return 2 * p * r / (p + r) if p + r > 0 else 0.0
    return float(f1(cm)[keep].mean())


def mean_iou(cm: ConfusionMatrix, exclude: int | None = None) -> float:
    keep = _classes(cm, exclude)
    if not keep.any():
        raise EmptyConfusionError("no classes present")
    return float(iou(cm)[keep].mean())


@dataclass
class Report:
    class_names: list[str]
    f1: np.ndarray
    iou: np.ndarray
    present: np.ndarray
    mf1: float
    miou: float
    oa: float

    def rows(self) -> list[list[str]]:
        out = [["class", "F1", "IoU"]]
        for name, a, b, ok in zip(self.class_names, self.f1, self.iou, self.present):
            out.append([name, f"{a:.4f}" if ok else "absent", f"{b:.4f}" if ok else "absent"])
        out.append(["mF1", f"{self.mf1:.4f}", ""])
        out.append(["mIoU", "", f"{self.miou:.4f}"])
        out.append(["OA", f"{self.oa:.4f}", ""])
        return out

    def to_text(self) -> str:
        rows = self.rows()
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(cell.ljust(wd) if j == 0 else cell.rjust(wd)
                           for j, (cell, wd) in enumerate(zip(r, widths))).rstrip() for r in rows]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow([n + "_F1" for n in self.class_names] + [n + "_IoU" for n in self.class_names]
                    + ["mF1", "mIoU", "OA"])
        vals = [f"{v:.6f}" if ok else "" for v, ok in zip(self.f1, self.present)]
        vals += [f"{v:.6f}" if ok else "" for v, ok in zip(self.iou, self.present)]
        wr.writerow(vals + [f"{self.mf1:.6f}", f"{self.miou:.6f}", f"{self.oa:.6f}"])
        return buf.getvalue()


def report(cm: ConfusionMatrix, class_names: list[str] | None = None,
           exclude: int | None = None, macro_harmonic: bool = False) -> Report:
    names = class_names or [f"class{i}" for i in range(cm.num_classes)]
    present = _classes(cm, exclude)
    return Report(list(names), f1(cm), iou(cm), present,
                  mean_f1(cm, exclude, macro_harmonic), mean_iou(cm, exclude), overall_accuracy(cm))
