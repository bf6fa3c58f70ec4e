"""Confusion-matrix based segmentation metrics (IoU, Dice)."""

from __future__ import annotations

import csv
import io

import numpy as np

from .losses import IGNORE_INDEX
from .numkern import ContractError


class ConfusionMatrix:
    """Integer counts, rows = ground truth, columns = prediction."""

    def __init__(self, n_classes, counts=None):
        self.n_classes = int(n_classes)
        if counts is None:
            counts = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (self.n_classes, self.n_classes) or (self.counts < 0).any():
            raise ContractError("confusion counts must be a nonnegative N_C x N_C matrix")

    @property
    def total(self):
        return int(self.counts.sum())

    def update(self, pred, gt):
        pred = np.asarray(pred).ravel()
        gt = np.asarray(gt).ravel()
        if pred.shape != gt.shape:
            raise ContractError(f"prediction/ground-truth shape mismatch: {pred.shape} vs {gt.shape}")
        keep = gt != IGNORE_INDEX
        pred, gt = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
        for name, arr in (("prediction", pred), ("ground truth", gt)):
            if arr.size and (arr.min() < 0 or arr.max() >= self.n_classes):
                raise ContractError(f"{name} label outside 0..{self.n_classes - 1}")
        k = self.n_classes
        self.counts += np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other):
        if other.n_classes != self.n_classes:
            raise ContractError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.n_classes, self.counts + other.counts)

    def tp_fp_fn(self):
        tp = np.diag(self.counts)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        return tp, fp, fn


def confusion(pred, gt, n_classes):
    return ConfusionMatrix(n_classes).update(pred, gt)


def _ratio(num, den):
    per_class = np.full(den.shape, np.nan)
    present = den > 0
    if not present.any():
        raise ContractError("every class is absent from both prediction and ground truth")
    per_class[present] = num[present] / den[present]
    return per_class, float(per_class[present].mean())


def miou(cm):
    """Per-class IoU (NaN for absent classes) and the mean over present ones."""
    tp, fp, fn = cm.tp_fp_fn()
    return _ratio(tp.astype(np.float64), (tp + fp + fn).astype(np.float64))


def dsc(cm):
    tp, fp, fn = cm.tp_fp_fn()
    return _ratio(2.0 * tp, (2 * tp + fp + fn).astype(np.float64))


def class_histogram(labels, n_classes):
    lab = np.asarray(labels).ravel()
    lab = lab[lab != IGNORE_INDEX]
    return np.bincount(lab.astype(np.int64), minlength=n_classes)


def subset_mean(per_class, classes):
    vals = np.asarray(per_class)[list(classes)]
    vals = vals[~np.isnan(vals)]
    return float(vals.mean()) if vals.size else float("nan")


def _fmt(v):
    return "" if np.isnan(v) else f"{v:.6f}"


def metrics_csv(cm, class_names=None):
    """One row per class (name, iou, dice, pixels) plus a ``mean`` row."""
    iou, m_iou = miou(cm)
    dice, m_dice = dsc(cm)
    pixels = cm.counts.sum(axis=1)
    names = class_names or [f"class_{c}" for c in range(cm.n_classes)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "iou", "dice", "pixels"])
    for c in range(cm.n_classes):
        w.writerow([names[c], _fmt(iou[c]), _fmt(dice[c]), int(pixels[c])])
    w.writerow(["mean", _fmt(m_iou), _fmt(m_dice), int(pixels.sum())])
    return buf.getvalue()
