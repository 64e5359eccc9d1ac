"""Segmentation and regression evaluation."""

from __future__ import annotations

import numpy as np


def confusion_matrix(pred: np.ndarray, true: np.ndarray, n_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    if pred.size and (pred.min() < 0 or pred.max() >= n_classes
                      or true.min() < 0 or true.max() >= n_classes):
        raise ValueError("class id out of range")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def segmentation_scores(pred: np.ndarray, true: np.ndarray, n_classes: int) -> dict:
    """Global accuracy and per-class / mean intersection-over-union, in percent.

    Classes absent from both prediction and ground truth are excluded from
    the mean.
    """
    cm = confusion_matrix(pred, true, n_classes)
    total = cm.sum()
    ga = 100.0 * np.trace(cm) / total if total else 0.0
    ious = np.full(n_classes, np.nan)
    for c in range(n_classes):
        tp = cm[c, c]
        denom = cm[c, :].sum() + cm[:, c].sum() - tp
        if denom > 0:
            ious[c] = 100.0 * tp / denom
    present = ~np.isnan(ious)
    miou = float(np.mean(ious[present])) if present.any() else 0.0
    return {"ga": float(ga), "iou": ious, "miou": miou}


def motion_l2(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean Euclidean error between predicted and true motion rows."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean(np.linalg.norm(pred - target, axis=-1)))
