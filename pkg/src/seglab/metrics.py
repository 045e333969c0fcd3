"""Evaluation: confusion counts, IoU, class groups, branch overlap."""

import csv
import json

import numpy as np

from .grid import IGNORE, check_labels


class ConfusionMatrix:
    """C x C counts, rows ground truth, columns prediction."""

    def __init__(self, num_classes):
        if num_classes < 1:
            raise ValueError(f"need >= 1 class, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, gt, pred):
        """Add one (gt, pred) map pair; IGNORE ground truth is skipped."""
        c = self.num_classes
        gt = check_labels(gt, num_classes=c)
        pred = check_labels(pred)
        if gt.shape != pred.shape:
            raise ValueError(f"shape mismatch: {gt.shape} vs {pred.shape}")
        if ((pred < 0) | (pred >= c)).any():
            raise ValueError(f"prediction out of range [0, {c})")
        keep = gt != IGNORE
        flat = gt[keep] * c + pred[keep]
        self.counts += np.bincount(flat, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise ValueError("class count mismatch")
        self.counts += other.counts
        return self


def iou_per_class(cm):
    """Intersection over union per class; NaN where the class never
    appears in ground truth or prediction."""
    m = cm.counts.astype(np.float64)
    diag = np.diag(m)
    denom = m.sum(axis=1) + m.sum(axis=0) - diag
    return np.divide(diag, denom, out=np.full_like(diag, np.nan),
                     where=denom > 0)


def miou(cm):
    """Mean IoU over classes that appear; NaN-free by construction."""
    iou = iou_per_class(cm)
    present = ~np.isnan(iou)
    if not present.any():
        return float("nan")
    return float(iou[present].mean())


def group_miou(cm, groups):
    """Mean IoU per named class group.

    groups maps every class index to a group name; a group whose
    member classes are all absent scores NaN.
    """
    iou = iou_per_class(cm)
    missing = [c for c in range(cm.num_classes) if c not in groups]
    if missing:
        raise ValueError(f"classes {missing} not assigned to any group")
    out = {}
    for c in range(cm.num_classes):
        out.setdefault(groups[c], []).append(iou[c])
    return {
        name: float(np.mean([v for v in vals if not np.isnan(v)]))
        if any(not np.isnan(v) for v in vals) else float("nan")
        for name, vals in out.items()
    }


def overlap_ratio(y_a, y_b):
    """Fraction of pixels on which two prediction maps agree."""
    y_a = check_labels(y_a)
    y_b = check_labels(y_b)
    if y_a.shape != y_b.shape:
        raise ValueError(f"shape mismatch: {y_a.shape} vs {y_b.shape}")
    return float((y_a == y_b).mean())


def write_per_class_csv(path, iou, class_names=None):
    """One row per class with its IoU; NaN cells are left empty."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class", "iou"])
        for c, v in enumerate(iou):
            name = class_names[c] if class_names else str(c)
            writer.writerow([name, "" if np.isnan(v) else repr(float(v))])


def write_summary_json(path, summary):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, allow_nan=True)
        f.write("\n")
