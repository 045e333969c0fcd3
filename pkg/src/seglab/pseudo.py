"""Agreement analysis and pseudo-label composition for the two branches.

Where the branches predict the same class the pixel becomes a cautious
shared target. Where they differ, a class-wise confusion score decides
which branch's guess survives: each class c gets an indicator
I_c = 2 - diag_c/rowsum_c - diag_c/colsum_c of the co-prediction count
matrix, and the disputed pixel takes the class with the higher score,
on the theory that the branch naming a harder class is the one worth
listening to. The union of both parts supervises the exploratory
branch, the agreement part alone supervises the cautious one.
"""

from dataclasses import dataclass

import numpy as np

from .grid import IGNORE, check_labels

# Which branch produced a pseudo label at a pixel.
SOURCE_NONE = -1        # agreement pixel, both branches share credit
SOURCE_CONSERVATIVE = 0
SOURCE_PROGRESSIVE = 1

STRATEGIES = (
    "pixel-confidence-higher",
    "pixel-confidence-lower",
    "class-confusion-lower",
    "class-confusion-higher",
)


@dataclass(eq=False)
class PseudoLabels:
    """Per-pixel targets plus per-pixel loss weights for one flavor.

    weights start at zero and are filled by loss.dynamic_weight once
    confidences are known; source records the producing branch per
    pixel so the weight assignment can trace it.
    """
    labels: np.ndarray
    weights: np.ndarray
    source: np.ndarray | None = None


def _check_pair(y_c, y_p):
    y_c = check_labels(y_c)
    y_p = check_labels(y_p)
    if y_c.shape != y_p.shape:
        raise ValueError(f"shape mismatch: {y_c.shape} vs {y_p.shape}")
    if (y_c == IGNORE).any() or (y_p == IGNORE).any():
        raise ValueError("weak predictions must be total (no IGNORE)")
    return y_c, y_p


def agreement_map(y_c, y_p):
    """Boolean map, true where the two branches predict the same class."""
    y_c, y_p = _check_pair(y_c, y_p)
    return y_c == y_p


def build_agreement_matrix(y_c, y_p, num_classes):
    """Count matrix m[j, k] = pixels where the cautious branch says j
    and the exploratory branch says k."""
    y_c, y_p = _check_pair(y_c, y_p)
    if y_c.max() >= num_classes or y_p.max() >= num_classes:
        raise ValueError(
            f"label out of range for {num_classes} classes: "
            f"max {max(int(y_c.max()), int(y_p.max()))}")
    flat = y_c.ravel() * num_classes + y_p.ravel()
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes).astype(np.int64)


def disagreement_indicator(m):
    """Class-wise disagreement score in [0, 2].

    I_c = 2 - m_cc/rowsum_c - m_cc/colsum_c, where a fraction with a
    zero denominator counts as 0, so a class absent from one branch
    scores the maximal 2.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got {m.shape}")
    if (m < 0).any():
        raise ValueError("negative counts in agreement matrix")
    diag = np.diag(m)
    rows = m.sum(axis=1)
    cols = m.sum(axis=0)
    frac_r = np.divide(diag, rows, out=np.zeros_like(diag), where=rows > 0)
    frac_c = np.divide(diag, cols, out=np.zeros_like(diag), where=cols > 0)
    return 2.0 - frac_r - frac_c


def label_agreement(y_c, y_p):
    """Targets on agreement pixels only; everything else is IGNORE."""
    y_c, y_p = _check_pair(y_c, y_p)
    agree = y_c == y_p
    labels = np.where(agree, y_c, IGNORE)
    source = np.full(y_c.shape, SOURCE_NONE, dtype=np.int8)
    return PseudoLabels(
        labels=labels, weights=np.zeros(y_c.shape), source=source)


def label_disagreement_cpcl(y_c, y_p, ind):
    """Targets on disagreement pixels: the class whose indicator is
    higher wins; an exact tie goes to the cautious branch."""
    y_c, y_p = _check_pair(y_c, y_p)
    ind = np.asarray(ind, dtype=np.float64)
    agree = y_c == y_p
    take_p = ind[y_p] > ind[y_c]
    labels = np.where(take_p, y_p, y_c)
    labels[agree] = IGNORE
    source = np.where(take_p, SOURCE_PROGRESSIVE,
                      SOURCE_CONSERVATIVE).astype(np.int8)
    source[agree] = SOURCE_NONE
    return PseudoLabels(
        labels=labels, weights=np.zeros(y_c.shape), source=source)


def compose_union(l_a, l_d):
    """Merge agreement and disagreement parts into a total target map."""
    if l_a.labels.shape != l_d.labels.shape:
        raise ValueError(
            f"shape mismatch: {l_a.labels.shape} vs {l_d.labels.shape}")
    a_has = l_a.labels != IGNORE
    d_has = l_d.labels != IGNORE
    if (a_has & d_has).any():
        raise RuntimeError("agreement and disagreement supports overlap")
    labels = np.where(a_has, l_a.labels, l_d.labels)
    weights = np.where(a_has, l_a.weights, l_d.weights)
    if l_a.source is not None and l_d.source is not None:
        source = np.where(a_has, l_a.source, l_d.source)
    else:
        source = None
    return PseudoLabels(labels=labels, weights=weights, source=source)


def compose_intersection(l_a):
    """The cautious flavor is the agreement part itself."""
    return l_a


def label_by_threshold(probs, threshold):
    """Plain confidence gating: keep the argmax class where its
    probability beats the threshold, IGNORE elsewhere."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    conf = probs.max(axis=0)
    pred = np.argmax(probs, axis=0).astype(np.int64)
    labels = np.where(conf > threshold, pred, IGNORE)
    return PseudoLabels(labels=labels, weights=np.zeros(labels.shape))


def label_disagreement_baseline(y_c, y_p, conf_c, conf_p, ind, strategy):
    """Alternative rules for resolving disagreement pixels.

    pixel-confidence-higher/-lower pick the branch with the larger or
    smaller per-pixel confidence; class-confusion-lower/-higher pick
    the class with the smaller or larger indicator. All ties go to the
    cautious branch. class-confusion-higher is the default rule and
    matches label_disagreement_cpcl exactly.
    """
    y_c, y_p = _check_pair(y_c, y_p)
    conf_c = np.asarray(conf_c, dtype=np.float64)
    conf_p = np.asarray(conf_p, dtype=np.float64)
    ind = np.asarray(ind, dtype=np.float64)
    if strategy == "pixel-confidence-higher":
        take_p = conf_p > conf_c
    elif strategy == "pixel-confidence-lower":
        take_p = conf_p < conf_c
    elif strategy == "class-confusion-lower":
        take_p = ind[y_p] < ind[y_c]
    elif strategy == "class-confusion-higher":
        take_p = ind[y_p] > ind[y_c]
    else:
        raise ValueError(
            f"unknown strategy '{strategy}', expected one of {STRATEGIES}")
    agree = y_c == y_p
    labels = np.where(take_p, y_p, y_c)
    labels[agree] = IGNORE
    source = np.where(take_p, SOURCE_PROGRESSIVE,
                      SOURCE_CONSERVATIVE).astype(np.int8)
    source[agree] = SOURCE_NONE
    return PseudoLabels(
        labels=labels, weights=np.zeros(y_c.shape), source=source)
