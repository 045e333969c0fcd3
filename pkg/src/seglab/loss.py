"""Objectives: entropy diagnostic, confidence weights, cross-entropies.

The unsupervised term re-weights per-pixel cross-entropy by a
confidence taken from whichever branch produced the pseudo label, and
normalizes by the full pixel count, so untargeted pixels contribute
zero but still dilute the average. Pseudo labels and weights are
constants: gradients flow only into the strong-pass logits.
"""

from dataclasses import dataclass

import numpy as np

from .grid import IGNORE
from .pseudo import SOURCE_CONSERVATIVE, SOURCE_NONE, SOURCE_PROGRESSIVE

# Probability floor inside log() terms.
EPS = 1e-12


@dataclass(frozen=True)
class LossReport:
    total: float
    supervised: float
    unsupervised: float
    gamma: float
    mean_weight: float


def prediction_entropy(probs):
    """Per-pixel Shannon entropy -sum_c p_c log p_c, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return -plogp.sum(axis=-3)


def dynamic_weight(agree, conf_c, conf_p, source):
    """Per-pixel loss weight from branch confidences.

    Agreement pixels average both confidences; a disagreement pixel
    takes the confidence of the branch its label came from.
    """
    agree = np.asarray(agree, dtype=bool)
    conf_c = np.asarray(conf_c, dtype=np.float64)
    conf_p = np.asarray(conf_p, dtype=np.float64)
    source = np.asarray(source)
    if not (agree.shape == conf_c.shape == conf_p.shape == source.shape):
        raise ValueError(
            f"shape mismatch: {agree.shape}, {conf_c.shape}, "
            f"{conf_p.shape}, {source.shape}")
    if (~agree & (source == SOURCE_NONE)).any():
        raise RuntimeError("disagreement pixel with no source branch")
    w = np.where(source == SOURCE_CONSERVATIVE, conf_c, 0.0)
    w = np.where(source == SOURCE_PROGRESSIVE, conf_p, w)
    return np.where(agree, 0.5 * (conf_c + conf_p), w)


def _weighted_ce(labels, weights, probs):
    """Sum over pixels of weight * CE(label, probs) divided by H*W,
    plus the matching logit gradient. IGNORE pixels contribute zero."""
    c, h, w = probs.shape
    flat = probs.reshape(c, h * w)
    lab = labels.ravel()
    valid = lab != IGNORE
    coef = np.where(valid, weights.ravel(), 0.0) / (h * w)
    pos = np.nonzero(valid)[0]
    p_y = flat[lab[pos], pos]
    value = float(-(coef[pos] * np.log(np.maximum(p_y, EPS))).sum())
    grad = flat * coef[None, :]
    grad[lab[pos], pos] -= coef[pos]
    return value, grad.reshape(c, h, w)


def unsup_loss(l_inter, l_union, probs_cs, probs_ps, w):
    """Re-weighted pseudo-label loss on one strong-augmented pair.

    The cautious branch is scored against the agreement-only targets,
    the exploratory branch against the total targets, both weighted by
    w and normalized by the pixel count. Returns
    (value, grad_logits_cautious, grad_logits_exploratory); targets
    and weights are constants with no gradient of their own.
    """
    probs_cs = np.asarray(probs_cs, dtype=np.float64)
    probs_ps = np.asarray(probs_ps, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if probs_cs.shape != probs_ps.shape:
        raise ValueError(
            f"shape mismatch: {probs_cs.shape} vs {probs_ps.shape}")
    if w.shape != probs_cs.shape[-2:] or l_inter.labels.shape != w.shape \
            or l_union.labels.shape != w.shape:
        raise ValueError("pseudo labels, weights and probs disagree on H x W")
    v_inter, g_cs = _weighted_ce(l_inter.labels, w, probs_cs)
    v_union, g_ps = _weighted_ce(l_union.labels, w, probs_ps)
    return v_inter + v_union, g_cs, g_ps


def sup_loss(gt, probs):
    """Mean cross-entropy over non-IGNORE pixels, with logit gradient."""
    probs = np.asarray(probs, dtype=np.float64)
    gt = np.asarray(gt)
    c, h, w = probs.shape
    if gt.shape != (h, w):
        raise ValueError(f"label shape {gt.shape} != spatial {(h, w)}")
    bad = (gt != IGNORE) & ((gt < 0) | (gt >= c))
    if bad.any():
        raise ValueError(f"label out of range [0, {c})")
    flat = probs.reshape(c, h * w)
    lab = gt.ravel()
    valid = lab != IGNORE
    count = int(valid.sum())
    if count == 0:
        raise ValueError("every pixel is IGNORE, no supervised target")
    coef = valid.astype(np.float64) / count
    pos = np.nonzero(valid)[0]
    p_y = flat[lab[pos], pos]
    value = float(-(np.log(np.maximum(p_y, EPS)).sum()) / count)
    grad = flat * coef[None, :]
    grad[lab[pos], pos] -= coef[pos]
    return value, grad.reshape(c, h, w)


def total_loss(sup, unsup, gamma, mean_weight=float("nan")):
    """Combine the two objectives: total = sup + gamma * unsup."""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    return LossReport(
        total=sup + gamma * unsup, supervised=sup, unsupervised=unsup,
        gamma=gamma, mean_weight=mean_weight)
