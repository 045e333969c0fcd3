"""Training orchestration: supervised baseline, co-training, ablations.

One iteration consumes one labeled batch and one batch of unlabeled
pairs. Per pair the two branches predict both weak images, the
predictions are mixed through the pair's rectangle mask, and the
agreement machinery turns them into targets for the strong composite
image. Supervised and pseudo-label gradients are combined into a
single momentum update per branch per iteration.

All randomness derives from the four config seeds; given those, every
logged scalar is bit-reproducible on one platform.
"""

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .augment import CutMixConfig, make_strong_image, sample_mask
from .dataio import load_dataset, partition
from .grid import IGNORE, elementwise_mix, label_mix
from .loss import (dynamic_weight, prediction_entropy, sup_loss, total_loss,
                   unsup_loss)
from .metrics import ConfusionMatrix, iou_per_class, miou, overlap_ratio
from .network import (OptimizerState, SegNetwork, confidence_map,
                      predict_argmax, save_checkpoint, sgd_step, softmax_probs)
from .pseudo import (PseudoLabels, STRATEGIES, agreement_map,
                     build_agreement_matrix, compose_intersection,
                     compose_union, disagreement_indicator, label_agreement,
                     label_disagreement_baseline, label_disagreement_cpcl)

MODES = (
    "supervised-only",
    "cpcl",
    "intersection-only",
    "union-only",
    "mutual-direct",
    "cpcl-no-dynamic-loss",
)

PAIR_MODES = tuple(m for m in MODES if m != "supervised-only")

# Validation images are run through the net in fixed-size slices so the
# layer scratch buffers stay modest.
EVAL_CHUNK = 32


@dataclass
class TrainConfig:
    mode: str = "cpcl"
    strategy: str = "class-confusion-higher"
    gamma: float = 1.0
    fraction: str = "1/8"
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    max_iter: int = 2000
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    hidden: tuple = (16, 16)
    seed_net_c: int = 1
    seed_net_p: int = 2
    seed_data: int = 3
    seed_augment: int = 4
    eval_every: int = 200
    cutmix_rects: int = 3
    cutmix_area_min: float = 0.25
    cutmix_area_max: float = 0.5
    infer_branch: str = "conservative"
    dataset_dir: str = ""
    val_dir: str = ""
    out_dir: str = ""

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode '{self.mode}', expected {MODES}")
        if self.strategy not in STRATEGIES:
            raise ValueError(
                f"unknown strategy '{self.strategy}', expected {STRATEGIES}")
        if self.mode in PAIR_MODES and self.seed_net_c == self.seed_net_p:
            raise ValueError(
                "two-branch modes need distinct seed_net_c / seed_net_p")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.infer_branch not in ("conservative", "progressive"):
            raise ValueError(
                f"infer_branch must be conservative or progressive, "
                f"got '{self.infer_branch}'")
        Fraction(self.fraction)
        return self

    def fraction_value(self):
        return Fraction(self.fraction)


@dataclass
class BranchPair:
    conservative: SegNetwork
    progressive: SegNetwork
    opt_c: OptimizerState
    opt_p: OptimizerState


@dataclass
class ExperimentReport:
    out_dir: str
    mode: str
    final_miou: float
    final_overlap: float | None
    evals: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def _make_opt(cfg):
    return OptimizerState(
        lr0=cfg.lr0, max_iter=cfg.max_iter, momentum=cfg.momentum,
        weight_decay=cfg.weight_decay, poly_power=cfg.poly_power)


def make_pair(cfg, num_classes):
    conservative = SegNetwork(
        num_classes, hidden=cfg.hidden, init_seed=cfg.seed_net_c)
    progressive = SegNetwork(
        num_classes, hidden=cfg.hidden, init_seed=cfg.seed_net_p)
    return BranchPair(conservative, progressive, _make_opt(cfg), _make_opt(cfg))


def _sup_pass(net, images, labels):
    """Supervised loss and parameter gradients on one labeled batch."""
    probs = softmax_probs(net.forward(images, train=True))
    bsz = images.shape[0]
    g = np.zeros_like(probs)
    value = 0.0
    for i in range(bsz):
        v, gi = sup_loss(labels[i], probs[i])
        value += v
        g[i] = gi / bsz
    return value / bsz, net.backward(g)


def supervised_step(net, labeled, opt, cfg, it):
    """One plain cross-entropy update on labeled data."""
    images, labels = labeled
    value, grads = _sup_pass(net, images, labels)
    sgd_step(net, grads, opt, it)
    return total_loss(value, 0.0, cfg.gamma)


def _empty_targets(shape):
    return PseudoLabels(
        labels=np.full(shape, IGNORE, dtype=np.int64),
        weights=np.zeros(shape))


def _pair_unsup_terms(cfg, num_classes, y_cw, y_pw, b_c, b_p,
                      probs_cs, probs_ps):
    """Targets, weights and loss terms for one unlabeled pair."""
    if cfg.mode == "mutual-direct":
        # Straight cross supervision, no agreement processing: each
        # branch learns the other's mixed weak prediction, weighted by
        # the confidence of the branch that produced it.
        t_c = PseudoLabels(labels=y_pw, weights=b_p.copy())
        t_p = PseudoLabels(labels=y_cw, weights=b_c.copy())
        empty = _empty_targets(y_cw.shape)
        v_c, g_cs, _ = unsup_loss(t_c, empty, probs_cs, probs_ps, b_p)
        v_p, _, g_ps = unsup_loss(empty, t_p, probs_cs, probs_ps, b_c)
        wmap = 0.5 * (b_c + b_p)
        return v_c + v_p, g_cs, g_ps, wmap

    agree = agreement_map(y_cw, y_pw)
    mtx = build_agreement_matrix(y_cw, y_pw, num_classes)
    ind = disagreement_indicator(mtx)
    l_a = label_agreement(y_cw, y_pw)
    if cfg.strategy == "class-confusion-higher":
        l_d = label_disagreement_cpcl(y_cw, y_pw, ind)
    else:
        l_d = label_disagreement_baseline(y_cw, y_pw, b_c, b_p, ind,
                                          cfg.strategy)
    if cfg.mode == "cpcl-no-dynamic-loss":
        wmap = np.ones(y_cw.shape)
    else:
        wmap = dynamic_weight(agree, b_c, b_p, l_d.source)
    l_a.weights[agree] = wmap[agree]
    l_d.weights[~agree] = wmap[~agree]
    l_union = compose_union(l_a, l_d)
    l_inter = compose_intersection(l_a)
    if cfg.mode == "intersection-only":
        t_c = t_p = l_inter
    elif cfg.mode == "union-only":
        t_c = t_p = l_union
    else:
        t_c, t_p = l_inter, l_union
    v, g_cs, g_ps = unsup_loss(t_c, t_p, probs_cs, probs_ps, wmap)
    return v, g_cs, g_ps, wmap


def cpcl_step(pair, labeled, unlabeled, cfg, it):
    """One co-training update: weak passes, pseudo targets, strong
    passes, combined supervised plus pseudo gradients, one momentum
    update per branch."""
    images, labels = labeled
    x1, x2 = unlabeled
    bu = x1.shape[0]
    h, w = x1.shape[-2:]
    num_classes = pair.conservative.num_classes
    rng = np.random.default_rng([cfg.seed_augment, it])
    cut = CutMixConfig(cfg.cutmix_rects, cfg.cutmix_area_min,
                       cfg.cutmix_area_max, cfg.seed_augment)
    masks = [sample_mask(cut, h, w, rng) for _ in range(bu)]
    xs = np.stack([make_strong_image(x1[i], x2[i], masks[i])
                   for i in range(bu)])

    weak_in = np.concatenate([x1, x2], axis=0)
    probs_cw = softmax_probs(pair.conservative.forward(weak_in, train=False))
    probs_pw = softmax_probs(pair.progressive.forward(weak_in, train=False))
    pred_cw = predict_argmax(probs_cw)
    pred_pw = predict_argmax(probs_pw)
    conf_cw = confidence_map(probs_cw)
    conf_pw = confidence_map(probs_pw)

    probs_cs = softmax_probs(pair.conservative.forward(xs, train=True))
    probs_ps = softmax_probs(pair.progressive.forward(xs, train=True))
    unsup_value = 0.0
    weight_mean = 0.0
    g_cs = np.empty_like(probs_cs)
    g_ps = np.empty_like(probs_ps)
    for i in range(bu):
        m = masks[i]
        # The same mask mixes predictions and confidences of both weak
        # images, so targets and weights describe the composite input.
        y_cw = label_mix(pred_cw[i], pred_cw[bu + i], m)
        y_pw = label_mix(pred_pw[i], pred_pw[bu + i], m)
        b_c = elementwise_mix(conf_cw[i], conf_cw[bu + i], m)
        b_p = elementwise_mix(conf_pw[i], conf_pw[bu + i], m)
        v, gc, gp, wmap = _pair_unsup_terms(
            cfg, num_classes, y_cw, y_pw, b_c, b_p, probs_cs[i], probs_ps[i])
        unsup_value += v
        weight_mean += float(wmap.mean())
        g_cs[i] = gc / bu
        g_ps[i] = gp / bu
    unsup_value /= bu
    weight_mean /= bu

    g_unsup_c = pair.conservative.backward(g_cs)
    g_unsup_p = pair.progressive.backward(g_ps)

    sup_c, g_sup_c = _sup_pass(pair.conservative, images, labels)
    sgd_step(pair.conservative,
             [gs + cfg.gamma * gu for gs, gu in zip(g_sup_c, g_unsup_c)],
             pair.opt_c, it)
    sup_p, g_sup_p = _sup_pass(pair.progressive, images, labels)
    sgd_step(pair.progressive,
             [gs + cfg.gamma * gu for gs, gu in zip(g_sup_p, g_unsup_p)],
             pair.opt_p, it)
    return total_loss(sup_c + sup_p, unsup_value, cfg.gamma,
                      mean_weight=weight_mean)


def ablation_step(pair, labeled, unlabeled, cfg, it):
    """Variant selector; the pair modes all share the cpcl_step body."""
    if cfg.mode not in PAIR_MODES:
        raise ValueError(f"unknown pair mode '{cfg.mode}'")
    return cpcl_step(pair, labeled, unlabeled, cfg, it)


def infer(model, image, branch="conservative"):
    """Predicted label map for one image or batch, prediction branch
    selectable for a BranchPair."""
    if isinstance(model, BranchPair):
        net = model.conservative if branch == "conservative" \
            else model.progressive
    else:
        net = model
    return predict_argmax(softmax_probs(net.forward(image, train=False)))


def _forward_chunked(net, images):
    out = []
    for lo in range(0, images.shape[0], EVAL_CHUNK):
        logits = net.forward(images[lo:lo + EVAL_CHUNK], train=False)
        out.append(softmax_probs(logits))
    return np.concatenate(out, axis=0)


def evaluate(model, val_images, val_labels, num_classes,
             branch="conservative"):
    """Validation metrics: mIoU, per-class IoU, branch overlap (pairs
    only) and mean prediction entropy of the scoring branch."""
    if isinstance(model, BranchPair):
        net = model.conservative if branch == "conservative" \
            else model.progressive
        other = model.progressive if branch == "conservative" \
            else model.conservative
    else:
        net, other = model, None
    probs = _forward_chunked(net, val_images)
    preds = predict_argmax(probs)
    cm = ConfusionMatrix(num_classes)
    for i in range(val_images.shape[0]):
        cm.accumulate(val_labels[i], preds[i])
    entropy = float(prediction_entropy(probs).mean())
    overlap = None
    if other is not None:
        other_preds = predict_argmax(_forward_chunked(other, val_images))
        overlap = float(np.mean([
            overlap_ratio(preds[i], other_preds[i])
            for i in range(preds.shape[0])]))
    return {
        "miou": miou(cm),
        "per_class_iou": [None if np.isnan(v) else float(v)
                          for v in iou_per_class(cm)],
        "overlap": overlap,
        "entropy": entropy,
    }


def _fmt(x):
    return repr(float(x))


def run_experiment(cfg):
    """Full training run: partition, iterate, evaluate periodically,
    write metrics.csv, report.json and final checkpoints."""
    cfg.validate()
    if not cfg.out_dir:
        raise ValueError("out_dir must be set")
    if not cfg.dataset_dir or not cfg.val_dir:
        raise ValueError("dataset_dir and val_dir must be set")
    train_samples, train_spec = load_dataset(cfg.dataset_dir)
    val_samples, val_spec = load_dataset(cfg.val_dir)
    if val_spec.num_classes != train_spec.num_classes:
        raise ValueError(
            f"class count mismatch: train {train_spec.num_classes}, "
            f"val {val_spec.num_classes}")
    num_classes = train_spec.num_classes
    if any(s.label is None for s in val_samples):
        raise ValueError("validation dataset must be fully labeled")

    labeled, unlabeled = partition(
        train_samples, cfg.fraction_value(), cfg.seed_data)
    lab_img = np.stack([s.image for s in labeled])
    lab_gt = np.stack([s.label for s in labeled])
    unl_img = np.stack([s.image for s in unlabeled]) if unlabeled else None
    val_img = np.stack([s.image for s in val_samples])
    val_gt = np.stack([s.label for s in val_samples])

    pair_mode = cfg.mode in PAIR_MODES
    if pair_mode:
        if unl_img is None:
            raise ValueError("no unlabeled samples left for co-training")
        model = make_pair(cfg, num_classes)
    else:
        model = SegNetwork(
            num_classes, hidden=cfg.hidden, init_seed=cfg.seed_net_c)
        opt = _make_opt(cfg)

    os.makedirs(cfg.out_dir, exist_ok=True)
    evals = []

    def run_eval(done):
        snap = evaluate(model, val_img, val_gt, num_classes,
                        branch=cfg.infer_branch)
        snap["step"] = done
        evals.append(snap)
        return snap

    run_eval(0)
    mpath = os.path.join(cfg.out_dir, "metrics.csv")
    with open(mpath, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "sup_loss", "unsup_loss", "mean_weight",
                         "miou"])
        for it in range(cfg.max_iter):
            rng_b = np.random.default_rng([cfg.seed_data, 1, it])
            li = rng_b.choice(lab_img.shape[0], size=cfg.batch_labeled,
                              replace=lab_img.shape[0] < cfg.batch_labeled)
            batch = (lab_img[li], lab_gt[li])
            if pair_mode:
                m = unl_img.shape[0]
                ui = rng_b.choice(m, size=2 * cfg.batch_unlabeled,
                                  replace=m < 2 * cfg.batch_unlabeled)
                pair_batch = (unl_img[ui[:cfg.batch_unlabeled]],
                              unl_img[ui[cfg.batch_unlabeled:]])
                if cfg.mode == "cpcl":
                    report = cpcl_step(model, batch, pair_batch, cfg, it)
                else:
                    report = ablation_step(model, batch, pair_batch, cfg, it)
            else:
                report = supervised_step(model, batch, opt, cfg, it)
            if not np.isfinite(report.total):
                raise RuntimeError(
                    f"non-finite loss at iteration {it}: {report}")
            done = it + 1
            row_miou = ""
            if done % cfg.eval_every == 0 or done == cfg.max_iter:
                row_miou = _fmt(run_eval(done)["miou"])
            writer.writerow([
                done, _fmt(report.supervised), _fmt(report.unsupervised),
                "" if np.isnan(report.mean_weight)
                else _fmt(report.mean_weight),
                row_miou])

    ckpt_dir = os.path.join(cfg.out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    stems = []
    if pair_mode:
        for name, net in (("conservative", model.conservative),
                          ("progressive", model.progressive)):
            stem = os.path.join(ckpt_dir, name)
            save_checkpoint(net, stem)
            stems.append(stem)
    else:
        stem = os.path.join(ckpt_dir, "model")
        save_checkpoint(model, stem)
        stems.append(stem)

    final = evals[-1]
    report_doc = {
        "config": asdict(cfg),
        "evals": evals,
        "final": final,
    }
    with open(os.path.join(cfg.out_dir, "report.json"), "w",
              encoding="utf-8") as f:
        json.dump(report_doc, f, indent=2)
        f.write("\n")
    return ExperimentReport(
        out_dir=cfg.out_dir, mode=cfg.mode, final_miou=final["miou"],
        final_overlap=final["overlap"], evals=evals, checkpoints=stems)
