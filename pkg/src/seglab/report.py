"""Figure rendering and summary tables for finished runs.

Every renderer takes files a run already wrote (metrics.csv,
report.json, dataset directories) and drops PNG figures next to them;
nothing here feeds back into training.
"""

import csv
import json
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .dataio import ANCHOR_COLORS, load_dataset


def read_metrics(path):
    """Columns of a metrics.csv as float arrays; sparse cells are NaN."""
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            rows.append(row)
    cols = {}
    for key in ("step", "sup_loss", "unsup_loss", "mean_weight", "miou"):
        cols[key] = np.array(
            [float(r[key]) if r[key] else np.nan for r in rows])
    return cols


def plot_loss_curves(metrics, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(metrics["step"], metrics["sup_loss"], label="supervised",
            lw=0.8)
    if not np.isnan(metrics["unsup_loss"]).all():
        ax.plot(metrics["step"], metrics["unsup_loss"], label="pseudo",
                lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_val_curves(evals, path):
    steps = [e["step"] for e in evals]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    axes[0].plot(steps, [e["miou"] for e in evals], marker="o", ms=3)
    axes[0].set_title("validation mIoU")
    overlaps = [e.get("overlap") for e in evals]
    if all(v is not None for v in overlaps):
        axes[1].plot(steps, overlaps, marker="o", ms=3, color="tab:orange")
    axes[1].set_title("branch overlap")
    axes[2].plot(steps, [e["entropy"] for e in evals], marker="o", ms=3,
                 color="tab:green")
    axes[2].set_title("prediction entropy")
    for ax in axes:
        ax.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_per_class_iou(per_class, path):
    vals = [np.nan if v is None else v for v in per_class]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(range(len(vals)), vals,
           color=[ANCHOR_COLORS[c % len(ANCHOR_COLORS)]
                  for c in range(len(vals))])
    ax.set_xlabel("class")
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_run(run_dir):
    """All figures for one training run, written into the run directory."""
    with open(os.path.join(run_dir, "report.json"), "r",
              encoding="utf-8") as f:
        doc = json.load(f)
    metrics = read_metrics(os.path.join(run_dir, "metrics.csv"))
    plot_loss_curves(metrics, os.path.join(run_dir, "loss_curves.png"))
    plot_val_curves(doc["evals"], os.path.join(run_dir, "val_curves.png"))
    plot_per_class_iou(doc["final"]["per_class_iou"],
                       os.path.join(run_dir, "per_class_iou.png"))
    return [os.path.join(run_dir, name) for name in
            ("loss_curves.png", "val_curves.png", "per_class_iou.png")]


def plot_comparison(rows, path):
    """Bar chart of final mIoU per variant row (name, miou)."""
    names = [r[0] for r in rows]
    vals = [np.nan if r[1] is None else r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(rows)), 4))
    ax.bar(range(len(rows)), vals, color="tab:blue")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("final mIoU")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def label_to_rgb(label):
    rgb = np.zeros(label.shape + (3,))
    for c in range(ANCHOR_COLORS.shape[0]):
        rgb[label == c] = ANCHOR_COLORS[c]
    return rgb


def render_dataset_preview(dataset_dir, count=8):
    """Side-by-side image / label montage for the first few samples."""
    samples, _ = load_dataset(dataset_dir)
    samples = samples[:count]
    n = len(samples)
    fig, axes = plt.subplots(2, n, figsize=(1.6 * n, 3.4))
    axes = np.atleast_2d(axes)
    for i, s in enumerate(samples):
        axes[0, i].imshow(np.clip(np.moveaxis(s.image, 0, 2), 0, 1))
        axes[0, i].set_title(s.id, fontsize=7)
        if s.label is not None:
            axes[1, i].imshow(label_to_rgb(s.label))
        for row in (0, 1):
            axes[row, i].set_xticks([])
            axes[row, i].set_yticks([])
    fig.tight_layout()
    out = os.path.join(dataset_dir, "preview.png")
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
