"""Synthetic shapes dataset: generation, partition protocol, disk format.

Each image holds 1 to 4 filled shapes (rectangle, disk, triangle, one
class per kind) over a gradient-shaded background class, with optional
additive Gaussian pixel noise on the image only. Labels are exact.
A global color shift drawn per image varies appearance across the
dataset, so a small labeled subset undercovers the appearance range
while the class geometry stays fixed. The combined per-pixel scatter
(shift + jitter or gradient) stays under half the minimum anchor
distance, so a nearest-mean classifier is still perfect on noise-free
pixels and the task stays learnable by very small networks.

On disk a dataset is a directory: manifest.json, images/<id>.f64
(little-endian float64), labels/<id>.u8 (one byte per pixel, 255 means
no target).
"""

import json
import os
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .grid import IGNORE

# Row per class: background, rectangle, disk, triangle.
ANCHOR_COLORS = np.array([
    [0.08, 0.08, 0.08],
    [0.92, 0.14, 0.14],
    [0.14, 0.92, 0.14],
    [0.20, 0.30, 0.95],
])

# Per-shape color jitter, background gradient amplitude, and the
# per-image global shift range. Worst-case deviation from an anchor is
# (IMAGE_SHIFT + COLOR_JITTER) * sqrt(3) ~= 0.416, under half the
# minimum anchor distance (0.844 / 2 = 0.422), preserving the
# nearest-mean separability invariant on clean pixels.
COLOR_JITTER = 0.05
GRADIENT_AMP = 0.07
IMAGE_SHIFT = 0.19

ALLOWED_FRACTIONS = (
    Fraction(1, 2), Fraction(1, 4), Fraction(1, 8), Fraction(1, 16))


class FormatError(Exception):
    """An on-disk artifact does not match its declared format."""


@dataclass(frozen=True)
class DatasetSpec:
    num_samples: int = 200
    height: int = 32
    width: int = 32
    num_classes: int = 4
    noise_sigma: float = 0.15
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError(f"num_samples must be >= 1, got {self.num_samples}")
        if self.height < 8 or self.width < 8:
            raise ValueError(
                f"image extents too small: {self.height}x{self.width}")
        if not 2 <= self.num_classes <= 4:
            raise ValueError(
                f"num_classes must be in [2, 4] (background plus up to "
                f"3 shape kinds), got {self.num_classes}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass(eq=False)
class Sample:
    image: np.ndarray
    label: np.ndarray | None
    id: str


def _rect_mask(yy, xx, cy, cx, hh, hw):
    return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)


def _disk_mask(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _triangle_mask(yy, xx, verts):
    inside_pos = np.ones(yy.shape, dtype=bool)
    inside_neg = np.ones(yy.shape, dtype=bool)
    for i in range(3):
        ay, ax = verts[i]
        by, bx = verts[(i + 1) % 3]
        cross = (bx - ax) * (yy - ay) - (by - ay) * (xx - ax)
        inside_pos &= cross >= 0
        inside_neg &= cross <= 0
    return inside_pos | inside_neg


def _draw_shape(rng, kind, yy, xx, h, w, large):
    """Random geometry for one shape; large=True draws from the upper
    size range so the shape keeps a guaranteed pixel share."""
    s = min(h, w)
    cy = rng.uniform(0.25 * h, 0.75 * h)
    cx = rng.uniform(0.25 * w, 0.75 * w)
    if kind == 1:
        lo = 0.13 if large else 0.06
        hh = rng.uniform(lo * s, 0.20 * s)
        hw = rng.uniform(lo * s, 0.20 * s)
        return _rect_mask(yy, xx, cy, cx, hh, hw)
    if kind == 2:
        lo = 0.14 if large else 0.08
        r = rng.uniform(lo * s, 0.20 * s)
        return _disk_mask(yy, xx, cy, cx, r)
    lo = 0.16 if large else 0.10
    r = rng.uniform(lo * s, 0.23 * s)
    rot = rng.uniform(0.0, 2.0 * np.pi)
    angles = rot + np.array([0.0, 2.0, 4.0]) * np.pi / 3.0
    angles = angles + rng.uniform(-0.3, 0.3, size=3)
    verts = [(cy + r * np.sin(a), cx + r * np.cos(a)) for a in angles]
    return _triangle_mask(yy, xx, verts)


def _generate_sample(spec, index):
    rng = np.random.default_rng([spec.rng_seed, index])
    h, w, c = spec.height, spec.width, spec.num_classes
    yy, xx = np.indices((h, w), dtype=np.float64)

    theta = rng.uniform(0.0, 2.0 * np.pi)
    amp = rng.uniform(-GRADIENT_AMP, GRADIENT_AMP, size=3)
    shift = rng.uniform(-IMAGE_SHIFT, IMAGE_SHIFT, size=3)
    t = (yy / h - 0.5) * np.sin(theta) + (xx / w - 0.5) * np.cos(theta)
    image = ANCHOR_COLORS[0][:, None, None] + amp[:, None, None] * t
    label = np.zeros((h, w), dtype=np.int64)

    # The last shape's class cycles through all shape kinds so every
    # class keeps at least a deterministic share of the dataset's
    # pixels; drawn last, it is never occluded.
    n_shapes = int(rng.integers(1, 5))
    kinds = [int(rng.integers(1, c)) for _ in range(n_shapes - 1)]
    kinds.append(1 + index % (c - 1))
    for j, kind in enumerate(kinds):
        forced = j == len(kinds) - 1
        mask = _draw_shape(rng, kind, yy, xx, h, w, large=forced)
        color = ANCHOR_COLORS[kind] + rng.uniform(
            -COLOR_JITTER, COLOR_JITTER, size=3)
        image[:, mask] = color[:, None]
        label[mask] = kind

    image += shift[:, None, None]
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return Sample(image=image, label=label, id=f"{index:05d}")


def generate_dataset(spec):
    """All samples for a spec, labels included; deterministic per seed."""
    return [_generate_sample(spec, i) for i in range(spec.num_samples)]


def partition(samples, fraction, rng_seed):
    """Split into (labeled, unlabeled) subsets.

    The labeled subset holds floor(fraction * N) randomly chosen
    samples; the rest are returned with labels stripped. Both keep
    dataset order.
    """
    frac = Fraction(fraction)
    if frac not in ALLOWED_FRACTIONS:
        raise ValueError(
            f"fraction must be one of 1/2, 1/4, 1/8, 1/16, got {fraction}")
    n = len(samples)
    n_lab = int(frac * n)
    if n_lab < 1:
        raise ValueError(
            f"fraction {fraction} of {n} samples leaves no labeled data")
    rng = np.random.default_rng(rng_seed)
    perm = rng.permutation(n)
    lab_idx = np.sort(perm[:n_lab])
    unl_idx = np.sort(perm[n_lab:])
    labeled = [samples[i] for i in lab_idx]
    unlabeled = [replace(samples[i], label=None) for i in unl_idx]
    return labeled, unlabeled


def save_dataset(samples, path, spec):
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    os.makedirs(os.path.join(path, "labels"), exist_ok=True)
    labeled_ids = [s.id for s in samples if s.label is not None]
    manifest = {
        "ids": [s.id for s in samples],
        "height": spec.height,
        "width": spec.width,
        "num_classes": spec.num_classes,
        "noise_sigma": spec.noise_sigma,
        "rng_seed": spec.rng_seed,
        "labeled_ids": labeled_ids,
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    for s in samples:
        with open(os.path.join(path, "images", s.id + ".f64"), "wb") as f:
            f.write(np.ascontiguousarray(s.image, dtype="<f8").tobytes())
        if s.label is not None:
            with open(os.path.join(path, "labels", s.id + ".u8"), "wb") as f:
                f.write(s.label.astype(np.uint8).tobytes())


def load_dataset(path):
    """Read a dataset directory back; returns (samples, spec).

    Every structural problem raises FormatError naming the offending
    file.
    """
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt manifest {mpath}: {e}")
    for key in ("ids", "height", "width", "num_classes", "noise_sigma",
                "rng_seed", "labeled_ids"):
        if key not in manifest:
            raise FormatError(f"manifest {mpath} missing field '{key}'")
    h, w, c = manifest["height"], manifest["width"], manifest["num_classes"]
    labeled_ids = set(manifest["labeled_ids"])
    samples = []
    for sid in manifest["ids"]:
        ipath = os.path.join(path, "images", sid + ".f64")
        with open(ipath, "rb") as f:
            raw = f.read()
        if len(raw) != 3 * h * w * 8:
            raise FormatError(
                f"image blob {ipath} holds {len(raw)} bytes, "
                f"expected {3 * h * w * 8}")
        image = np.frombuffer(raw, dtype="<f8").reshape(3, h, w).copy()
        if not np.isfinite(image).all():
            raise FormatError(f"image blob {ipath} holds non-finite values")
        label = None
        if sid in labeled_ids:
            lpath = os.path.join(path, "labels", sid + ".u8")
            with open(lpath, "rb") as f:
                lraw = f.read()
            if len(lraw) != h * w:
                raise FormatError(
                    f"label file {lpath} holds {len(lraw)} bytes, "
                    f"expected {h * w}")
            label = np.frombuffer(lraw, dtype=np.uint8).reshape(h, w)
            label = label.astype(np.int64)
            bad = (label != IGNORE) & (label >= c)
            if bad.any():
                raise FormatError(
                    f"label file {lpath} holds class "
                    f"{int(label[bad][0])}, manifest declares {c} classes")
        samples.append(Sample(image=image, label=label, id=sid))
    spec = DatasetSpec(
        num_samples=len(samples), height=h, width=w, num_classes=c,
        noise_sigma=manifest["noise_sigma"], rng_seed=manifest["rng_seed"])
    return samples, spec
