"""Strong augmentation: random rectangle masks and image mixing.

A mask is the union of a few axis-aligned rectangles with random area
and aspect; mixing two unlabeled images through such a mask produces
the composite input that the co-training step perturbs most heavily.
"""

from dataclasses import dataclass

import numpy as np

from .grid import elementwise_mix

ASPECT_MIN = 0.5
ASPECT_MAX = 2.0


@dataclass(frozen=True)
class CutMixConfig:
    num_rects: int = 3
    area_ratio_min: float = 0.25
    area_ratio_max: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.area_ratio_min <= self.area_ratio_max <= 1.0):
            raise ValueError(
                f"need 0 < area_ratio_min <= area_ratio_max <= 1, got "
                f"[{self.area_ratio_min}, {self.area_ratio_max}]")
        if self.num_rects < 1:
            raise ValueError(f"num_rects must be >= 1, got {self.num_rects}")


def sample_mask(cfg, height, width, rng):
    """Draw a binary (height, width) mask, union of cfg.num_rects rectangles.

    Each rectangle covers an area fraction drawn uniformly from
    [area_ratio_min, area_ratio_max] with aspect drawn from
    [0.5, 2.0]. A side that would exceed the image is clamped and the
    lost extent moved to the other side, so a ratio of 1.0 always
    yields full coverage. Deterministic given the generator state.
    """
    if height < 4 or width < 4:
        raise ValueError(f"image extents too small: {height}x{width}")
    mask = np.zeros((height, width), dtype=np.int64)
    for _ in range(cfg.num_rects):
        frac = rng.uniform(cfg.area_ratio_min, cfg.area_ratio_max)
        aspect = rng.uniform(ASPECT_MIN, ASPECT_MAX)
        area = frac * height * width
        rh = np.sqrt(area * aspect)
        rw = np.sqrt(area / aspect)
        if rh > height:
            rh = float(height)
            rw = min(float(width), area / rh)
        elif rw > width:
            rw = float(width)
            rh = min(float(height), area / rw)
        h = min(height, max(1, int(round(rh))))
        w = min(width, max(1, int(round(rw))))
        y0 = int(rng.integers(0, height - h + 1))
        x0 = int(rng.integers(0, width - w + 1))
        mask[y0:y0 + h, x0:x0 + w] = 1
    return mask


def make_strong_image(x1, x2, mask):
    """Composite input: x2 pasted over x1 wherever the mask is set."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ValueError(f"shape mismatch: {x1.shape} vs {x2.shape}")
    return elementwise_mix(x1, x2, mask)
