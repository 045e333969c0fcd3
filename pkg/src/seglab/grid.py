"""Dense grid primitives shared by every other module.

Storage convention: images, logits and probability maps are float64
arrays shaped (C, H, W) or (B, C, H, W); label maps are int64 arrays
shaped (H, W); mix masks are binary int64 arrays shaped (H, W).
Plain C-contiguous numpy arrays, row-major flat data plus an explicit
shape, the same layout the on-disk format uses. Values are treated as
immutable once produced.
"""

import numpy as np

# Reserved label value meaning "no target at this pixel".
IGNORE = 255


def check_image(x, channels=None):
    """Validate a float image/probability grid; returns it as float64."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 3, 4):
        raise ValueError(f"expected 2-4 dims, got shape {x.shape}")
    if channels is not None and x.shape[-3] != channels:
        raise ValueError(f"expected {channels} channels, got {x.shape[-3]}")
    if not np.isfinite(x).all():
        raise ValueError("non-finite values in grid")
    return x


def check_labels(y, num_classes=None):
    """Validate a label map: int64, every value < num_classes or IGNORE."""
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"label map must be integer, got {y.dtype}")
    y = y.astype(np.int64, copy=False)
    if num_classes is not None:
        bad = (y != IGNORE) & ((y < 0) | (y >= num_classes))
        if bad.any():
            raise ValueError(
                f"label value out of range [0, {num_classes}) at "
                f"{np.argwhere(bad)[0].tolist()}")
    return y


def check_mask(mask):
    """Validate a binary mix mask."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if not (((mask == 0) | (mask == 1)).all()):
        raise ValueError("mask values must be 0 or 1")
    return mask.astype(np.int64, copy=False)


def elementwise_mix(a, b, mask):
    """Per-pixel select between two grids: (1 - mask) * a + mask * b.

    The mask spans the trailing (H, W) extents and broadcasts over any
    leading channel dimension.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mask = check_mask(mask)
    if a.shape[-2:] != mask.shape:
        raise ValueError(
            f"mask shape {mask.shape} does not match spatial extents "
            f"{a.shape[-2:]}")
    m = mask.astype(np.float64)
    return (1.0 - m) * a + m * b


def label_mix(a, b, mask):
    """Select label b where mask is 1, label a elsewhere.

    IGNORE travels with whichever source the mask selects.
    """
    a = check_labels(a)
    b = check_labels(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mask = check_mask(mask)
    if a.shape != mask.shape:
        raise ValueError(
            f"mask shape {mask.shape} does not match labels {a.shape}")
    return np.where(mask == 1, b, a)
