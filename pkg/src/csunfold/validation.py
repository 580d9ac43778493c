"""Input validation helpers shared by the estimator layer and the CLI."""

from __future__ import annotations

import numpy as np


def check_image(x, name="X"):
    """Coerce to a finite 2-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D grayscale image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_images(x, name="X"):
    """Accept one image or a sequence of images; always returns a list."""
    if isinstance(x, np.ndarray) and x.ndim == 2:
        return [check_image(x, name)]
    if isinstance(x, np.ndarray) and x.ndim == 3:
        return [check_image(img, f"{name}[{i}]") for i, img in enumerate(x)]
    try:
        items = list(x)
    except TypeError:
        raise ValueError(f"{name} must be an image or a sequence of images") from None
    if not items:
        raise ValueError(f"{name} is empty")
    return [check_image(img, f"{name}[{i}]") for i, img in enumerate(items)]


def check_rate(rate):
    rate = float(rate)
    if not 0 < rate <= 1:
        raise ValueError(f"sampling rate must be in (0, 1], got {rate}")
    return rate
