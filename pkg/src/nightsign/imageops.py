"""Plain-numpy image helpers shared by the dataset, synthesis and
augmentation code. Nothing here participates in gradient graphs; the
differentiable counterparts live in :mod:`nightsign.autodiff`.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import _bilinear_weights


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized Gaussian taps with half-width ceil(3*sigma)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def resize_bilinear_np(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize (half-pixel centers) of an (H, W[, C]) array."""
    img = np.asarray(img, dtype=np.float64)
    for axis, n_out in ((0, out_h), (1, out_w)):
        n_in = img.shape[axis]
        if n_in == n_out:
            continue
        i0, i1, w0, w1 = _bilinear_weights(n_in, n_out)
        shape = [1] * img.ndim
        shape[axis] = n_out
        img = (np.take(img, i0, axis=axis) * w0.reshape(shape)
               + np.take(img, i1, axis=axis) * w1.reshape(shape))
    return img


def letterbox_square(img: np.ndarray, pad_value: float = 0.0) -> np.ndarray:
    """Center-pad an (H, W, C) image to a square canvas."""
    h, w = img.shape[:2]
    side = max(h, w)
    out = np.full((side, side) + img.shape[2:], pad_value, dtype=np.float64)
    top = (side - h) // 2
    left = (side - w) // 2
    out[top:top + h, left:left + w] = img
    return out


def load_image(path: str | Path) -> np.ndarray:
    """Read an image file as float64 RGB in [0, 1], shape (H, W, 3)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def save_image(path: str | Path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img)).save(path)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
