"""Resizing and intensity normalisation.

Both resizers use half-pixel centres: destination pixel ``i`` samples source
coordinate ``(i + 0.5) * scale - 0.5`` with ``scale = in / out``. Bilinear
resizing is separable; when shrinking with anti-aliasing the triangle
kernel is stretched by ``scale`` so every source pixel under the footprint
contributes. Weights are renormalised over in-frame taps, which is the same
as clamping at the border.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParameterError


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: int = 224
    antialias: bool = True
    normalize_mode: str = "unit_range"

    def __post_init__(self):
        if self.target_size <= 0:
            raise ParameterError(f"target_size must be positive, got {self.target_size}")
        if self.normalize_mode != "unit_range":
            raise ParameterError(f"unsupported normalize_mode {self.normalize_mode!r}")


def _check_size(out_h: int, out_w: int) -> None:
    if int(out_h) < 1 or int(out_w) < 1:
        raise ParameterError(f"target size must be at least 1x1, got {out_h}x{out_w}")


def resize_weights(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    """The ``n_out x n_in`` interpolation matrix along one axis."""
    scale = n_in / n_out
    support = scale if (antialias and scale > 1.0) else 1.0
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    taps = np.arange(n_in)
    w = np.maximum(0.0, 1.0 - np.abs(taps[None, :] - centers[:, None]) / support)
    empty = w.sum(axis=1) == 0
    if empty.any():
        # centre fell outside the frame by more than one tap: use the nearest edge pixel
        idx = np.clip(np.rint(centers[empty]), 0, n_in - 1).astype(int)
        w[empty] = 0.0
        w[np.flatnonzero(empty), idx] = 1.0
    return w / w.sum(axis=1, keepdims=True)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    """Resize an ``H x W`` or ``H x W x C`` float image."""
    _check_size(out_h, out_w)
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    wy = resize_weights(h, out_h, antialias)
    wx = resize_weights(w, out_w, antialias)
    out = np.tensordot(wy, img, axes=(1, 0))
    out = np.moveaxis(np.tensordot(wx, out, axes=(1, 1)), 0, 1)
    lo, hi = img.min(), img.max()
    return np.clip(out, lo, hi)


def resize_mask_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _check_size(out_h, out_w)
    mask = np.asarray(mask)
    h, w = mask.shape[:2]
    rows = np.minimum(np.floor((np.arange(out_h) + 0.5) * (h / out_h)).astype(int), h - 1)
    cols = np.minimum(np.floor((np.arange(out_w) + 0.5) * (w / out_w)).astype(int), w - 1)
    return (mask[np.ix_(rows, cols)] > 0).astype(np.uint8)


def normalize(img: np.ndarray) -> np.ndarray:
    """Map 8-bit intensities to ``[0, 1]`` by dividing by 255."""
    arr = np.asarray(img)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise DataError(f"8-bit image values must lie in [0, 255], got range [{arr.min()}, {arr.max()}]")
    return arr.astype(np.float64) / 255.0


def preprocess_pair(img: np.ndarray, mask: np.ndarray, cfg: PreprocessConfig) -> tuple[np.ndarray, np.ndarray]:
    """Resize an image (already in ``[0, 1]``) and its mask to ``cfg.target_size``."""
    s = cfg.target_size
    return resize_bilinear(img, s, s, cfg.antialias), resize_mask_nearest(mask, s, s)
