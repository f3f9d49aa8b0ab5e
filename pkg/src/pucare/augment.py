"""Mask-consistent augmentation: rotation, reflection and watershed boundary
enhancement.

Geometric transforms apply the same coordinate map to an image and its
mask; images are sampled bilinearly and masks by nearest neighbour so they
stay binary.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data_io import Dataset, Sample
from .errors import DataError, ParameterError, SkipAugmentation
from .seeding import derive_rng

BOUNDARY_DARKEN = 0.5
_NEIGHBOURS = ((-1, 0), (0, -1), (0, 1), (1, 0))  # row-major order


@dataclass(frozen=True)
class AugmentConfig:
    rotations_per_image: int = 2
    rotation_range_deg: tuple[float, float] = (-90.0, 90.0)
    reflect_x: bool = True
    reflect_y: bool = True
    watershed: bool = True
    watershed_threshold: float = 0.7
    fill_value: float = 0.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.rotation_range_deg
        if not -90.0 <= lo <= hi <= 90.0:
            raise ParameterError(f"rotation range must lie within [-90, 90], got {self.rotation_range_deg}")
        if self.rotations_per_image < 0:
            raise ParameterError("rotations_per_image must be >= 0")
        if not 0.0 < self.watershed_threshold < 1.0:
            raise ParameterError(f"watershed_threshold must lie in (0, 1), got {self.watershed_threshold}")


# ---------------------------------------------------------------------------
# geometry


def _snap(v: float) -> float:
    for target in (-1.0, 0.0, 1.0):
        if abs(v - target) < 1e-12:
            return target
    return v


def rotate_pair(img: np.ndarray, mask: np.ndarray, angle_deg: float, fill_value: float = 0.0):
    """Rotate counter-clockwise by ``angle_deg`` about the image centre, keeping the frame.

    Output pixels whose source falls outside the frame take ``fill_value``
    (image) and 0 (mask).
    """
    if not -90.0 <= angle_deg <= 90.0:
        raise ParameterError(f"rotation angle must lie in [-90, 90], got {angle_deg}")
    img = np.asarray(img, dtype=np.float64)
    mask = np.asarray(mask)
    if img.shape[:2] != mask.shape:
        raise DataError(f"image {img.shape[:2]} and mask {mask.shape} differ")
    if angle_deg == 0:
        return img.copy(), mask.copy()
    h, w = mask.shape
    t = np.deg2rad(angle_deg)
    c, s = _snap(np.cos(t)), _snap(np.sin(t))
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    sx = cx + c * dx - s * dy
    sy = cy + s * dx + c * dy
    inside = (sy >= -0.5) & (sy < h - 0.5) & (sx >= -0.5) & (sx < w - 0.5)

    ny = np.clip(np.floor(sy + 0.5), 0, h - 1).astype(int)
    nx = np.clip(np.floor(sx + 0.5), 0, w - 1).astype(int)
    out_mask = np.where(inside, mask[ny, nx], 0).astype(mask.dtype)

    qy = np.clip(sy, 0, h - 1)
    qx = np.clip(sx, 0, w - 1)
    y0 = np.minimum(np.floor(qy).astype(int), h - 2) if h > 1 else np.zeros_like(ny)
    x0 = np.minimum(np.floor(qx).astype(int), w - 2) if w > 1 else np.zeros_like(nx)
    fy = (qy - y0)[..., None] if h > 1 else 0.0
    fx = (qx - x0)[..., None] if w > 1 else 0.0
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    src = img if img.ndim == 3 else img[..., None]
    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bottom = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    out = top * (1 - fy) + bottom * fy
    out = np.where(inside[..., None], out, fill_value)
    return (out if img.ndim == 3 else out[..., 0]), out_mask


def reflect_pair(img: np.ndarray, mask: np.ndarray, axis: str):
    """Reverse row order (``axis='x'``) or column order (``axis='y'``)."""
    if axis == "x":
        return np.asarray(img)[::-1].copy(), np.asarray(mask)[::-1].copy()
    if axis == "y":
        return np.asarray(img)[:, ::-1].copy(), np.asarray(mask)[:, ::-1].copy()
    raise ParameterError(f"axis must be 'x' or 'y', got {axis!r}")


# ---------------------------------------------------------------------------
# watershed


@dataclass
class WatershedResult:
    labels: np.ndarray  # int, 0 on boundary pixels
    boundary: np.ndarray  # bool


def gradient_magnitude(gray: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(np.asarray(gray, dtype=np.float64))
    return np.hypot(gy, gx)


def flood_priority(gray: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """``(tier, level)`` per pixel: gradient magnitude, with ridges above
    ``threshold * max`` moved to a second tier that floods after everything else."""
    grad = gradient_magnitude(gray)
    top = grad.max()
    tier = (grad > threshold * top).astype(np.int8) if top > 0 else np.zeros(grad.shape, np.int8)
    return tier, grad


def watershed_segment(gray: np.ndarray, markers: np.ndarray, threshold: float = 0.7) -> WatershedResult:
    """Marker-based priority flood over the gradient-magnitude landscape.

    Pixels are flooded in order of (ridge tier, gradient magnitude, time of
    discovery, row-major index). A pixel whose labelled 4-neighbours carry
    more than one label becomes boundary and does not propagate.
    """
    if not 0.0 < threshold < 1.0:
        raise ParameterError(f"threshold must lie in (0, 1), got {threshold}")
    markers = np.asarray(markers)
    gray = np.asarray(gray, dtype=np.float64)
    if markers.shape != gray.shape or gray.ndim != 2:
        raise DataError(f"gray {gray.shape} and markers {markers.shape} must be equal 2-D shapes")
    if np.unique(markers[markers != 0]).size < 2:
        raise ParameterError("watershed needs at least two distinct non-zero marker labels")
    h, w = gray.shape
    tier, level = flood_priority(gray, threshold)
    labels = markers.astype(np.int64).ravel().copy()
    tier, level = tier.ravel(), level.ravel()
    boundary = np.zeros(h * w, dtype=bool)
    queued = labels != 0
    heap: list[tuple[int, float, int, int]] = []
    counter = 0

    def push_neighbours(p: int) -> None:
        nonlocal counter
        r, c = divmod(p, w)
        for dr, dc in _NEIGHBOURS:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w:
                q = rr * w + cc
                if not queued[q]:
                    queued[q] = True
                    heapq.heappush(heap, (int(tier[q]), float(level[q]), counter, q))
                    counter += 1

    for p in np.flatnonzero(labels):
        push_neighbours(int(p))
    while heap:
        _, _, _, p = heapq.heappop(heap)
        r, c = divmod(p, w)
        seen = set()
        for dr, dc in _NEIGHBOURS:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and labels[rr * w + cc]:
                seen.add(int(labels[rr * w + cc]))
        if len(seen) > 1:
            boundary[p] = True
            continue
        labels[p] = seen.pop()
        push_neighbours(p)
    # pixels walled off by boundary pixels are never reached; they join the boundary
    boundary |= labels == 0
    return WatershedResult(labels.reshape(h, w), boundary.reshape(h, w))


def luminance(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) @ np.array([0.299, 0.587, 0.114])


def watershed_markers(mask: np.ndarray) -> np.ndarray:
    """Label 1 inside the eroded wound, 2 outside the dilated wound, 0 between."""
    m = np.asarray(mask) > 0
    if not m.any() or m.all():
        raise SkipAugmentation("watershed enhancement needs a mask that is neither empty nor full")
    st = np.ones((3, 3), dtype=bool)
    fg = ndimage.binary_erosion(m, structure=st)
    bg = ~ndimage.binary_dilation(m, structure=st)
    if not fg.any() or not bg.any():
        raise SkipAugmentation("wound too small or too large for erosion/dilation markers")
    markers = np.zeros(m.shape, dtype=np.int64)
    markers[fg] = 1
    markers[bg] = 2
    return markers


def watershed_enhance(img: np.ndarray, mask: np.ndarray, cfg: AugmentConfig | None = None):
    """Darken the watershed line between wound and skin; the mask is returned as is."""
    cfg = cfg or AugmentConfig()
    markers = watershed_markers(mask)
    result = watershed_segment(luminance(img), markers, cfg.watershed_threshold)
    out = np.array(img, dtype=np.float64, copy=True)
    out[result.boundary] *= BOUNDARY_DARKEN
    return out, np.asarray(mask).copy()


# ---------------------------------------------------------------------------
# dataset expansion


def rotation_angle(cfg: AugmentConfig, sample_id: str, variant: int) -> float:
    lo, hi = cfg.rotation_range_deg
    return float(derive_rng("rotate", cfg.seed, sample_id, variant).uniform(lo, hi))


def augment_sample(sample: Sample, cfg: AugmentConfig) -> list[tuple[Sample, str]]:
    """The original plus every derived copy, each with a provenance note."""
    out = [(sample, "original")]
    for k in range(cfg.rotations_per_image):
        angle = rotation_angle(cfg, sample.id, k)
        img, mask = rotate_pair(sample.image, sample.mask, angle, cfg.fill_value)
        out.append((Sample(f"{sample.id}__rot{k}", img, mask), f"rotate {angle:.6f} deg"))
    if cfg.reflect_x:
        img, mask = reflect_pair(sample.image, sample.mask, "x")
        out.append((Sample(f"{sample.id}__refx", img, mask), "reflect x"))
    if cfg.reflect_y:
        img, mask = reflect_pair(sample.image, sample.mask, "y")
        out.append((Sample(f"{sample.id}__refy", img, mask), "reflect y"))
    if cfg.watershed:
        try:
            img, mask = watershed_enhance(sample.image, sample.mask, cfg)
        except SkipAugmentation:
            pass
        else:
            out.append((Sample(f"{sample.id}__ws", img, mask), f"watershed threshold {cfg.watershed_threshold}"))
    return out


def build_augmented_set(ds: Dataset, cfg: AugmentConfig) -> Dataset:
    if len(ds) == 0:
        raise DataError("cannot augment an empty dataset")
    shapes = {s.image.shape for s in ds}
    if len(shapes) != 1:
        raise DataError(f"augmentation needs a common image size, got {sorted(shapes)}")
    samples, provenance = [], {}
    for sample in ds:
        for derived, note in augment_sample(sample, cfg):
            samples.append(derived)
            provenance[derived.id] = {"parent": sample.id, "transform": note}
    meta = dict(ds.meta)
    meta["augmentation"] = {
        "seed": cfg.seed,
        "rotations_per_image": cfg.rotations_per_image,
        "rotation_range_deg": list(cfg.rotation_range_deg),
        "reflect_x": cfg.reflect_x,
        "reflect_y": cfg.reflect_y,
        "watershed": cfg.watershed,
        "watershed_threshold": cfg.watershed_threshold,
        "provenance": provenance,
    }
    return Dataset(samples, meta)
