"""Image pipeline: square crop, resize, 3-channel stacking, augmentation."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage


class CropWarning(UserWarning):
    """The tumor bounding box does not fit in the largest square window."""


@dataclass(frozen=True)
class AugmentConfig:
    zoom_frac: float = 0.20
    width_shift_frac: float = 0.10
    rotation_deg: float = 5.0
    shear_frac: float = 0.20
    hflip: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("zoom_frac", "width_shift_frac", "rotation_deg", "shear_frac"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0, False)


def mask_bbox(mask: np.ndarray) -> Tuple[int, int, int, int]:
    """Inclusive (row0, row1, col0, col1) of the non-zero region."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("mask is empty: no tumor to crop around")
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def square_window(shape: Tuple[int, int], bbox: Tuple[int, int, int, int]) -> Tuple[int, int, int, bool]:
    """Top-left corner and side of the crop window, plus whether the bbox fits.

    The side is min(H, W); the window is centered on the bbox center and
    clamped to the image.
    """
    h, w = shape
    r0, r1, c0, c1 = bbox
    side = min(h, w)
    fits = (r1 - r0 + 1) <= side and (c1 - c0 + 1) <= side

    def place(lo: int, hi: int, extent: int) -> int:
        center = (lo + hi + 1) / 2.0
        start = int(math.floor(center - side / 2.0))
        return min(max(start, 0), extent - side)

    return place(r0, r1, h), place(c0, c1, w), side, fits


def square_crop(img: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Crop image and mask to the largest square window holding the tumor bbox."""
    if img.shape != mask.shape:
        raise ValueError(f"image {img.shape} and mask {mask.shape} differ")
    top, left, side, fits = square_window(img.shape, mask_bbox(mask))
    if not fits:
        warnings.warn("tumor bounding box exceeds the largest square window; crop truncates it", CropWarning)
    win = (slice(top, top + side), slice(left, left + side))
    return img[win], mask[win]


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Corner-aligned bilinear resize to ``size x size``."""
    if size < 2:
        raise ValueError("target size must be at least 2")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape

    def axis(n_in: int):
        pos = np.linspace(0.0, n_in - 1, size) if n_in > 1 else np.zeros(size)
        lo = np.clip(np.floor(pos).astype(int), 0, max(n_in - 2, 0))
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h)
    x0, x1, fx = axis(w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy[:, None]) + bot * fy[:, None]


def resize_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize for label masks (keeps them binary)."""
    if size < 2:
        raise ValueError("target size must be at least 2")
    h, w = mask.shape
    rows = np.rint(np.linspace(0, h - 1, size)).astype(int)
    cols = np.rint(np.linspace(0, w - 1, size)).astype(int)
    return mask[rows][:, cols]


def hist_equalize(img: np.ndarray) -> np.ndarray:
    """Classic CDF histogram equalization of an 8-bit image."""
    img = np.asarray(img)
    vals = np.rint(img).astype(np.int64)
    if vals.min() < 0 or vals.max() > 255:
        raise ValueError("hist_equalize expects intensities in [0, 255]")
    counts = np.bincount(vals.ravel(), minlength=256)
    cdf = np.cumsum(counts)
    n = vals.size
    cdf_min = cdf[vals.min()]
    if n == cdf_min:
        return vals.astype(np.float64)
    lut = np.rint(255.0 * (cdf - cdf_min) / (n - cdf_min))
    return np.clip(lut, 0, 255)[vals]


def gaussian_kernel(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def smooth(img: np.ndarray) -> np.ndarray:
    """5x5 Gaussian blur (sigma 1) with replicated borders."""
    return ndimage.correlate(np.asarray(img, dtype=np.float64), gaussian_kernel(), mode="nearest")


def stack_channels(img: np.ndarray, single_channel: bool = False) -> np.ndarray:
    """Gray / equalized / smoothed channels scaled to [0, 1] -> ``[3, S, S]``.

    ``single_channel`` keeps only the gray channel (``[1, S, S]``).
    """
    gray = np.asarray(img, dtype=np.float64)
    if single_channel:
        return (gray / 255.0)[None]
    return np.stack([gray, hist_equalize(gray), smooth(gray)]) / 255.0


def preprocess_pair(img: np.ndarray, mask: np.ndarray, size: int, crop: bool = True,
                    single_channel: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Raw 8-bit image + mask -> (``[C,S,S]`` in [0,1], ``[S,S]`` binary)."""
    mask = (np.asarray(mask) > 0).astype(np.uint8)
    img = np.asarray(img, dtype=np.float64)
    if crop:
        img, mask = square_crop(img, mask)
    img = np.clip(np.rint(resize_bilinear(img, size)), 0, 255)
    mask = resize_nearest(mask, size)
    return stack_channels(img, single_channel), mask


# ---------------------------------------------------------------------------
# augmentation


def sample_affine(size: int, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw one augmentation as a 3x3 matrix mapping output (x, y, 1) -> input coords.

    Forward order: zoom, shear, rotate, shift, flip, all about the image center.
    """
    zoom = rng.uniform(1 - cfg.zoom_frac, 1 + cfg.zoom_frac)
    shear = rng.uniform(-cfg.shear_frac, cfg.shear_frac)
    theta = math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    shift = rng.uniform(-cfg.width_shift_frac, cfg.width_shift_frac) * size
    flip = bool(cfg.hflip and rng.random() < 0.5)
    return affine_matrix(size, zoom=zoom, shear=shear, theta=theta, shift=shift, flip=flip)


def affine_matrix(size: int, zoom: float = 1.0, shear: float = 0.0, theta: float = 0.0,
                  shift: float = 0.0, flip: bool = False) -> np.ndarray:
    c = (size - 1) / 2.0
    Z = np.diag([zoom, zoom, 1.0])
    Sh = np.array([[1.0, shear, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    cos, sin = math.cos(theta), math.sin(theta)
    R = np.array([[cos, -sin, 0.0], [sin, cos, 0.0], [0.0, 0.0, 1.0]])
    T = np.array([[1.0, 0.0, shift], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    F = np.diag([-1.0 if flip else 1.0, 1.0, 1.0])
    to_center = np.array([[1.0, 0.0, -c], [0.0, 1.0, -c], [0.0, 0.0, 1.0]])
    back = np.array([[1.0, 0.0, c], [0.0, 1.0, c], [0.0, 0.0, 1.0]])
    forward = back @ F @ T @ R @ Sh @ Z @ to_center
    return np.linalg.inv(forward)


def warp(channel: np.ndarray, inv: np.ndarray, order: int) -> np.ndarray:
    """Resample ``channel`` through the inverse map (x, y) convention, zero fill."""
    # ndimage works in (row, col) = (y, x)
    swap = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1]], dtype=np.float64)
    m = swap @ inv @ swap
    return ndimage.affine_transform(channel, m[:2, :2], offset=m[:2, 2], order=order,
                                    mode="constant", cval=0.0, prefilter=False)


def augment(img: np.ndarray, mask: np.ndarray, cfg: AugmentConfig,
            rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Apply one random affine draw to a ``[C,S,S]`` image (bilinear) and its mask (nearest)."""
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    size = img.shape[-1]
    inv = sample_affine(size, cfg, rng)
    if np.allclose(inv, np.eye(3)):
        return img.copy(), mask.copy()
    out = np.stack([warp(ch, inv, order=1) for ch in img])
    out_mask = warp(mask.astype(np.float64), inv, order=0)
    return np.clip(out, 0.0, 1.0), (out_mask > 0.5).astype(mask.dtype)
