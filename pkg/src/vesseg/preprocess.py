"""Image preparation: gray conversion, normalization, CLAHE, gamma.

The full chain, in order, is ``to_single_channel`` -> ``normalize`` ->
``clahe`` -> ``gamma_correct``.  Normalization statistics are computed over
a whole dataset (training images), not per image, so one global transfer
applies everywhere.  Every stage maps uint8 in, uint8 out.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigError, DataError, ShapeError

LUMINANCE_WEIGHTS = (0.299, 0.587, 0.114)


def _require_gray(name: str, img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ShapeError(f"{name}: expected a 2-D uint8 image, got "
                         f"shape {img.shape} dtype {img.dtype}")
    return img


def to_single_channel(img: np.ndarray, mode: str = "green") -> np.ndarray:
    """Collapse an RGB image to one uint8 channel.

    ``green`` takes the green plane (the highest-contrast channel for
    vessels in fundus photographs); ``luminance`` uses the usual
    0.299/0.587/0.114 weighting.  Gray input passes through unchanged.
    """
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ShapeError(f"to_single_channel: expected uint8, "
                         f"got {img.dtype}")
    if img.ndim == 2:
        return img.copy()
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"to_single_channel: expected [H, W] or [H, W, 3], "
                         f"got {img.shape}")
    if mode == "green":
        return img[:, :, 1].copy()
    if mode == "luminance":
        r, g, b = LUMINANCE_WEIGHTS
        lum = (r * img[:, :, 0].astype(np.float64)
               + g * img[:, :, 1].astype(np.float64)
               + b * img[:, :, 2].astype(np.float64))
        return np.clip(np.round(lum), 0, 255).astype(np.uint8)
    raise ConfigError(f"to_single_channel: unknown mode {mode!r}")


@dataclass(frozen=True)
class IntensityStats:
    """Dataset-wide gray-level statistics used by :func:`normalize`."""

    mean: float
    std: float
    vmin: float
    vmax: float


def intensity_stats(images: Iterable[np.ndarray]) -> IntensityStats:
    """Pool the pixels of all ``images`` into one mean/std/min/max."""
    count = 0
    total = 0.0
    total_sq = 0.0
    vmin = np.inf
    vmax = -np.inf
    for img in images:
        img = _require_gray("intensity_stats", img)
        f = img.astype(np.float64)
        count += f.size
        total += float(f.sum())
        total_sq += float(np.square(f).sum())
        vmin = min(vmin, float(f.min()))
        vmax = max(vmax, float(f.max()))
    if count == 0:
        raise DataError("intensity_stats: no images given")
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    std = float(np.sqrt(var))
    if std == 0.0:
        raise DataError("intensity_stats: zero standard deviation; "
                        "all pixels in the dataset share one value")
    return IntensityStats(mean, std, vmin, vmax)


def normalize(img: np.ndarray, stats: IntensityStats) -> np.ndarray:
    """Z-score by the dataset statistics, then rescale the dataset's value
    range back to [0, 255]."""
    img = _require_gray("normalize", img)
    if stats.std == 0.0 or stats.vmax == stats.vmin:
        raise DataError("normalize: degenerate statistics (zero spread)")
    z = (img.astype(np.float64) - stats.mean) / stats.std
    zmin = (stats.vmin - stats.mean) / stats.std
    zmax = (stats.vmax - stats.mean) / stats.std
    out = (z - zmin) / (zmax - zmin) * 255.0
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def clahe(img: np.ndarray, clip_limit: float = 2.0,
          tiles: tuple[int, int] = (8, 8)) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    The image is padded (edge replication, bottom/right) to a multiple of
    the tile grid.  Each tile builds a 256-bin histogram, clips it at
    ``clip_limit`` times the uniform bin height, redistributes the clipped
    excess uniformly over all bins, and maps values through the scaled CDF.
    Every output pixel bilinearly blends the mappings of its four
    neighbouring tile centers.
    """
    img = _require_gray("clahe", img)
    ty, tx = int(tiles[0]), int(tiles[1])
    if ty < 1 or tx < 1:
        raise ConfigError(f"clahe: tile grid must be positive, got {tiles}")
    if clip_limit <= 0:
        raise ConfigError(f"clahe: clip_limit must be positive, "
                          f"got {clip_limit}")
    h, w = img.shape
    if ty > h or tx > w:
        raise ShapeError(f"clahe: {ty}x{tx} tiles cannot cover a "
                         f"{h}x{w} image")
    th = -(-h // ty)  # ceiling division
    tw = -(-w // tx)
    padded = np.pad(img, ((0, ty * th - h), (0, tx * tw - w)), mode="edge")
    npix = th * tw
    limit = clip_limit * npix / 256.0

    maps = np.empty((ty, tx, 256), dtype=np.float64)
    for iy in range(ty):
        for ix in range(tx):
            tile_px = padded[iy * th:(iy + 1) * th, ix * tw:(ix + 1) * tw]
            hist = np.bincount(tile_px.ravel(), minlength=256)
            # The clipped mass is an integer sum minus n_over * limit, so
            # it is independent of summation order: the loop oracle in the
            # tests reproduces it bit for bit.
            over = hist > limit
            excess = float(hist[over].sum()) - float(over.sum()) * limit
            clipped = np.minimum(hist.astype(np.float64), limit) \
                + excess / 256.0
            cdf = np.cumsum(clipped)
            maps[iy, ix] = cdf * (255.0 / npix)

    hp, wp = padded.shape
    fy = (np.arange(hp) + 0.5) / th - 0.5
    fx = (np.arange(wp) + 0.5) / tw - 0.5
    t0y = np.floor(fy).astype(np.int64)
    t0x = np.floor(fx).astype(np.int64)
    wy = fy - t0y
    wx = fx - t0x
    t1y = np.clip(t0y + 1, 0, ty - 1)
    t1x = np.clip(t0x + 1, 0, tx - 1)
    t0y = np.clip(t0y, 0, ty - 1)
    t0x = np.clip(t0x, 0, tx - 1)

    v = padded
    m00 = maps[t0y[:, None], t0x[None, :], v]
    m01 = maps[t0y[:, None], t1x[None, :], v]
    m10 = maps[t1y[:, None], t0x[None, :], v]
    m11 = maps[t1y[:, None], t1x[None, :], v]
    w00 = (1.0 - wy)[:, None] * (1.0 - wx)[None, :]
    w01 = (1.0 - wy)[:, None] * wx[None, :]
    w10 = wy[:, None] * (1.0 - wx)[None, :]
    w11 = wy[:, None] * wx[None, :]
    out = w00 * m00 + w01 * m01 + w10 * m10 + w11 * m11
    return np.round(out[:h, :w]).astype(np.uint8)


def gamma_correct(img: np.ndarray, gamma: float = 1.2) -> np.ndarray:
    """Apply ``round(255 * (v / 255) ** gamma)`` through a lookup table."""
    img = _require_gray("gamma_correct", img)
    if gamma <= 0:
        raise ConfigError(f"gamma_correct: gamma must be positive, "
                          f"got {gamma}")
    levels = np.arange(256, dtype=np.float64)
    lut = np.clip(np.round(255.0 * (levels / 255.0) ** gamma), 0,
                  255).astype(np.uint8)
    return lut[img]


def preprocess_stages(img: np.ndarray, stats: IntensityStats,
                      mode: str = "green", clip_limit: float = 2.0,
                      tiles: tuple[int, int] = (8, 8),
                      gamma: float = 1.2) -> dict[str, np.ndarray]:
    """Run the full chain and keep every intermediate."""
    gray = to_single_channel(img, mode)
    normalized = normalize(gray, stats)
    equalized = clahe(normalized, clip_limit, tiles)
    final = gamma_correct(equalized, gamma)
    return {"gray": gray, "normalized": normalized, "clahe": equalized,
            "final": final}


def preprocess_image(img: np.ndarray, stats: IntensityStats,
                     mode: str = "green", clip_limit: float = 2.0,
                     tiles: tuple[int, int] = (8, 8),
                     gamma: float = 1.2) -> np.ndarray:
    return preprocess_stages(img, stats, mode, clip_limit, tiles,
                             gamma)["final"]
