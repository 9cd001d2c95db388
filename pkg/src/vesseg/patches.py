"""Patch extraction for training and tiling for full-image inference.

Training patches are square crops at uniformly random origins; labels are
binarized at the half-way point (value > 127 means vessel).  Inference
tiles cover a zero-padded copy of the image on a regular stride grid, and
:func:`recompose` averages overlapping predictions back into an image of
the original size.  Recomposition accumulates in float64, which makes
``recompose(tile(img))`` reproduce ``img`` exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ShapeError


@dataclass
class PatchSet:
    """A bag of training patches.

    ``images`` is [n, S, S] float32 scaled to [0, 1]; ``labels`` is
    [n, S, S] uint8 in {0, 1}.  ``origins`` holds the (y, x) crop corners
    ((-1, -1) for patches reloaded from a cache, which does not store
    provenance), and ``source_ids`` names the image each patch came from.
    """

    size: int
    images: np.ndarray
    labels: np.ndarray
    origins: np.ndarray
    source_ids: list[str]

    def __len__(self) -> int:
        return self.images.shape[0]


def sample_patches(img: np.ndarray, gt: np.ndarray, n: int, size: int,
                   seed: int, source_id: str = "") -> PatchSet:
    """Crop ``n`` random ``size`` x ``size`` patches from one image.

    ``img`` is the preprocessed uint8 gray image, ``gt`` the matching
    uint8 ground-truth map.  Origins are drawn uniformly over all valid
    positions from a generator seeded with ``seed``.
    """
    img = np.asarray(img)
    gt = np.asarray(gt)
    if img.ndim != 2 or gt.shape != img.shape:
        raise ShapeError(f"sample_patches: image {img.shape} and ground "
                         f"truth {gt.shape} must be equal 2-D shapes")
    if size < 1:
        raise ConfigError(f"sample_patches: size must be positive, "
                          f"got {size}")
    h, w = img.shape
    if size > h or size > w:
        raise ShapeError(f"sample_patches: {size}x{size} patch does not fit "
                         f"a {h}x{w} image")
    if n < 0:
        raise ConfigError(f"sample_patches: n must be non-negative, got {n}")

    rng = np.random.default_rng(seed)
    oy = rng.integers(0, h - size + 1, size=n)
    ox = rng.integers(0, w - size + 1, size=n)
    images = np.empty((n, size, size), dtype=np.float32)
    labels = np.empty((n, size, size), dtype=np.uint8)
    scaled = img.astype(np.float32) / 255.0
    binary = (gt > 127).astype(np.uint8)
    for i in range(n):
        images[i] = scaled[oy[i]:oy[i] + size, ox[i]:ox[i] + size]
        labels[i] = binary[oy[i]:oy[i] + size, ox[i]:ox[i] + size]
    origins = np.stack([oy, ox], axis=1).astype(np.int32) if n else \
        np.empty((0, 2), dtype=np.int32)
    return PatchSet(size, images, labels, origins, [source_id] * n)


def merge_patchsets(sets: list[PatchSet]) -> PatchSet:
    if not sets:
        raise ConfigError("merge_patchsets: nothing to merge")
    size = sets[0].size
    if any(s.size != size for s in sets):
        raise ShapeError("merge_patchsets: mixed patch sizes")
    ids: list[str] = []
    for s in sets:
        ids.extend(s.source_ids)
    return PatchSet(size,
                    np.concatenate([s.images for s in sets]),
                    np.concatenate([s.labels for s in sets]),
                    np.concatenate([s.origins for s in sets]),
                    ids)


def as_training_arrays(ps: PatchSet) -> tuple[np.ndarray, np.ndarray]:
    """PatchSet -> ([n, 1, S, S] float32 images, [n, 1, S, S] float32
    labels)."""
    x = ps.images[:, None, :, :].astype(np.float32)
    y = ps.labels[:, None, :, :].astype(np.float32)
    return x, y


@dataclass
class TileLayout:
    """Geometry needed to undo :func:`tile`."""

    height: int
    width: int
    padded_height: int
    padded_width: int
    size: int
    stride: int
    origins: np.ndarray  # [m, 2] (y, x) into the padded image


def _padded_extent(extent: int, size: int, stride: int) -> int:
    if extent <= size:
        return size
    steps = -(-(extent - size) // stride)  # ceiling division
    return steps * stride + size


def tile(img: np.ndarray, size: int, stride: int = 24) \
        -> tuple[TileLayout, np.ndarray]:
    """Cut a 2-D image into overlapping tiles on a stride grid.

    The image is zero-padded bottom/right until the grid covers it
    exactly.  Returns the layout and an [m, size, size] float32 stack in
    row-major origin order.
    """
    img = np.asarray(img)
    if img.ndim != 2:
        raise ShapeError(f"tile: expected a 2-D image, got {img.shape}")
    if size < 1 or stride < 1:
        raise ConfigError(f"tile: size and stride must be positive, "
                          f"got size={size} stride={stride}")
    if stride > size:
        raise ConfigError(f"tile: stride {stride} larger than tile size "
                          f"{size} would leave gaps")
    h, w = img.shape
    ph = _padded_extent(h, size, stride)
    pw = _padded_extent(w, size, stride)
    padded = np.zeros((ph, pw), dtype=np.float32)
    padded[:h, :w] = img
    ys = np.arange(0, ph - size + 1, stride)
    xs = np.arange(0, pw - size + 1, stride)
    origins = np.array([(y, x) for y in ys for x in xs], dtype=np.int32)
    out = np.empty((len(origins), size, size), dtype=np.float32)
    for i, (y, x) in enumerate(origins):
        out[i] = padded[y:y + size, x:x + size]
    layout = TileLayout(h, w, ph, pw, size, stride, origins)
    return layout, out


def recompose(layout: TileLayout, preds: np.ndarray) -> np.ndarray:
    """Average overlapping tile predictions back to the original extent."""
    preds = np.asarray(preds)
    expect = (len(layout.origins), layout.size, layout.size)
    if preds.shape != expect:
        raise ShapeError(f"recompose: predictions {preds.shape} do not "
                         f"match layout {expect}")
    acc = np.zeros((layout.padded_height, layout.padded_width),
                   dtype=np.float64)
    cnt = np.zeros_like(acc)
    s = layout.size
    for (y, x), p in zip(layout.origins, preds):
        acc[y:y + s, x:x + s] += p
        cnt[y:y + s, x:x + s] += 1.0
    out = acc / cnt
    return out[:layout.height, :layout.width].astype(np.float32)


# ---------------------------------------------------------------------------
# patch cache: u32 count, u32 size, then per patch the float32 LE image
# followed by the uint8 label plane


def save_patch_cache(path, ps: PatchSet) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<II", len(ps), ps.size))
        for i in range(len(ps)):
            f.write(ps.images[i].astype("<f4").tobytes())
            f.write(ps.labels[i].astype(np.uint8).tobytes())


def load_patch_cache(path) -> PatchSet:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise DataError(f"{path}: truncated patch cache header")
    count, size = struct.unpack_from("<II", raw, 0)
    plane = size * size
    rec = plane * 4 + plane
    if len(raw) != 8 + count * rec:
        raise DataError(f"{path}: patch cache should hold {count} patches "
                        f"of size {size}, but the byte count is wrong")
    images = np.empty((count, size, size), dtype=np.float32)
    labels = np.empty((count, size, size), dtype=np.uint8)
    pos = 8
    for i in range(count):
        images[i] = np.frombuffer(raw, "<f4", plane, pos).reshape(size, size)
        pos += plane * 4
        labels[i] = np.frombuffer(raw, np.uint8, plane, pos).reshape(size,
                                                                     size)
        pos += plane
    origins = np.full((count, 2), -1, dtype=np.int32)
    return PatchSet(size, images, labels, origins, [""] * count)
