"""Datasets: manifest files, directory presets, image IO, synthetic data.

A manifest is a plain text file with one ``image<TAB>ground_truth<TAB>split``
line per image, where split is ``train`` or ``test``.  Relative paths are
resolved against the manifest's own directory, so a dataset folder can move
as a unit.

PGM (P5) and PPM (P6) files are read and written by a built-in codec with a
bit-exact round trip; PNG and other common formats go through Pillow.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

# Per-image patch quotas (train, validation) used with the classic datasets.
PATCH_QUOTAS = {
    "drive": (8000, 2000),
    "stare": (16000, 4000),
    "chase": (12000, 3000),
}


@dataclass(frozen=True)
class ManifestEntry:
    image: Path
    gt: Path
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    name: str = "custom"
    # Per-image (train, validation) patch counts; None means the caller's
    # configuration decides.
    quota: tuple | None = None

    @property
    def train(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == "train"]

    @property
    def test(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == "test"]


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest; every referenced file must exist."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    base = path.parent
    entries: list[ManifestEntry] = []
    seen: dict[Path, str] = {}
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ConfigError(f"{path}:{ln}: expected "
                              f"'image<TAB>gt<TAB>split', got {line!r}")
        img, gt, split = parts
        if split not in ("train", "test"):
            raise ConfigError(f"{path}:{ln}: unknown split {split!r}")
        img_path = (base / img).resolve() if not Path(img).is_absolute() \
            else Path(img)
        gt_path = (base / gt).resolve() if not Path(gt).is_absolute() \
            else Path(gt)
        for p in (img_path, gt_path):
            if not p.is_file():
                raise ConfigError(f"{path}:{ln}: missing file {p}")
        if img_path in seen and seen[img_path] != split:
            raise ConfigError(f"{path}:{ln}: {img_path} appears in both "
                              f"splits; splits must be disjoint")
        seen[img_path] = split
        entries.append(ManifestEntry(img_path, gt_path, split))
    return DatasetManifest(entries)


def save_manifest(path, entries: list[ManifestEntry]) -> None:
    """Write entries with paths relative to the manifest directory when
    possible."""
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: Path) -> str:
        try:
            return str(Path(p).resolve().relative_to(base))
        except ValueError:
            return str(p)

    lines = [f"{rel(e.image)}\t{rel(e.gt)}\t{e.split}" for e in entries]
    path.write_text("\n".join(lines) + "\n")


def build_preset(name: str, root) -> DatasetManifest:
    """Pair images with ground truth for the classic dataset layouts.

    ``drive`` expects ``training/images`` + ``training/1st_manual`` and
    ``test/images`` + ``test/1st_manual``.  ``stare`` and ``chase`` expect
    flat ``images``/``labels`` directories; the first 10 (stare) or 14
    (chase) files in lexicographic order become the training split.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset root not found: {root}")

    def listing(d: Path) -> list[Path]:
        if not d.is_dir():
            raise ConfigError(f"preset {name}: missing directory {d}")
        files = sorted(p for p in d.iterdir() if p.is_file())
        if not files:
            raise ConfigError(f"preset {name}: no files in {d}")
        return files

    def paired(img_dir: Path, gt_dir: Path, split: str):
        imgs = listing(img_dir)
        gts = listing(gt_dir)
        if len(imgs) != len(gts):
            raise ConfigError(
                f"preset {name}: {img_dir} has {len(imgs)} files but "
                f"{gt_dir} has {len(gts)}")
        return [ManifestEntry(i, g, split) for i, g in zip(imgs, gts)]

    if name == "drive":
        entries = paired(root / "training" / "images",
                         root / "training" / "1st_manual", "train")
        entries += paired(root / "test" / "images",
                          root / "test" / "1st_manual", "test")
        return DatasetManifest(entries, name=name, quota=PATCH_QUOTAS[name])
    if name in ("stare", "chase"):
        head = 10 if name == "stare" else 14
        both = paired(root / "images", root / "labels", "train")
        if len(both) <= head:
            raise ConfigError(f"preset {name}: needs more than {head} "
                              f"images, found {len(both)}")
        entries = [replace(e, split="train" if i < head else "test")
                   for i, e in enumerate(both)]
        return DatasetManifest(entries, name=name, quota=PATCH_QUOTAS[name])
    raise ConfigError(f"unknown dataset preset {name!r}; expected drive, "
                      f"stare, or chase")


# ---------------------------------------------------------------------------
# image IO


def _read_pnm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if raw[:2] not in (b"P5", b"P6"):
        raise DataError(f"{path}: not a binary PGM/PPM file")
    channels = 1 if raw[:2] == b"P5" else 3
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed between them.
    tokens = []
    pos = 2
    while len(tokens) < 3:
        if pos >= len(raw):
            raise DataError(f"{path}: truncated header")
        ch = raw[pos:pos + 1]
        if ch == b"#":
            nl = raw.find(b"\n", pos)
            pos = len(raw) if nl < 0 else nl + 1
        elif ch.isspace():
            pos += 1
        else:
            m = re.match(rb"\d+", raw[pos:])
            if not m:
                raise DataError(f"{path}: malformed header")
            tokens.append(int(m.group()))
            pos += m.end()
    width, height, maxval = tokens
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, "
                        f"got {maxval}")
    pos += 1  # single whitespace byte after maxval
    need = width * height * channels
    data = raw[pos:pos + need]
    if len(data) != need:
        raise DataError(f"{path}: expected {need} pixel bytes, "
                        f"got {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(height, width).copy()
    return arr.reshape(height, width, 3).copy()


def _write_pnm(path: Path, arr: np.ndarray) -> None:
    if arr.ndim == 2:
        magic, channels = b"P5", 1
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic, channels = b"P6", 3
    else:
        raise DataError(f"{path}: cannot encode shape {arr.shape}")
    suffix = path.suffix.lower()
    if (suffix == ".pgm") != (channels == 1):
        raise DataError(f"{path}: extension does not match {channels} "
                        f"channel data")
    h, w = arr.shape[:2]
    header = magic + f"\n{w} {h}\n255\n".encode()
    path.write_bytes(header + np.ascontiguousarray(arr,
                                                   dtype=np.uint8).tobytes())


def read_image(path) -> np.ndarray:
    """Load an image as uint8, [H, W] gray or [H, W, 3] RGB."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    if path.suffix.lower() in (".pgm", ".ppm"):
        return _read_pnm(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if "A" in im.mode or
                                im.mode in ("P", "CMYK") else "L")
            return np.asarray(im, dtype=np.uint8)
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from exc


def write_image(path, arr: np.ndarray) -> None:
    path = Path(path)
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise DataError(f"{path}: images must be uint8, got {arr.dtype}")
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() in (".pgm", ".ppm"):
        _write_pnm(path, arr)
        return
    Image.fromarray(arr).save(path)


# ---------------------------------------------------------------------------
# synthetic vessel images


@dataclass
class SyntheticSpec:
    """Knobs for one generated fundus-like image."""

    height: int = 96
    width: int = 96
    vessels: int = 6
    width_range: tuple = (1.2, 3.5)
    background: tuple = (150, 210)
    contrast: tuple = (50, 100)
    noise: float = 6.0
    seed: int = 0


def _stamp_disk(mask: np.ndarray, cy: float, cx: float, radius: float):
    h, w = mask.shape
    # A sub-pixel brush centred between pixels could miss every sample
    # point, so the nearest pixel is always painted.
    ny, nx = int(round(cy)), int(round(cx))
    if 0 <= ny < h and 0 <= nx < w:
        mask[ny, nx] = True
    r = int(np.ceil(radius))
    y0, y1 = max(0, int(np.floor(cy)) - r), min(h, int(np.ceil(cy)) + r + 1)
    x0, x1 = max(0, int(np.floor(cx)) - r), min(w, int(np.ceil(cx)) + r + 1)
    if y0 >= y1 or x0 >= x1:
        return
    yy = np.arange(y0, y1, dtype=np.float64)[:, None]
    xx = np.arange(x0, x1, dtype=np.float64)[None, :]
    hit = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
    mask[y0:y1, x0:x1] |= hit


def generate_synthetic(spec: SyntheticSpec) \
        -> tuple[np.ndarray, np.ndarray]:
    """Render dark vessel-like curves on a noisy bright background.

    Each vessel is a quadratic Bezier curve swept with a round brush; the
    ground truth is the exact rendered mask (255 on vessels).  The same
    spec always renders the same pair.
    """
    if spec.height < 8 or spec.width < 8:
        raise ConfigError(f"synthetic canvas too small: "
                          f"{spec.height}x{spec.width}")
    if spec.vessels < 0:
        raise ConfigError(f"vessel count must be non-negative, "
                          f"got {spec.vessels}")
    if spec.width_range[0] < 1.0 or spec.width_range[1] < spec.width_range[0]:
        raise ConfigError(f"vessel widths must be >= 1 pixel and ordered, "
                          f"got {spec.width_range}")
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(spec.vessels):
        p0 = rng.uniform([0, 0], [h - 1, w - 1])
        p2 = rng.uniform([0, 0], [h - 1, w - 1])
        chord = p2 - p0
        # Bow the control point sideways for a gentle curve.
        normal = np.array([-chord[1], chord[0]])
        norm = np.hypot(*normal)
        if norm > 0:
            normal /= norm
        p1 = (p0 + p2) / 2 + normal * rng.uniform(-0.35, 0.35) \
            * np.hypot(*chord)
        radius = rng.uniform(*spec.width_range) / 2.0
        length = np.hypot(*(p1 - p0)) + np.hypot(*(p2 - p1))
        steps = max(8, int(2 * length))
        for t in np.linspace(0.0, 1.0, steps):
            point = ((1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1
                     + t ** 2 * p2)
            _stamp_disk(mask, point[0], point[1], radius)

    base = rng.uniform(*spec.background)
    drop = rng.uniform(*spec.contrast)
    img = base + rng.normal(0.0, spec.noise, (h, w))
    img[mask] -= drop
    img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    gt = np.where(mask, 255, 0).astype(np.uint8)
    return img, gt


def generate_dataset(out_dir, count: int, train_count: int,
                     spec: SyntheticSpec | None = None,
                     seed: int = 0) -> Path:
    """Write ``count`` synthetic image/label pairs plus a manifest.

    The first ``train_count`` images form the train split.  Returns the
    manifest path.
    """
    if count < 1 or not 0 < train_count < count:
        raise ConfigError(f"generate_dataset: need 0 < train_count < count, "
                          f"got {train_count}/{count}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    base = spec or SyntheticSpec()
    entries = []
    for i in range(count):
        img, gt = generate_synthetic(replace(base, seed=seed + i))
        img_path = out_dir / "images" / f"img_{i:03d}.png"
        gt_path = out_dir / "labels" / f"img_{i:03d}.png"
        write_image(img_path, img)
        write_image(gt_path, gt)
        split = "train" if i < train_count else "test"
        entries.append(ManifestEntry(img_path, gt_path, split))
    manifest_path = out_dir / "manifest.txt"
    save_manifest(manifest_path, entries)
    return manifest_path
