"""Command-line interface: the pipeline wired end to end.

Subcommands::

    vesseg preprocess --manifest m.txt --out dir [--config c.txt] [--stages]
    vesseg train      --manifest m.txt --out model.ckpt [--config c.txt]
                      [--history h.csv] [--arch dunet|unet] [--seed N]
    vesseg predict    --checkpoint model.ckpt --image img.png --out prob.png
                      [--config c.txt] [--arch A] [--stride N]
                      [--threshold T]
    vesseg evaluate   --pred dir --gt dir --out report.csv [--threshold T]
    vesseg gradcheck  [--seed N]
    vesseg synth      --out dir [--count N] [--train N] [--size N] [--seed N]

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
All randomness flows from the single seed in the configuration (or the
``--seed`` override).
"""

from __future__ import annotations

import argparse
import re
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (DatasetManifest, ManifestEntry, SyntheticSpec,
                   generate_dataset, load_manifest, read_image,
                   save_manifest, write_image)
from .errors import ConfigError, DataError, VessegError
from .gradcheck import format_results, run_all
from .metrics import (ConfusionCounts, confusion, metrics_row, roc_auc,
                      write_report_csv, write_roc_csv, write_roc_svg)
from .model import ModelConfig, build, load_checkpoint
from .optim import TrainConfig, train
from .patches import as_training_arrays, merge_patchsets, recompose, \
    sample_patches, tile
from .preprocess import clahe, gamma_correct, intensity_stats, normalize, \
    to_single_channel


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    """Every knob of the pipeline in one flat, file-backed record.

    The config file is line-oriented ``key = value`` text; ``#`` starts a
    comment line.  Unknown keys are rejected and values round-trip
    losslessly (numbers are written with ``repr``).
    """

    arch: str = "dunet"
    depth: int = 4
    base_filters: int = 32
    kernel: int = 3
    offset_kernel: int = 3
    input_size: int = 48
    batch_size: int = 60
    epochs: int = 100
    lr0: float = 1e-3
    plateau_patience: int = 4
    stop_patience: int = 20
    lr_factor: float = 0.1
    improve_tol: float = 1e-4
    channel_mode: str = "green"
    clahe_clip: float = 2.0
    clahe_tiles: str = "8x8"
    gamma: float = 1.2
    train_patches_per_image: int = 400
    val_patches_per_image: int = 100
    stride: int = 24
    threshold: float = 0.5
    seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(arch=self.arch, depth=self.depth,
                           base_filters=self.base_filters,
                           kernel=self.kernel,
                           offset_kernel=self.offset_kernel,
                           input_size=self.input_size)

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs,
                           lr0=self.lr0,
                           plateau_patience=self.plateau_patience,
                           stop_patience=self.stop_patience,
                           lr_factor=self.lr_factor,
                           improve_tol=self.improve_tol, seed=self.seed)

    def tiles(self) -> tuple[int, int]:
        return _parse_tiles(self.clahe_tiles)


def _parse_tiles(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)x(\d+)", text.strip())
    if not m or int(m.group(1)) < 1 or int(m.group(2)) < 1:
        raise ConfigError(f"clahe_tiles must look like '8x8', got {text!r}")
    return int(m.group(1)), int(m.group(2))


def validate_run_config(cfg: RunConfig) -> None:
    """Check the keys not covered by the model/training validators."""
    if cfg.channel_mode not in ("green", "luminance"):
        raise ConfigError(f"channel_mode must be green or luminance, "
                          f"got {cfg.channel_mode!r}")
    if cfg.clahe_clip <= 0:
        raise ConfigError(f"clahe_clip must be positive, "
                          f"got {cfg.clahe_clip}")
    _parse_tiles(cfg.clahe_tiles)
    if cfg.gamma <= 0:
        raise ConfigError(f"gamma must be positive, got {cfg.gamma}")
    if cfg.train_patches_per_image < 1 or cfg.val_patches_per_image < 1:
        raise ConfigError("patch counts per image must be at least 1")
    if not 1 <= cfg.stride <= cfg.input_size:
        raise ConfigError(f"stride must be in [1, input_size={cfg.input_size}"
                          f"], got {cfg.stride}")
    if not 0.0 <= cfg.threshold <= 1.0:
        raise ConfigError(f"threshold must be in [0, 1], "
                          f"got {cfg.threshold}")


def read_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    known = {f.name: f.type for f in fields(RunConfig)}
    defaults = RunConfig()
    values = {}
    for ln, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{ln}: expected 'key = value', "
                              f"got {raw!r}")
        key, val = key.strip(), val.strip()
        if key not in known:
            raise ConfigError(f"{path}:{ln}: unknown config key {key!r}")
        kind = type(getattr(defaults, key))
        try:
            values[key] = kind(val) if kind in (int, float) else val
        except ValueError as exc:
            raise ConfigError(f"{path}:{ln}: bad {kind.__name__} value "
                              f"for {key}: {val!r}") from exc
    return replace(defaults, **values)


def write_run_config(path, cfg: RunConfig) -> None:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        text = v if isinstance(v, str) else repr(v)
        lines.append(f"{f.name} = {text}")
    Path(path).write_text("\n".join(lines) + "\n")


def _resolve_config(args) -> RunConfig:
    """Config file (if any) + command-line overrides, validated."""
    cfg = read_run_config(args.config) if getattr(args, "config", None) \
        else RunConfig()
    updates = {}
    for key in ("arch", "stride", "threshold", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            updates[key] = value
    if updates:
        cfg = replace(cfg, **updates)
    validate_run_config(cfg)
    return cfg


# ---------------------------------------------------------------------------
# helpers shared by commands


def _load_gray(path, channel_mode: str) -> np.ndarray:
    img = read_image(path)
    if img.ndim == 3:
        img = to_single_channel(img, channel_mode)
    return img


def _load_gt(path) -> np.ndarray:
    gt = read_image(path)
    if gt.ndim == 3:
        gt = to_single_channel(gt, "luminance")
    return gt


def _derived_seeds(seed: int, index: int) -> tuple[int, int]:
    """Distinct per-image RNG seeds for train/val patch sampling."""
    base = seed * 1_000_003 + 2 * index
    return base, base + 1


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args) -> None:
    cfg = _resolve_config(args)
    manifest = load_manifest(args.manifest)
    if not manifest.entries:
        _warn(f"manifest {args.manifest} lists no images; nothing to do")
        return
    out = Path(args.out)
    tiles = cfg.tiles()

    grays = [_load_gray(e.image, cfg.channel_mode)
             for e in manifest.entries]
    stat_pool = [g for g, e in zip(grays, manifest.entries)
                 if e.split == "train"]
    if not stat_pool:
        _warn("manifest has no train split; computing intensity "
              "statistics over all images")
        stat_pool = grays
    stats = intensity_stats(stat_pool)

    (out / "images").mkdir(parents=True, exist_ok=True)
    if args.stages:
        (out / "stages").mkdir(parents=True, exist_ok=True)
    new_entries = []
    for entry, gray in zip(manifest.entries, grays):
        normalized = normalize(gray, stats)
        equalized = clahe(normalized, cfg.clahe_clip, tiles)
        final = gamma_correct(equalized, cfg.gamma)
        stem = entry.image.stem
        img_path = out / "images" / f"{stem}.png"
        write_image(img_path, final)
        if args.stages:
            for stage_name, arr in (("gray", gray),
                                    ("normalized", normalized),
                                    ("clahe", equalized)):
                write_image(out / "stages" / f"{stem}_{stage_name}.png",
                            arr)
        new_entries.append(ManifestEntry(img_path, entry.gt, entry.split))
    save_manifest(out / "manifest.txt", new_entries)
    print(f"preprocessed {len(new_entries)} images -> {out}")


def _sample_manifest_patches(manifest: DatasetManifest, cfg: RunConfig):
    """Sample per-image train/val patches for every train-split entry."""
    entries = manifest.train
    if not entries:
        raise ConfigError("manifest has no train-split entries")
    n_train, n_val = manifest.quota or (cfg.train_patches_per_image,
                                        cfg.val_patches_per_image)
    train_sets, val_sets = [], []
    for idx, entry in enumerate(entries):
        img = _load_gray(entry.image, cfg.channel_mode)
        gt = _load_gt(entry.gt)
        if img.shape != gt.shape:
            raise DataError(f"{entry.image}: image {img.shape} and ground "
                            f"truth {gt.shape} differ in size")
        tr_seed, val_seed = _derived_seeds(cfg.seed, idx)
        sid = entry.image.name
        train_sets.append(sample_patches(img, gt, n_train, cfg.input_size,
                                         tr_seed, source_id=sid))
        val_sets.append(sample_patches(img, gt, n_val, cfg.input_size,
                                       val_seed, source_id=sid))
    return merge_patchsets(train_sets), merge_patchsets(val_sets)


def cmd_train(args) -> None:
    cfg = _resolve_config(args)
    manifest = load_manifest(args.manifest)
    train_set, val_set = _sample_manifest_patches(manifest, cfg)
    print(f"sampled {len(train_set)} train / {len(val_set)} val patches "
          f"of size {cfg.input_size}")
    graph = build(cfg.model_config(), cfg.seed)
    checkpoint = Path(args.out)
    history = Path(args.history) if args.history \
        else checkpoint.with_suffix(".history.csv")
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    result = train(graph, as_training_arrays(train_set),
                   as_training_arrays(val_set), cfg.train_config(),
                   checkpoint_path=checkpoint, history_path=history,
                   log=print)
    print(f"best epoch {result.best_epoch} "
          f"(val_loss {result.best_val_loss:.6f}) -> {checkpoint}")


def cmd_predict(args) -> None:
    cfg = _resolve_config(args)
    arrays = load_checkpoint(args.checkpoint)
    model_arrays = {k: v for k, v in arrays.items()
                    if not k.startswith("adam.")}
    graph = build(cfg.model_config(), cfg.seed)
    graph.load_state(model_arrays)

    img = _load_gray(args.image, cfg.channel_mode)
    layout, patches = tile(img, cfg.input_size, cfg.stride)
    probs = np.empty_like(patches)
    for i in range(0, len(patches), cfg.batch_size):
        xb = patches[i:i + cfg.batch_size][:, None] / np.float32(255.0)
        out = graph.forward(xb, "infer")
        probs[i:i + cfg.batch_size] = out.data[:, 0]
    prob_map = recompose(layout, probs)

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    prob_u8 = np.round(prob_map * 255.0).astype(np.uint8)
    write_image(out_path, prob_u8)
    cut = int(np.round(cfg.threshold * 255.0))
    mask = np.where(prob_u8 >= cut, 255, 0).astype(np.uint8)
    mask_path = out_path.with_name(out_path.stem + "_mask"
                                   + out_path.suffix)
    write_image(mask_path, mask)
    print(f"wrote {out_path} and {mask_path}")


def cmd_evaluate(args) -> None:
    cfg = _resolve_config(args)
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise ConfigError(f"not a directory: {d}")
    pred_files = sorted(p for p in pred_dir.iterdir()
                        if p.is_file() and not p.stem.endswith("_mask"))
    if not pred_files:
        raise ConfigError(f"no probability maps found in {pred_dir}")

    rows = []
    pooled = ConfusionCounts(0, 0, 0, 0)
    pooled_scores, pooled_labels = [], []
    for pred_path in pred_files:
        gt_path = gt_dir / pred_path.name
        if not gt_path.is_file():
            raise DataError(f"no ground truth named {pred_path.name} "
                            f"in {gt_dir}")
        prob_u8 = read_image(pred_path)
        if prob_u8.ndim != 2:
            raise DataError(f"{pred_path}: probability maps must be "
                            f"single-channel")
        gt = _load_gt(gt_path)
        if prob_u8.shape != gt.shape:
            raise DataError(f"{pred_path}: prediction {prob_u8.shape} and "
                            f"ground truth {gt.shape} differ in size")
        probs = prob_u8.astype(np.float32) / np.float32(255.0)
        gt_bin = gt > 127
        c = confusion(probs, gt_bin, cfg.threshold)
        _, auc = roc_auc(probs.ravel(), gt_bin.ravel())
        rows.append({"image": pred_path.name, **metrics_row(c, auc)})
        pooled = pooled + c
        pooled_scores.append(probs.ravel())
        pooled_labels.append(gt_bin.ravel())

    curve, pooled_auc = roc_auc(np.concatenate(pooled_scores),
                                np.concatenate(pooled_labels))
    rows.append({"image": "aggregate", **metrics_row(pooled, pooled_auc)})

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(out_path, rows)
    roc_csv = out_path.with_name(out_path.stem + "_roc.csv")
    roc_svg = out_path.with_name(out_path.stem + "_roc.svg")
    write_roc_csv(roc_csv, curve)
    write_roc_svg(roc_svg, curve)
    print(f"wrote {out_path} ({len(rows) - 1} images + aggregate), "
          f"{roc_csv}, {roc_svg}")


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 7
    results = run_all(seed=seed)
    print(format_results(results))
    return 0 if all(r.passed for r in results) else 2


def cmd_synth(args) -> None:
    if args.size is not None:
        spec = SyntheticSpec(height=args.size, width=args.size)
    else:
        spec = SyntheticSpec()
    manifest = generate_dataset(args.out, args.count, args.train,
                                spec=spec, seed=args.seed or 0)
    print(f"wrote {args.count} synthetic images; manifest: {manifest}")


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    """Argument errors become ConfigError so main() can exit with 1."""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="vesseg",
                description="retinal vessel segmentation pipeline")
    p.add_argument("--version", action="version",
                   version=f"vesseg {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def common(sp, config=True, seed=False):
        if config:
            sp.add_argument("--config", help="key = value config file")
        if seed:
            sp.add_argument("--seed", type=int, default=None,
                            help="override the config seed")

    sp = sub.add_parser("preprocess", help="run the image enhancement "
                        "chain over a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--stages", action="store_true",
                    help="also write per-stage intermediate images")
    common(sp)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train", help="sample patches and fit a model")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--history", help="history CSV path "
                    "(default: alongside the checkpoint)")
    sp.add_argument("--arch", choices=("dunet", "unet"), default=None)
    common(sp, seed=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="segment one image with a "
                        "trained checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True,
                    help="probability map path; the binary mask lands "
                    "next to it with a _mask suffix")
    sp.add_argument("--arch", choices=("dunet", "unet"), default=None)
    sp.add_argument("--stride", type=int, default=None,
                    help="tile stride (default from config)")
    sp.add_argument("--threshold", type=float, default=None,
                    help="mask threshold in [0, 1]")
    common(sp, seed=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="score probability maps against "
                        "ground truth")
    sp.add_argument("--pred", required=True, help="directory of "
                    "probability maps")
    sp.add_argument("--gt", required=True, help="directory of ground-truth "
                    "images with matching filenames")
    sp.add_argument("--out", required=True, help="report CSV path")
    sp.add_argument("--threshold", type=float, default=None)
    common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("gradcheck", help="finite-difference checks for "
                        "every backward rule")
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("synth", help="generate a synthetic vessel "
                        "dataset")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--count", type=int, default=10)
    sp.add_argument("--train", type=int, default=8,
                    help="how many of the images form the train split")
    sp.add_argument("--size", type=int, default=None,
                    help="canvas height and width")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        code = args.func(args)
        return int(code) if code else 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except VessegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 2
    except (MemoryError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
