"""U-shaped encoder/decoder that maps a gray patch to a vessel
probability map.

Two architectures share one skeleton.  ``dunet`` uses one deformable block
per stage; ``unet`` uses two plain conv blocks per stage.  Each encoder
level halves the spatial size with 2x2 max pooling and doubles the channel
count; each decoder level upsamples by nearest neighbour, concatenates the
matching encoder output, and (for ``dunet``) adjusts channels with a plain
convolution before its deformable block.  A 1x1 convolution plus sigmoid
produces the per-pixel probability.

Checkpoints are a flat list of named float32 arrays in a small binary
container:

    magic ``DUNC`` | u32 version | records until end of file

with each record ``u32 name_len | name utf-8 | u32 rank | u32 dims... |
float32 little-endian data``.  Model state stores every parameter plus the
batch-norm running statistics under ``<bn>.running_mean`` / ``.running_var``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .deform import DeformableBlock
from .errors import ConfigError, DataError, ShapeError
from .layers import Conv2dLayer, ConvBlock
from .tensor import (Tensor, concat_channels, maxpool2d, no_grad, sigmoid,
                     upsample2d)

CHECKPOINT_MAGIC = b"DUNC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    arch: str = "dunet"
    depth: int = 4
    base_filters: int = 32
    kernel: int = 3
    offset_kernel: int = 3
    input_size: int = 48


def _validate_config(cfg: ModelConfig) -> None:
    if cfg.arch not in ("dunet", "unet"):
        raise ConfigError(f"arch must be 'dunet' or 'unet', got {cfg.arch!r}")
    if cfg.depth < 1:
        raise ConfigError(f"depth must be at least 1, got {cfg.depth}")
    if cfg.base_filters < 1:
        raise ConfigError(
            f"base_filters must be at least 1, got {cfg.base_filters}")
    if cfg.kernel % 2 == 0 or cfg.kernel < 1:
        raise ConfigError(f"kernel must be odd, got {cfg.kernel}")
    if cfg.offset_kernel % 2 == 0 or cfg.offset_kernel < 1:
        raise ConfigError(
            f"offset_kernel must be odd, got {cfg.offset_kernel}")
    if cfg.input_size % (2 ** cfg.depth):
        raise ConfigError(
            f"input_size {cfg.input_size} is not divisible by "
            f"2^depth = {2 ** cfg.depth}")


class _DoubleConv:
    """Two plain conv blocks back to back (the ``unet`` stage)."""

    def __init__(self, name, cin, cout, kernel, rng, dtype):
        self.b1 = ConvBlock(f"{name}.c1", cin, cout, kernel, rng=rng,
                            dtype=dtype)
        self.b2 = ConvBlock(f"{name}.c2", cout, cout, kernel, rng=rng,
                            dtype=dtype)

    def __call__(self, x, mode):
        return self.b2(self.b1(x, mode), mode)

    def parameters(self):
        return self.b1.parameters() + self.b2.parameters()


class ModelGraph:
    """A built network: stages, parameter registry, forward pass."""

    def __init__(self, config: ModelConfig, seed: int, dtype=np.float32):
        _validate_config(config)
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)

        def stage(name, cin, cout):
            if config.arch == "dunet":
                return DeformableBlock(name, cin, cout, config.kernel,
                                       config.offset_kernel, rng=rng,
                                       dtype=self.dtype)
            return _DoubleConv(name, cin, cout, config.kernel, rng,
                               self.dtype)

        self.encoder = []
        cin = 1
        for level in range(config.depth):
            cout = config.base_filters * (2 ** level)
            self.encoder.append(stage(f"enc{level}", cin, cout))
            cin = cout
        self.bottleneck = stage("mid", cin, config.base_filters
                                * (2 ** config.depth))

        self.decoder = []  # (level, adjust_conv_or_None, stage)
        up_c = config.base_filters * (2 ** config.depth)
        for level in reversed(range(config.depth)):
            skip_c = config.base_filters * (2 ** level)
            if config.arch == "dunet":
                adjust = Conv2dLayer(f"dec{level}.adjust", up_c + skip_c,
                                     skip_c, config.kernel, rng=rng,
                                     dtype=self.dtype)
                self.decoder.append((level, adjust,
                                     stage(f"dec{level}", skip_c, skip_c)))
            else:
                self.decoder.append((level, None,
                                     stage(f"dec{level}", up_c + skip_c,
                                           skip_c)))
            up_c = skip_c
        self.head = Conv2dLayer("head", up_c, 1, 1, pad=0, rng=rng,
                                dtype=self.dtype)

        self._stages = (list(self.encoder) + [self.bottleneck]
                        + [s for _, _, s in self.decoder])
        params = []
        for enc in self.encoder:
            params += enc.parameters()
        params += self.bottleneck.parameters()
        for _, adjust, dec in self.decoder:
            if adjust is not None:
                params += adjust.parameters()
            params += dec.parameters()
        params += self.head.parameters()
        self._params = {p.name: p for p in params}

    def parameters(self):
        """Name -> Parameter mapping in checkpoint order."""
        return dict(self._params)

    def batchnorms(self):
        out = []
        for s in self._stages:
            if isinstance(s, DeformableBlock):
                out.append(s.bn)
            else:
                out.extend([s.b1.bn, s.b2.bn])
        return out

    def forward(self, x, mode: str = "infer") -> Tensor:
        if mode not in ("train", "infer"):
            raise ConfigError(f"forward: unknown mode {mode!r}")
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x), dtype=self.dtype)
        if x.data.ndim != 4 or x.data.shape[1] != 1:
            raise ShapeError("forward: expected [N, 1, H, W] input, got "
                             f"{x.data.shape}")
        step = 2 ** self.config.depth
        _, _, h, w = x.data.shape
        if h % step or w % step:
            raise ShapeError(f"forward: {h}x{w} input is not divisible by "
                             f"2^depth = {step}")
        if mode == "infer":
            with no_grad():
                return self._run(x, mode)
        return self._run(x, mode)

    def _run(self, x, mode):
        h = x
        skips = []
        for enc in self.encoder:
            h = enc(h, mode)
            skips.append(h)
            h = maxpool2d(h, 2, 2)
        h = self.bottleneck(h, mode)
        for level, adjust, dec in self.decoder:
            h = upsample2d(h, 2)
            h = concat_channels(h, skips[level])
            if adjust is not None:
                h = adjust(h)
            h = dec(h, mode)
        return sigmoid(self.head(h))

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Snapshot parameters and running statistics (fresh copies)."""
        out = {name: p.data.copy() for name, p in self._params.items()}
        for bn in self.batchnorms():
            if bn.state.initialized:
                out[f"{bn.name}.running_mean"] = bn.state.mean.copy()
                out[f"{bn.name}.running_var"] = bn.state.var.copy()
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy a snapshot back into the graph.

        Every parameter must be present with its exact shape; extra keys
        that are not parameters or running statistics are rejected, so
        loading a checkpoint from a different architecture fails loudly.
        """
        stat_names = set()
        for bn in self.batchnorms():
            stat_names.add(f"{bn.name}.running_mean")
            stat_names.add(f"{bn.name}.running_var")
        known = set(self._params) | stat_names
        unknown = sorted(set(arrays) - known)
        missing = sorted(set(self._params) - set(arrays))
        if unknown or missing:
            raise ConfigError(
                "checkpoint does not match the model: "
                f"missing={missing[:4]} unexpected={unknown[:4]}")
        for name, p in self._params.items():
            arr = np.asarray(arrays[name], dtype=self.dtype)
            if arr.shape != p.data.shape:
                raise ConfigError(
                    f"checkpoint array {name} has shape {arr.shape}, "
                    f"model expects {p.data.shape}")
            p.data = np.ascontiguousarray(arr)
        for bn in self.batchnorms():
            mkey, vkey = f"{bn.name}.running_mean", f"{bn.name}.running_var"
            if mkey in arrays and vkey in arrays:
                bn.state.mean = np.asarray(arrays[mkey],
                                           dtype=self.dtype).copy()
                bn.state.var = np.asarray(arrays[vkey],
                                          dtype=self.dtype).copy()


def build(config: ModelConfig, seed: int, dtype=np.float32) -> ModelGraph:
    """Construct a model; the same config and seed give identical weights."""
    return ModelGraph(config, seed, dtype)


def forward(graph: ModelGraph, x, mode: str = "infer") -> Tensor:
    return graph.forward(x, mode)


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays as float32 records in insertion order."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in arrays.items():
            blob = name.encode("utf-8")
            # asarray, not ascontiguousarray: the latter promotes rank-0
            # records to rank 1, and tobytes() already emits C order.
            a = np.asarray(arr, dtype="<f4")
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", a.ndim))
            if a.ndim:
                f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(a.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into a name -> float32 array mapping."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise DataError(f"{path}: truncated checkpoint ({what})")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    while pos < len(raw):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "dims")) if rank \
            else ()
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * count, f"data for {name}"),
                             dtype="<f4").reshape(shape)
        out[name] = data.copy()
    return out
