"""Deformable 2-D convolution.

A plain convolution reads its inputs at the fixed integer positions of a
k x k window.  The deformable variant shifts every window tap by a learned,
real-valued 2-D offset and reads the input there through bilinear
interpolation, so the effective receptive field can stretch along image
structures.  The offsets themselves come from a small convolution over the
same input and receive gradients like any other activation.

Layout conventions used throughout:

* window taps are enumerated row-major as ``(dy, dx)`` pairs, from
  ``(-r, -r)`` to ``(r, r)`` with ``r = (k - 1) // 2``;
* the offset feature map carries ``2 * k * k`` channels interleaved as
  ``dy_0, dx_0, dy_1, dx_1, ...`` in that tap order;
* sampling positions outside the image contribute zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import BatchNorm2d, Conv2dLayer, he_uniform
from .tensor import Parameter, Tensor, _accum, _record, relu


@dataclass(frozen=True)
class SamplingGrid:
    """The integer window taps of a k x k kernel, row-major."""

    kernel_size: int
    taps: tuple[tuple[int, int], ...]


def sampling_grid(kernel_size: int) -> SamplingGrid:
    """Enumerate the ``(dy, dx)`` taps of an odd square kernel."""
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ConfigError(
            f"sampling_grid: kernel must be odd and positive, "
            f"got {kernel_size}")
    r = (kernel_size - 1) // 2
    taps = tuple((dy, dx)
                 for dy in range(-r, r + 1)
                 for dx in range(-r, r + 1))
    return SamplingGrid(kernel_size, taps)


def bilinear_sample(x, py: float, px: float, n: int = 0, c: int = 0) -> float:
    """Sample one plane of ``x`` at the real-valued position ``(py, px)``.

    The value is the weighted sum of the four integer neighbours, each
    weighted by ``(1 - |py - qy|) * (1 - |px - qx|)``; neighbours outside
    the plane contribute zero.  ``x`` may be a Tensor or an [N, C, H, W]
    ndarray.
    """
    value, _, _, _ = bilinear_sample_grad(x, py, px, n, c)
    return value


def bilinear_sample_grad(x, py: float, px: float, n: int = 0, c: int = 0):
    """Like :func:`bilinear_sample` but also return the derivatives.

    Returns ``(value, pixel_weights, d_dpy, d_dpx)`` where ``pixel_weights``
    maps each in-bounds integer neighbour ``(qy, qx)`` to its interpolation
    weight (the derivative of the value with respect to that pixel).  At
    integer positions the position derivatives are the right-hand limits,
    consistent with the floor-based weights.
    """
    plane = x.data[n, c] if isinstance(x, Tensor) else np.asarray(x)[n, c]
    h, w = plane.shape
    y0 = math.floor(py)
    x0 = math.floor(px)
    wy = py - y0
    wx = px - x0

    def at(qy, qx):
        if 0 <= qy < h and 0 <= qx < w:
            return float(plane[qy, qx])
        return None

    corners = (
        (y0, x0, (1.0 - wy) * (1.0 - wx), -(1.0 - wx), -(1.0 - wy)),
        (y0, x0 + 1, (1.0 - wy) * wx, -wx, (1.0 - wy)),
        (y0 + 1, x0, wy * (1.0 - wx), (1.0 - wx), -wy),
        (y0 + 1, x0 + 1, wy * wx, wx, wy),
    )
    value = 0.0
    d_dpy = 0.0
    d_dpx = 0.0
    pixel_weights: dict[tuple[int, int], float] = {}
    for qy, qx, weight, dwy, dwx in corners:
        v = at(qy, qx)
        if v is None:
            continue
        value += weight * v
        d_dpy += dwy * v
        d_dpx += dwx * v
        pixel_weights[(qy, qx)] = weight
    return value, pixel_weights, d_dpy, d_dpx


def deformable_conv2d(x: Tensor, w: Tensor, offsets: Tensor,
                      b: Tensor) -> Tensor:
    """Convolution whose window taps are displaced by per-pixel offsets.

    ``x`` is [N, C_in, H, W], ``w`` is [C_out, C_in, k, k] (odd square),
    ``offsets`` is [N, 2*k*k, H, W] in the interleaved layout described in
    the module docstring, ``b`` is [C_out].  Output positions walk the input
    at stride 1 with same-size output; every tap position is
    ``(y + dy_i + offset_y, x + dx_i + offset_x)`` and is read bilinearly,
    with zero contribution outside the image.  Gradients flow to ``x``,
    ``w``, ``b``, and ``offsets``.
    """
    if x.data.ndim != 4:
        raise ShapeError("deformable_conv2d: expected [N, C, H, W] input, "
                         f"got rank {x.data.ndim}")
    if w.data.ndim != 4:
        raise ShapeError("deformable_conv2d: weight rank "
                         f"{w.data.ndim}, expected 4")
    n, cin, h, wd = x.data.shape
    cout, cin_w, k, k2 = w.data.shape
    if k != k2 or k % 2 == 0:
        raise ConfigError(
            f"deformable_conv2d: kernel must be odd and square, got {k}x{k2}")
    if cin_w != cin:
        raise ShapeError(f"deformable_conv2d: input has {cin} channels, "
                         f"weight expects {cin_w}")
    taps = k * k
    if offsets.data.shape != (n, 2 * taps, h, wd):
        raise ShapeError(
            f"deformable_conv2d: offsets shape {offsets.data.shape} does not "
            f"match [N={n}, 2*k*k={2 * taps}, H={h}, W={wd}]")
    if b.data.shape != (cout,):
        raise ShapeError(f"deformable_conv2d: bias shape {b.data.shape}, "
                         f"expected ({cout},)")

    dt = np.result_type(x.dtype, offsets.dtype)
    grid = sampling_grid(k)
    gy = np.array([t[0] for t in grid.taps], dtype=dt)
    gx = np.array([t[1] for t in grid.taps], dtype=dt)
    off = offsets.data.reshape(n, taps, 2, h, wd)

    py = (off[:, :, 0] + gy[None, :, None, None]
          + np.arange(h, dtype=dt)[None, None, :, None])
    px = (off[:, :, 1] + gx[None, :, None, None]
          + np.arange(wd, dtype=dt)[None, None, None, :])

    y0f = np.floor(py)
    x0f = np.floor(px)
    wy = py - y0f
    wx = px - x0f
    y0 = y0f.astype(np.int64)
    x0 = x0f.astype(np.int64)

    xt = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))  # [N, H, W, C]
    nidx = np.arange(n)[:, None, None, None]

    def corner(yi, xi):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < wd)
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, wd - 1)
        vals = xt[nidx, yc, xc]  # [N, taps, H, W, C] gather (a fresh copy)
        vals *= valid[..., None]
        return vals, valid, yc, xc

    v00, m00, y0c, x0c = corner(y0, x0)
    v01, m01, y0c2, x1c = corner(y0, x0 + 1)
    v10, m10, y1c, x0c2 = corner(y0 + 1, x0)
    v11, m11, y1c2, x1c2 = corner(y0 + 1, x0 + 1)

    w00 = ((1.0 - wy) * (1.0 - wx))[..., None]
    w01 = ((1.0 - wy) * wx)[..., None]
    w10 = (wy * (1.0 - wx))[..., None]
    w11 = (wy * wx)[..., None]

    sampled = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
    s2 = sampled.transpose(0, 2, 3, 1, 4).reshape(n, h * wd, taps * cin)
    wf = w.data.transpose(0, 2, 3, 1).reshape(cout, taps * cin)
    y = np.matmul(s2, wf.T) + b.data
    out = Tensor(y.transpose(0, 2, 1).reshape(n, cout, h, wd))

    def _bw(g):
        gf = g.reshape(n, cout, h * wd).transpose(0, 2, 1)  # [N, P, C_out]
        _accum(b, gf.sum(axis=(0, 1)))
        if w.requires_grad:
            dwf = np.einsum("npc,npf->cf", gf, s2)
            _accum(w, dwf.reshape(cout, k, k, cin).transpose(0, 3, 1, 2))
        if not (x.requires_grad or offsets.requires_grad):
            return
        ds = (np.matmul(gf, wf)
              .reshape(n, h, wd, taps, cin)
              .transpose(0, 3, 1, 2, 4))  # [N, taps, H, W, C_in]
        if offsets.requires_grad:
            dpy = (ds * ((1.0 - wx)[..., None] * (v10 - v00)
                         + wx[..., None] * (v11 - v01))).sum(axis=-1)
            dpx = (ds * ((1.0 - wy)[..., None] * (v01 - v00)
                         + wy[..., None] * (v11 - v10))).sum(axis=-1)
            doff = np.stack([dpy, dpx], axis=2).reshape(n, 2 * taps, h, wd)
            _accum(offsets, doff.astype(offsets.dtype, copy=False))
        if x.requires_grad:
            dxt = np.zeros((n, h, wd, cin), dtype=x.dtype)
            for weight, mask, yc, xc in ((w00, m00, y0c, x0c),
                                         (w01, m01, y0c2, x1c),
                                         (w10, m10, y1c, x0c2),
                                         (w11, m11, y1c2, x1c2)):
                contrib = ds * (weight * mask[..., None])
                _scatter_add(dxt, nidx, yc, xc, contrib)
            _accum(x, dxt.transpose(0, 3, 1, 2))

    return _record(out, (x, w, offsets, b), _bw)


def _scatter_add(dxt: np.ndarray, nidx, yc, xc, contrib: np.ndarray) -> None:
    """Accumulate ``contrib[n, t, y, x, c]`` into ``dxt[n, yc, xc, c]``.

    Uses ``bincount`` over flattened indices, which is both deterministic
    and much faster than ``np.add.at`` for the millions of tiny updates a
    training step produces.
    """
    n, h, wd, cin = dxt.shape
    lin = (nidx * h + yc) * wd + xc  # [N, taps, H, W]
    lin = lin[..., None] * cin + np.arange(cin, dtype=np.int64)
    acc = np.bincount(lin.ravel(), weights=contrib.ravel(),
                      minlength=dxt.size)
    dxt += acc.reshape(dxt.shape).astype(dxt.dtype, copy=False)


class DeformableBlock:
    """Offset conv, deformable conv, batch norm, ReLU.

    The offset predictor starts at exactly zero (weights and bias), so a
    freshly built block behaves like its plain convolution counterpart until
    training moves the offsets.
    """

    def __init__(self, name: str, in_channels: int, out_channels: int,
                 kernel: int = 3, offset_kernel: int = 3,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.name = name
        self.kernel = kernel
        self.offset = Conv2dLayer(f"{name}.off", in_channels,
                                  2 * kernel * kernel, offset_kernel,
                                  init="zeros", dtype=dtype)
        wshape = (out_channels, in_channels, kernel, kernel)
        self.w = Parameter(
            f"{name}.w",
            he_uniform(rng, wshape, in_channels * kernel * kernel, dtype),
            dtype=dtype)
        self.b = Parameter(f"{name}.b", np.zeros(out_channels, dtype=dtype),
                           dtype=dtype)
        self.bn = BatchNorm2d(f"{name}.bn", out_channels, dtype=dtype)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        offsets = self.offset(x)
        y = deformable_conv2d(x, self.w, offsets, self.b)
        return relu(self.bn(y, mode))

    def parameters(self) -> list[Parameter]:
        return (self.offset.parameters() + [self.w, self.b]
                + self.bn.parameters())
