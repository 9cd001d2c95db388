"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray together with an optional gradient buffer.
Every operation that runs while gradients are enabled records a closure that
knows how to push an upstream gradient to the operation's inputs.  Calling
:func:`backward` on a scalar loss walks the recorded graph in reverse
topological order and accumulates ``.grad`` on every tensor that asked for it.

Storage defaults to ``float32``; building a graph from ``float64`` inputs
keeps the whole computation in 64-bit, which is what the gradient checker
uses.  All operations are single-threaded numpy calls, so results are
bit-reproducible for a fixed input.
"""

from __future__ import annotations

import contextlib
from typing import Iterable

import numpy as np

from .errors import ConfigError, ShapeError, StateError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Context manager that disables graph recording inside its body."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_done_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        # ascontiguousarray would silently promote 0-d scalars to 1-d
        if arr.ndim:
            self.data = np.ascontiguousarray(arr, dtype=dtype)
        else:
            self.data = np.asarray(arr, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._done_backward = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype},"
                f" requires_grad={self.requires_grad})")

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)

    # Small amount of operator sugar; the heavy lifting lives in the
    # module-level functions below.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor)
                   else -_as_scalar(other))


class Parameter(Tensor):
    """A named leaf tensor that always participates in gradients."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _as_scalar(value) -> float:
    return float(value)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _accum(t: Tensor, g: np.ndarray) -> None:
    """Add an upstream gradient into ``t.grad`` (allocating on first use)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _record(out: Tensor, parents: Iterable[Tensor], backward_fn) -> Tensor:
    """Attach a backward closure to ``out`` when recording is active."""
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def zero_grad(tensors: Iterable[Tensor]) -> None:
    """Clear the gradient buffers of every tensor in ``tensors``."""
    for t in tensors:
        t.grad = None


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Run reverse-mode differentiation from a scalar ``loss``.

    Returns a mapping from every gradient-carrying tensor in the graph to its
    accumulated gradient array.  The graph belonging to ``loss`` is single
    use: a second call without a fresh forward pass raises ``StateError``.
    """
    if loss.data.size != 1:
        raise ShapeError(
            f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._done_backward:
        raise StateError("backward already ran on this graph; "
                         "re-run the forward pass to build a fresh one")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(loss, 0)]
    while stack:
        node, child = stack[-1]
        if child == 0 and id(node) in visited:
            stack.pop()
            continue
        visited.add(id(node))
        if child < len(node._parents):
            stack[-1] = (node, child + 1)
            nxt = node._parents[child]
            if id(nxt) not in visited:
                stack.append((nxt, 0))
        else:
            stack.pop()
            topo.append(node)

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    loss._done_backward = True
    return {t: t.grad for t in topo if t.requires_grad and t.grad is not None}


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
        out = Tensor(a.data + b.data)

        def _bw(g):
            _accum(a, g)
            _accum(b, g)

        return _record(out, (a, b), _bw)

    c = _as_scalar(b)
    out = Tensor(a.data + np.asarray(c, dtype=a.dtype))

    def _bw_scalar(g):
        _accum(a, g)

    return _record(out, (a,), _bw_scalar)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")
        out = Tensor(a.data * b.data)

        def _bw(g):
            _accum(a, g * b.data)
            _accum(b, g * a.data)

        return _record(out, (a, b), _bw)

    c = np.asarray(_as_scalar(b), dtype=a.dtype)
    out = Tensor(a.data * c)

    def _bw_scalar(g):
        _accum(a, g * c)

    return _record(out, (a,), _bw_scalar)


def tsum(x: Tensor) -> Tensor:
    """Sum all elements down to a scalar tensor."""
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def _bw(g):
        _accum(x, np.broadcast_to(g, x.data.shape).astype(x.dtype, copy=False))

    return _record(out, (x,), _bw)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def _bw(g):
        _accum(x, g * (x.data > 0))

    return _record(out, (x,), _bw)


def sigmoid(x: Tensor) -> Tensor:
    # Split on sign so exp never overflows.
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s)

    def _bw(g):
        _accum(x, g * s * (1.0 - s))

    return _record(out, (x,), _bw)


def bce_loss(pred: Tensor, target, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy of probabilities ``pred`` against 0/1 targets.

    Predictions are clamped to ``[eps, 1 - eps]`` before the logs; gradients
    are zero where the clamp is active.  Targets are treated as constants.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.data.shape != t.shape:
        raise ShapeError(
            f"bce_loss: pred {pred.data.shape} vs target {t.shape}")
    t = t.astype(pred.dtype, copy=False)
    p = np.clip(pred.data, eps, 1.0 - eps)
    n = p.size
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean()
    out = Tensor(np.asarray(loss, dtype=pred.dtype))
    inside = (pred.data >= eps) & (pred.data <= 1.0 - eps)

    def _bw(g):
        dp = (p - t) / (p * (1.0 - p) * n)
        _accum(pred, g * dp * inside)

    return _record(out, (pred,), _bw)


# ---------------------------------------------------------------------------
# spatial ops on [N, C, H, W] arrays


def _check_nchw(name: str, x: Tensor) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{name}: expected a [N, C, H, W] tensor, "
                         f"got rank {x.data.ndim}")


def _im2col(xd: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Unfold sliding windows into a [N, C*kh*kw, out_h*out_w] matrix."""
    n, c, h, w = xd.shape
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out_h = (h + 2 * pad - kh) // stride + 1
    out_w = (w + 2 * pad - kw) // stride + 1
    sn, sc, sh, sw = xd.strides
    view = np.lib.stride_tricks.as_strided(
        xd, (n, c, kh, kw, out_h, out_w),
        (sn, sc, sh, sw, sh * stride, sw * stride))
    return view.reshape(n, c * kh * kw, out_h * out_w), out_h, out_w


def _col2im(dcols: np.ndarray, xshape, kh: int, kw: int, stride: int,
            pad: int) -> np.ndarray:
    n, c, h, w = xshape
    out_h = (h + 2 * pad - kh) // stride + 1
    out_w = (w + 2 * pad - kw) // stride + 1
    d = dcols.reshape(n, c, kh, kw, out_h, out_w)
    buf = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for iy in range(kh):
        for ix in range(kw):
            buf[:, :, iy:iy + stride * out_h:stride,
                ix:ix + stride * out_w:stride] += d[:, :, iy, ix]
    if pad:
        return buf[:, :, pad:pad + h, pad:pad + w].copy()
    return buf


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1,
           pad: int = 0) -> Tensor:
    """Cross-correlate ``x`` with ``w`` and add the per-channel bias ``b``.

    ``x`` is [N, C_in, H, W], ``w`` is [C_out, C_in, k, k] with odd square
    kernels, ``b`` is [C_out].  The padded extent must tile exactly:
    ``(H + 2*pad - k)`` has to be divisible by ``stride``.
    """
    _check_nchw("conv2d", x)
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d: weight rank {w.data.ndim}, expected 4")
    n, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin_w != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, "
                         f"weight expects {cin_w}")
    if kh != kw or kh % 2 == 0:
        raise ConfigError(f"conv2d: kernel must be odd and square, "
                          f"got {kh}x{kw}")
    if b.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.data.shape}, "
                         f"expected ({cout},)")
    if stride < 1:
        raise ConfigError(f"conv2d: stride must be positive, got {stride}")
    if (h + 2 * pad - kh) % stride or (wd + 2 * pad - kw) % stride:
        raise ConfigError(
            f"conv2d: {h}x{wd} input with pad {pad}, kernel {kh}, stride "
            f"{stride} does not tile exactly")

    cols, out_h, out_w = _im2col(x.data, kh, kw, stride, pad)
    wf = w.data.reshape(cout, -1)
    y = np.matmul(wf, cols) + b.data[:, None]
    out = Tensor(y.reshape(n, cout, out_h, out_w))

    def _bw(g):
        gf = g.reshape(n, cout, -1)
        _accum(b, gf.sum(axis=(0, 2)))
        if w.requires_grad:
            _accum(w, np.einsum("ncp,nfp->cf", gf, cols).reshape(w.data.shape))
        if x.requires_grad:
            dcols = np.matmul(wf.T, gf)
            _accum(x, _col2im(dcols, x.data.shape, kh, kw, stride, pad))

    return _record(out, (x, w, b), _bw)


class BatchNormState:
    """Running statistics owned by a batchnorm layer.

    ``mean``/``var`` stay ``None`` until the first training-mode pass; using
    inference mode before that is a lifecycle error.
    """

    __slots__ = ("mean", "var")

    def __init__(self):
        self.mean = None
        self.var = None

    @property
    def initialized(self) -> bool:
        return self.mean is not None


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                mode: str, momentum: float = 0.99,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization with scale ``gamma`` and shift ``beta``.

    ``mode="train"`` normalizes by batch statistics and folds them into the
    running averages held by ``state`` (first pass copies, later passes use
    ``momentum * old + (1 - momentum) * new``).  ``mode="infer"`` normalizes
    by the stored running statistics.
    """
    _check_nchw("batchnorm2d", x)
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    if mode not in ("train", "infer"):
        raise ConfigError(f"batchnorm2d: unknown mode {mode!r}")

    def _per_channel(v):
        return v.reshape(1, c, 1, 1)

    if mode == "train":
        axes = (0, 2, 3)
        m = x.data.mean(axis=axes)
        v = x.data.var(axis=axes)
        inv_std = 1.0 / np.sqrt(v + eps)
        xhat = (x.data - _per_channel(m)) * _per_channel(inv_std)
        if not state.initialized:
            state.mean = m.copy()
            state.var = v.copy()
        else:
            state.mean = momentum * state.mean + (1.0 - momentum) * m
            state.var = momentum * state.var + (1.0 - momentum) * v
        out = Tensor(_per_channel(gamma.data) * xhat + _per_channel(beta.data))
        count = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

        def _bw(g):
            _accum(beta, g.sum(axis=axes))
            _accum(gamma, (g * xhat).sum(axis=axes))
            if x.requires_grad:
                dxhat = g * _per_channel(gamma.data)
                term = (dxhat.sum(axis=axes, keepdims=True)
                        + xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
                _accum(x, _per_channel(inv_std) * (dxhat - term / count))

        return _record(out, (x, gamma, beta), _bw)

    if not state.initialized:
        raise StateError("batchnorm2d: inference before any training pass; "
                         "running statistics are empty")
    inv_std = 1.0 / np.sqrt(state.var + eps)
    xhat = (x.data - _per_channel(state.mean)) * _per_channel(inv_std)
    out = Tensor(_per_channel(gamma.data) * xhat + _per_channel(beta.data))

    def _bw_infer(g):
        _accum(beta, g.sum(axis=(0, 2, 3)))
        _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            _accum(x, g * _per_channel(gamma.data * inv_std))

    return _record(out, (x, gamma, beta), _bw_infer)


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties go to the first window position
    in row-major order."""
    _check_nchw("maxpool2d", x)
    if k != stride:
        raise ConfigError("maxpool2d: only non-overlapping pooling "
                          f"(k == stride) is supported, got k={k} "
                          f"stride={stride}")
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise ShapeError(f"maxpool2d: {h}x{w} input not divisible by {k}")
    out_h, out_w = h // k, w // k
    windows = (x.data.reshape(n, c, out_h, k, out_w, k)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, out_h, out_w, k * k))
    idx = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    out = Tensor(y)

    def _bw(g):
        dz = np.zeros_like(windows)
        np.put_along_axis(dz, idx[..., None], g[..., None], axis=-1)
        dx = (dz.reshape(n, c, out_h, out_w, k, k)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, h, w))
        _accum(x, dx)

    return _record(out, (x,), _bw)


def upsample2d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling: each pixel becomes a factor x factor
    block."""
    _check_nchw("upsample2d", x)
    if factor < 1:
        raise ConfigError(f"upsample2d: factor must be positive, got {factor}")
    n, c, h, w = x.data.shape
    y = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    out = Tensor(y)

    def _bw(g):
        _accum(x, g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return _record(out, (x,), _bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two feature maps along the channel axis, ``a`` first."""
    _check_nchw("concat_channels", a)
    _check_nchw("concat_channels", b)
    na, ca, ha, wa = a.data.shape
    nb, cb, hb, wb = b.data.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"concat_channels: incompatible shapes "
                         f"{a.data.shape} vs {b.data.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"concat_channels: dtype mismatch "
                         f"{a.dtype} vs {b.dtype}")
    out = Tensor(np.concatenate([a.data, b.data], axis=1))

    def _bw(g):
        _accum(a, g[:, :ca])
        _accum(b, g[:, ca:])

    return _record(out, (a, b), _bw)
