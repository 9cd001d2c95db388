"""Finite-difference verification of the backward rules.

Every check runs the graph in float64, computes analytic gradients with
:func:`vesseg.tensor.backward`, and compares them against central
differences with step ``h``.  The comparison metric is

    max |analytic - numeric| / max(floor, |analytic|, |numeric|)

taken over all checked entries.  Inputs are drawn so that the loss is
smooth on the ``+-h`` interval around every probe: pooling windows have
well-separated values, ReLU inputs sit away from zero, and deformable
sampling positions keep fractional parts in the interior of their cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import deform
from . import model as model_mod
from . import tensor as T

DEFAULT_H = 1e-3
DEFAULT_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max_rel_err={self.max_rel_err:.3e} "
                f"(tol {self.tol:.0e})")


def relative_error(analytic: np.ndarray, numeric: np.ndarray,
                   floor: float = DEFAULT_FLOOR) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(floor, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def numerical_grad(value_fn, arrays: list[np.ndarray], index: int,
                   h: float = DEFAULT_H) -> np.ndarray:
    """Central-difference gradient of ``value_fn(arrays)`` w.r.t. one input."""
    work = [a.copy() for a in arrays]
    target = work[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = value_fn(work)
        flat[j] = orig - h
        fm = value_fn(work)
        flat[j] = orig
        gflat[j] = (fp - fm) / (2.0 * h)
    return grad


def check_grads(name: str, fn, arrays: list[np.ndarray],
                wrt: list[int] | None = None, tol: float = 1e-4,
                h: float = DEFAULT_H,
                floor: float = DEFAULT_FLOOR) -> CheckResult:
    """Compare analytic and numeric gradients of ``fn``.

    ``fn`` maps a list of float64 tensors to a scalar tensor; ``arrays``
    supplies the input values.  ``wrt`` selects which inputs to probe
    (default: all of them).
    """
    tensors = [T.Tensor(a, requires_grad=True, dtype=np.float64)
               for a in arrays]
    loss = fn(tensors)
    T.backward(loss)

    def value(arrs):
        with T.no_grad():
            fresh = [T.Tensor(a, dtype=np.float64) for a in arrs]
            return float(fn(fresh).data)

    worst = 0.0
    for i in (range(len(arrays)) if wrt is None else wrt):
        analytic = tensors[i].grad
        if analytic is None:
            analytic = np.zeros_like(tensors[i].data)
        numeric = numerical_grad(value, arrays, i, h)
        worst = max(worst, relative_error(analytic, numeric, floor))
    return CheckResult(name, worst, tol)


def _proj(out: T.Tensor, r: np.ndarray) -> T.Tensor:
    """Scalar projection sum(out * r); a generic smooth loss surrogate."""
    return T.tsum(T.mul(out, T.Tensor(r)))


# ---------------------------------------------------------------------------
# op suites


def _check_conv2d(rng) -> list[CheckResult]:
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3)) * 0.5
    b = rng.standard_normal(4)
    r = rng.standard_normal((2, 4, 6, 6))

    def fn(ts):
        return _proj(T.conv2d(ts[0], ts[1], ts[2], stride=1, pad=1), r)

    x2 = rng.standard_normal((2, 2, 7, 7))
    w2 = rng.standard_normal((3, 2, 3, 3)) * 0.5
    b2 = rng.standard_normal(3)
    r2 = rng.standard_normal((2, 3, 3, 3))

    def fn2(ts):
        return _proj(T.conv2d(ts[0], ts[1], ts[2], stride=2, pad=0), r2)

    return [check_grads("conv2d", fn, [x, w, b]),
            check_grads("conv2d_stride2", fn2, [x2, w2, b2])]


def _check_batchnorm(rng) -> list[CheckResult]:
    x = rng.standard_normal((3, 4, 5, 5)) * 2.0 + 0.5
    gamma = rng.uniform(0.5, 1.5, 4)
    beta = rng.uniform(-0.5, 0.5, 4)
    r = rng.standard_normal((3, 4, 5, 5))

    def fn_train(ts):
        out = T.batchnorm2d(ts[0], ts[1], ts[2], T.BatchNormState(), "train")
        return _proj(out, r)

    frozen = T.BatchNormState()
    with T.no_grad():
        T.batchnorm2d(T.Tensor(x, dtype=np.float64),
                      T.Tensor(gamma, dtype=np.float64),
                      T.Tensor(beta, dtype=np.float64), frozen, "train")

    def fn_infer(ts):
        out = T.batchnorm2d(ts[0], ts[1], ts[2], frozen, "infer")
        return _proj(out, r)

    return [check_grads("batchnorm2d", fn_train, [x, gamma, beta]),
            check_grads("batchnorm2d_infer", fn_infer, [x, gamma, beta])]


def _check_maxpool(rng) -> CheckResult:
    # Distinct, well separated values so no window ties flip under +-h.
    n, c, h, w = 2, 3, 6, 6
    x = rng.permutation(n * c * h * w).astype(np.float64)
    x = (x * 0.1).reshape(n, c, h, w)
    r = rng.standard_normal((n, c, h // 2, w // 2))

    def fn(ts):
        return _proj(T.maxpool2d(ts[0]), r)

    return check_grads("maxpool2d", fn, [x])


def _check_upsample(rng) -> CheckResult:
    x = rng.standard_normal((2, 3, 4, 4))
    r = rng.standard_normal((2, 3, 8, 8))

    def fn(ts):
        return _proj(T.upsample2d(ts[0], 2), r)

    return check_grads("upsample2d", fn, [x])


def _check_concat(rng) -> CheckResult:
    a = rng.standard_normal((2, 3, 4, 4))
    b = rng.standard_normal((2, 2, 4, 4))
    r = rng.standard_normal((2, 5, 4, 4))

    def fn(ts):
        return _proj(T.concat_channels(ts[0], ts[1]), r)

    return check_grads("concat_channels", fn, [a, b])


def _check_relu(rng) -> CheckResult:
    x = rng.standard_normal((3, 2, 5, 5))
    x += 0.2 * np.sign(x)  # keep every entry away from the kink
    r = rng.standard_normal(x.shape)

    def fn(ts):
        return _proj(T.relu(ts[0]), r)

    return check_grads("relu", fn, [x])


def _check_sigmoid(rng) -> CheckResult:
    x = rng.standard_normal((3, 2, 5, 5)) * 2.0
    r = rng.standard_normal(x.shape)

    def fn(ts):
        return _proj(T.sigmoid(ts[0]), r)

    return check_grads("sigmoid", fn, [x])


def _check_bce(rng) -> CheckResult:
    # Keep predictions away from the interval ends: the curvature of
    # -log(p) there would dominate the central-difference truncation error.
    pred = rng.uniform(0.12, 0.88, (4, 1, 6, 6))
    target = rng.integers(0, 2, (4, 1, 6, 6)).astype(np.float64)

    def fn(ts):
        return T.bce_loss(ts[0], target)

    return check_grads("bce_loss", fn, [pred])


def _check_bilinear(rng, h: float = DEFAULT_H) -> CheckResult:
    x = rng.standard_normal((1, 1, 5, 6))
    positions = [(1.3, 2.6), (0.45, 4.3), (3.7, 0.2), (-0.6, 2.5),
                 (4.4, 5.35), (2.5, 3.5)]
    worst = 0.0
    for py, px in positions:
        _, weights, dpy, dpx = deform.bilinear_sample_grad(x, py, px)
        num_py = (deform.bilinear_sample(x, py + h, px)
                  - deform.bilinear_sample(x, py - h, px)) / (2 * h)
        num_px = (deform.bilinear_sample(x, py, px + h)
                  - deform.bilinear_sample(x, py, px - h)) / (2 * h)
        worst = max(worst, relative_error(dpy, num_py),
                    relative_error(dpx, num_px))
        for (qy, qx), weight in weights.items():
            orig = x[0, 0, qy, qx]
            x[0, 0, qy, qx] = orig + h
            fp = deform.bilinear_sample(x, py, px)
            x[0, 0, qy, qx] = orig - h
            fm = deform.bilinear_sample(x, py, px)
            x[0, 0, qy, qx] = orig
            worst = max(worst, relative_error(weight, (fp - fm) / (2 * h)))
    return CheckResult("bilinear_sample", worst, 1e-4)


def _interior_offsets(rng, shape) -> np.ndarray:
    """Offsets whose fractional parts stay in (0.2, 0.8), so a +-h probe
    never crosses an interpolation cell boundary."""
    mag = rng.uniform(0.2, 0.8, shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return mag + np.where(sign < 0, -1.0, 0.0) + rng.integers(-1, 2, shape)


def _check_deformable(rng) -> list[CheckResult]:
    n, cin, cout, size = 2, 2, 3, 5
    x = rng.standard_normal((n, cin, size, size))
    w = rng.standard_normal((cout, cin, 3, 3)) * 0.5
    off = _interior_offsets(rng, (n, 18, size, size))
    b = rng.standard_normal(cout)
    r = rng.standard_normal((n, cout, size, size))

    def fn(ts):
        return _proj(deform.deformable_conv2d(ts[0], ts[1], ts[2], ts[3]), r)

    arrays = [x, w, off, b]
    return [check_grads("deformable_conv2d", fn, arrays, wrt=[0, 1, 3]),
            check_grads("deformable_conv2d_offset", fn, arrays, wrt=[2])]


def _check_deformable_block(rng) -> CheckResult:
    n, cin, cout, size = 2, 2, 3, 6
    x = rng.uniform(0.0, 1.0, (n, cin, size, size))
    # Tiny offset-conv weights around a fixed fractional bias: sampling
    # positions stay well inside their cells under every probe below.
    ow = rng.normal(0.0, 0.002, (18, cin, 3, 3))
    ob = 0.37 + rng.uniform(-0.03, 0.03, 18)
    w = rng.standard_normal((cout, cin, 3, 3)) * 0.5
    b = rng.standard_normal(cout) * 0.1
    gamma = rng.uniform(0.5, 1.5, cout)
    r = rng.standard_normal((n, cout, size, size))

    # Choose each channel's shift so that no ReLU input lands near zero:
    # compute the normalized activations once, then place beta in the
    # widest gap of their negatives.  A +-h probe then cannot cross the
    # kink, which would otherwise wreck the finite-difference comparison.
    with T.no_grad():
        off0 = T.conv2d(T.Tensor(x, dtype=np.float64),
                        T.Tensor(ow, dtype=np.float64),
                        T.Tensor(ob, dtype=np.float64), stride=1, pad=1)
        y0 = deform.deformable_conv2d(T.Tensor(x, dtype=np.float64),
                                      T.Tensor(w, dtype=np.float64), off0,
                                      T.Tensor(b, dtype=np.float64))
        u = T.batchnorm2d(y0, T.Tensor(gamma, dtype=np.float64),
                          T.Tensor(np.zeros(cout), dtype=np.float64),
                          T.BatchNormState(), "train").data
    beta = np.empty(cout)
    candidates = np.linspace(0.2, 1.0, 801)
    for ch in range(cout):
        kinks = -u[:, ch].ravel()
        dist = np.abs(candidates[:, None] - kinks[None, :]).min(axis=1)
        beta[ch] = candidates[np.argmax(dist)]

    def fn(ts):
        x_, ow_, ob_, w_, b_, gm, bt = ts
        off = T.conv2d(x_, ow_, ob_, stride=1, pad=1)
        y = deform.deformable_conv2d(x_, w_, off, b_)
        y = T.batchnorm2d(y, gm, bt, T.BatchNormState(), "train")
        return _proj(T.relu(y), r)

    return check_grads("deformable_block", fn, [x, ow, ob, w, b, gamma, beta],
                       tol=1e-3)


def check_model(seed: int = 0, samples: int = 16, h: float = DEFAULT_H,
                tol: float = 1e-3) -> CheckResult:
    """End-to-end check of a small two-level dunet.

    Probes a random subset of parameter entries with central differences
    against the analytic gradient of a projection loss.  Offset predictors
    are nudged off their zero init so the deformable path samples at
    fractional positions.
    """
    rng = np.random.default_rng(seed + 90210)
    cfg = model_mod.ModelConfig(arch="dunet", depth=2, base_filters=2,
                                input_size=8)
    graph = model_mod.build(cfg, seed=seed, dtype=np.float64)
    for name, p in graph.parameters().items():
        if name.endswith(".off.w"):
            p.data = rng.normal(0.0, 0.003, p.data.shape)
        elif name.endswith(".off.b"):
            p.data = 0.37 + rng.uniform(-0.03, 0.03, p.data.shape)
    x = rng.uniform(0.0, 1.0, (2, 1, 8, 8))
    r = rng.standard_normal((2, 1, 8, 8))

    out = graph.forward(x, mode="train")
    loss = _proj(out, r)
    T.backward(loss)

    def value() -> float:
        with T.no_grad():
            res = graph.forward(x, mode="train")
        return float(np.sum(res.data * r))

    params = list(graph.parameters().values())
    sizes = np.array([p.data.size for p in params])
    worst = 0.0
    checked = 0
    attempts = 0
    while checked < samples and attempts < samples * 20:
        attempts += 1
        pi = int(rng.integers(len(params)))
        j = int(rng.integers(sizes[pi]))
        p = params[pi]
        analytic = 0.0 if p.grad is None else float(p.grad.flat[j])

        def probe(step: float) -> float:
            orig = p.data.flat[j]
            p.data.flat[j] = orig + step
            fp = value()
            p.data.flat[j] = orig - step
            fm = value()
            p.data.flat[j] = orig
            return (fp - fm) / (2.0 * step)

        numeric = probe(h)
        # A probe that straddles a ReLU kink or a pooling tie makes the
        # secant slope depend on the step size; such entries are not
        # differentiable there, so resample instead of comparing.
        if relative_error(numeric, probe(h / 2)) > 1e-4:
            continue
        worst = max(worst, relative_error(analytic, numeric))
        checked += 1
    T.zero_grad(params)
    return CheckResult("dunet_depth2_end_to_end", worst, tol)


def run_all(seed: int = 7) -> list[CheckResult]:
    """Run every gradient check; returns one result per op."""
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []
    results += _check_conv2d(rng)
    results += _check_batchnorm(rng)
    results.append(_check_maxpool(rng))
    results.append(_check_upsample(rng))
    results.append(_check_concat(rng))
    results.append(_check_relu(rng))
    results.append(_check_sigmoid(rng))
    results.append(_check_bce(rng))
    results.append(_check_bilinear(rng))
    results += _check_deformable(rng)
    results.append(_check_deformable_block(rng))
    results.append(check_model(seed=seed))
    return results


def format_results(results: list[CheckResult]) -> str:
    return "\n".join(res.line() for res in results)
