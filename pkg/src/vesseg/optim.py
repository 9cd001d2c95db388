"""Adam, the plateau learning-rate schedule, and the training loop.

The schedule follows the usual reduce-on-plateau recipe: an epoch counts as
an improvement when its validation loss drops more than ``improve_tol``
below the best significant value so far.  After ``plateau_patience`` epochs
without improvement the learning rate is multiplied by ``lr_factor`` (and
the patience counter restarts); after ``stop_patience`` epochs without
improvement training stops.  Both counters are derived purely from the loss
history, so the function has no hidden state.

Shuffling draws from a counter-based generator keyed by ``(seed, epoch)``:
batch order for any epoch is reproducible without replaying earlier epochs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, OptimError, ShapeError
from .model import ModelGraph, save_checkpoint
from .tensor import Tensor, backward, bce_loss, zero_grad


@dataclass
class TrainConfig:
    batch_size: int = 60
    epochs: int = 100
    lr0: float = 1e-3
    plateau_patience: int = 4
    stop_patience: int = 20
    lr_factor: float = 0.1
    improve_tol: float = 1e-4
    seed: int = 0


def validate_train_config(cfg: TrainConfig) -> None:
    if cfg.batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {cfg.batch_size}")
    if cfg.epochs < 1:
        raise ConfigError(f"epochs must be positive, got {cfg.epochs}")
    if cfg.lr0 <= 0:
        raise ConfigError(f"lr0 must be positive, got {cfg.lr0}")
    if not 0.0 < cfg.lr_factor < 1.0:
        raise ConfigError(
            f"lr_factor must be in (0, 1), got {cfg.lr_factor}")
    if cfg.plateau_patience < 1 or cfg.stop_patience < 1:
        raise ConfigError("patience values must be positive")
    if cfg.plateau_patience >= cfg.stop_patience:
        raise ConfigError(
            f"plateau_patience {cfg.plateau_patience} must be smaller than "
            f"stop_patience {cfg.stop_patience}")
    if cfg.improve_tol < 0:
        raise ConfigError(
            f"improve_tol must be non-negative, got {cfg.improve_tol}")


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, params: dict, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(params: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update over every parameter in ``params``.

    A non-finite gradient aborts with an error naming the parameter; the
    training loop treats that as fatal rather than silently skipping.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise OptimError(f"non-finite gradient for parameter {name} "
                             f"at step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def schedule_update(history, current_lr: float, plateau_patience: int = 4,
                    stop_patience: int = 20, lr_factor: float = 0.1,
                    improve_tol: float = 1e-4) -> tuple[float, bool]:
    """Plateau schedule decision after the latest epoch.

    ``history`` holds one monitored validation loss per finished epoch,
    oldest first.  Returns ``(new_lr, stop)`` where ``new_lr`` already
    includes the reduction if the latest epoch completed a full patience
    window, and ``stop`` is True once ``stop_patience`` epochs have passed
    without a significant improvement.
    """
    if not len(history):
        return current_lr, False
    best = math.inf
    wait = 0
    last_improve = 0
    reduced_now = False
    for i, value in enumerate(history):
        reduced_now = False
        if value < best - improve_tol:
            best = value
            wait = 0
            last_improve = i
        else:
            wait += 1
            if wait >= plateau_patience:
                wait = 0
                reduced_now = True
    new_lr = current_lr * lr_factor if reduced_now else current_lr
    stop = (len(history) - 1 - last_improve) >= stop_patience
    return new_lr, stop


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int
    best_val_loss: float
    history: list
    stopped_early: bool


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "lr", "train_loss", "val_loss", "val_acc"])
        for row in history:
            writer.writerow([row.epoch, repr(row.lr), repr(row.train_loss),
                             repr(row.val_loss), repr(row.val_acc)])


def _check_pair(name: str, x: np.ndarray, y: np.ndarray) -> None:
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"{name} images must be [M, 1, S, S], "
                         f"got {x.shape}")
    if y.shape != x.shape:
        raise ShapeError(f"{name} labels {y.shape} do not match images "
                         f"{x.shape}")


def evaluate_batches(graph: ModelGraph, x: np.ndarray, y: np.ndarray,
                     batch_size: int) -> tuple[float, float]:
    """Mean binary cross-entropy and pixel accuracy over ``x`` in
    inference mode."""
    total_loss = 0.0
    correct = 0
    m = x.shape[0]
    for start in range(0, m, batch_size):
        xb = x[start:start + batch_size]
        yb = y[start:start + batch_size]
        out = graph.forward(xb, mode="infer")
        loss = bce_loss(out, Tensor(yb, dtype=out.dtype))
        total_loss += float(loss.data) * xb.shape[0]
        correct += int(((out.data >= 0.5) == (yb >= 0.5)).sum())
    return total_loss / m, correct / y.size


def epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    """Deterministic shuffle for one epoch, independent of all others."""
    gen = np.random.Generator(np.random.Philox(key=(seed, epoch)))
    return gen.permutation(count)


def train(graph: ModelGraph, train_xy, val_xy, cfg: TrainConfig,
          checkpoint_path=None, history_path=None, log=None) -> TrainResult:
    """Fit ``graph`` and keep the lowest-validation-loss snapshot.

    ``train_xy``/``val_xy`` are ``(images, labels)`` pairs of float arrays
    shaped [M, 1, S, S] with labels in {0, 1}.  When ``checkpoint_path`` is
    given the best state is written there on completion; a KeyboardInterrupt
    instead persists the *current* state together with the Adam moments
    (keys ``adam.m.<param>``, ``adam.v.<param>``, ``adam.step``) before
    propagating.
    """
    validate_train_config(cfg)
    x_tr = np.ascontiguousarray(train_xy[0], dtype=graph.dtype)
    y_tr = np.ascontiguousarray(train_xy[1], dtype=graph.dtype)
    x_val = np.ascontiguousarray(val_xy[0], dtype=graph.dtype)
    y_val = np.ascontiguousarray(val_xy[1], dtype=graph.dtype)
    _check_pair("train", x_tr, y_tr)
    _check_pair("val", x_val, y_val)

    params = graph.parameters()
    state = AdamState(params)
    lr = cfg.lr0
    best_val = math.inf
    best_state = None
    best_epoch = -1
    history: list[EpochStats] = []
    val_losses: list[float] = []
    stopped_early = False
    m = x_tr.shape[0]

    try:
        for epoch in range(cfg.epochs):
            order = epoch_order(cfg.seed, epoch, m)
            loss_sum = 0.0
            for start in range(0, m, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                out = graph.forward(x_tr[idx], mode="train")
                loss = bce_loss(out, Tensor(y_tr[idx], dtype=out.dtype))
                backward(loss)
                adam_step(params, state, lr)
                zero_grad(params.values())
                loss_sum += float(loss.data) * idx.size
            train_loss = loss_sum / m
            val_loss, val_acc = evaluate_batches(graph, x_val, y_val,
                                                 cfg.batch_size)
            history.append(EpochStats(epoch, lr, train_loss, val_loss,
                                      val_acc))
            val_losses.append(val_loss)
            if val_loss < best_val:
                best_val = val_loss
                best_state = graph.state_arrays()
                best_epoch = epoch
            if log is not None:
                log(f"epoch {epoch}: lr={lr:.2e} train={train_loss:.4f} "
                    f"val={val_loss:.4f} acc={val_acc:.4f}")
            lr, stop = schedule_update(
                val_losses, lr, cfg.plateau_patience, cfg.stop_patience,
                cfg.lr_factor, cfg.improve_tol)
            if stop:
                stopped_early = True
                break
    except KeyboardInterrupt:
        if checkpoint_path is not None:
            arrays = graph.state_arrays()
            for name in state.m:
                arrays[f"adam.m.{name}"] = state.m[name].copy()
                arrays[f"adam.v.{name}"] = state.v[name].copy()
            arrays["adam.step"] = np.asarray(float(state.step),
                                             dtype=np.float32)
            save_checkpoint(checkpoint_path, arrays)
        if history_path is not None:
            write_history_csv(history_path, history)
        raise

    if best_state is None:
        best_state = graph.state_arrays()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, best_state)
    if history_path is not None:
        write_history_csv(history_path, history)
    return TrainResult(best_state, best_epoch, best_val, history,
                       stopped_early)
