import csv
import math

import numpy as np
import pytest

from vesseg.errors import ConfigError, OptimError
from vesseg.model import ModelConfig, build, load_checkpoint
from vesseg.optim import (AdamState, TrainConfig, adam_step, epoch_order,
                          schedule_update, train, validate_train_config,
                          write_history_csv)
from vesseg.tensor import Parameter


def make_param(name, values, dtype=np.float64):
    return Parameter(name, np.asarray(values, dtype=dtype))


class TestAdam:
    def test_first_step_hand_value(self):
        # m = 0.1*g, v = 0.001*g^2; both bias-correct back to g and g^2,
        # so the first update is lr * g / (|g| + eps).
        p = make_param("p", [1.0])
        p.grad = np.array([1.0])
        state = AdamState({"p": p})
        adam_step({"p": p}, state, lr=0.1)
        expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8)
        assert abs(p.data[0] - expected) < 1e-15
        assert abs(p.data[0] - 0.9) < 1e-8
        assert state.step == 1

    def test_two_steps_match_reference_formulas(self):
        p = make_param("p", [0.5, -0.25])
        state = AdamState({"p": p})
        grads = [np.array([1.0, -2.0]), np.array([0.25, 0.5])]
        # Reference trace with plain Python floats.
        ref = [0.5, -0.25]
        m = [0.0, 0.0]
        v = [0.0, 0.0]
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        for t, g in enumerate(grads, start=1):
            p.grad = g.copy()
            adam_step({"p": p}, state, lr)
            for j in range(2):
                m[j] = b1 * m[j] + (1 - b1) * g[j]
                v[j] = b2 * v[j] + (1 - b2) * g[j] ** 2
                mhat = m[j] / (1 - b1 ** t)
                vhat = v[j] / (1 - b2 ** t)
                ref[j] -= lr * mhat / (math.sqrt(vhat) + eps)
        assert np.allclose(p.data, ref, rtol=0, atol=1e-12)

    def test_missing_grad_means_no_update(self):
        p = make_param("p", [2.0])
        q = make_param("q", [3.0])
        q.grad = np.array([1.0])
        params = {"p": p, "q": q}
        state = AdamState(params)
        adam_step(params, state, lr=0.1)
        assert p.data[0] == 2.0
        assert q.data[0] != 3.0

    def test_nonfinite_gradient_names_parameter(self):
        p = make_param("enc0.c1.w", [1.0])
        p.grad = np.array([np.nan])
        state = AdamState({"enc0.c1.w": p})
        with pytest.raises(OptimError) as err:
            adam_step({"enc0.c1.w": p}, state, lr=0.1)
        assert "enc0.c1.w" in str(err.value)

    def test_moments_shrink_step_for_noisy_direction(self):
        # Alternating gradients nearly cancel in m but accumulate in v,
        # so the effective step shrinks well below lr.
        p = make_param("p", [0.0])
        state = AdamState({"p": p})
        lr = 0.01
        for t in range(40):
            p.grad = np.array([1.0 if t % 2 == 0 else -1.0])
            before = p.data[0]
            adam_step({"p": p}, state, lr)
            if t > 10:
                assert abs(p.data[0] - before) < 0.2 * lr


class TestSchedule:
    def test_empty_history_is_a_no_op(self):
        assert schedule_update([], 1e-3) == (1e-3, False)

    def test_single_improvement_keeps_lr(self):
        lr, stop = schedule_update([0.5], 1e-3)
        assert lr == 1e-3 and not stop

    def test_five_flat_epochs_reduce_once(self):
        lr, stop = schedule_update([1.0] * 5, 1e-3)
        assert abs(lr - 1e-4) < 1e-18
        assert not stop

    def test_reduction_fires_only_on_the_window_boundary(self):
        # One flat epoch short of the window: no change yet.
        lr, stop = schedule_update([1.0] * 4, 1e-3)
        assert lr == 1e-3 and not stop
        # One epoch past the window: the reduction happened last epoch,
        # so this call leaves lr alone again.
        lr, stop = schedule_update([1.0] * 6, 1e-3)
        assert lr == 1e-3 and not stop

    def test_improvement_resets_the_window(self):
        history = [1.0, 0.9, 1.0, 1.0, 1.0]
        lr, stop = schedule_update(history, 1e-3)
        assert lr == 1e-3 and not stop
        lr, stop = schedule_update(history + [1.0], 1e-3)
        assert abs(lr - 1e-4) < 1e-18 and not stop

    def test_tiny_improvement_does_not_reset(self):
        # 5e-5 is below improve_tol=1e-4, so it counts as flat.
        history = [1.0, 1.0, 1.0, 1.0 - 5e-5, 1.0 - 6e-5]
        lr, stop = schedule_update(history, 1e-2)
        assert abs(lr - 1e-3) < 1e-17

    def test_stops_after_twenty_one_flat_epochs(self):
        lr, stop = schedule_update([1.0] * 20, 1e-3)
        assert not stop
        lr, stop = schedule_update([1.0] * 21, 1e-3)
        assert stop

    def test_stop_counts_from_last_improvement(self):
        # 19 stale epochs after the improvement at index 10: keep going.
        history = [1.0] * 10 + [0.5] + [0.6] * 19
        lr, stop = schedule_update(history, 1e-3)
        assert not stop
        # The 20th stale epoch triggers the stop.
        lr, stop = schedule_update(history + [0.6], 1e-3)
        assert stop

    def test_defaults_are_four_and_twenty(self):
        cfg = TrainConfig()
        assert cfg.plateau_patience == 4
        assert cfg.stop_patience == 20
        assert cfg.batch_size == 60
        assert cfg.epochs == 100
        assert cfg.lr0 == 1e-3

    def test_config_validation(self):
        validate_train_config(TrainConfig())
        with pytest.raises(ConfigError):
            validate_train_config(TrainConfig(batch_size=0))
        with pytest.raises(ConfigError):
            validate_train_config(TrainConfig(lr_factor=1.0))
        with pytest.raises(ConfigError):
            validate_train_config(TrainConfig(plateau_patience=20,
                                              stop_patience=20))
        with pytest.raises(ConfigError):
            validate_train_config(TrainConfig(lr0=0.0))


class TestEpochOrder:
    def test_is_a_permutation(self):
        for epoch in range(5):
            order = epoch_order(3, epoch, 17)
            assert sorted(order.tolist()) == list(range(17))

    def test_same_inputs_same_order(self):
        a = epoch_order(9, 4, 50)
        b = epoch_order(9, 4, 50)
        assert np.array_equal(a, b)

    def test_different_epochs_differ(self):
        a = epoch_order(9, 0, 50)
        b = epoch_order(9, 1, 50)
        assert not np.array_equal(a, b)

    def test_different_seeds_differ(self):
        a = epoch_order(0, 0, 50)
        b = epoch_order(1, 0, 50)
        assert not np.array_equal(a, b)


def tiny_problem(seed=0, n=12, size=8):
    """A few blob-vs-blank patches a small net can memorize."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 0.35, (n, 1, size, size)).astype(np.float32)
    y = np.zeros((n, 1, size, size), dtype=np.float32)
    for i in range(n):
        r = rng.integers(1, size - 3)
        c = rng.integers(1, size - 3)
        x[i, 0, r:r + 3, c:c + 3] += 0.55
        y[i, 0, r:r + 3, c:c + 3] = 1.0
    return x, y


class TestTrainLoop:
    def test_loss_drops_on_a_memorizable_set(self):
        x, y = tiny_problem(seed=1)
        graph = build(ModelConfig(depth=2, base_filters=4, input_size=8),
                      seed=0)
        cfg = TrainConfig(batch_size=6, epochs=25, lr0=3e-3, seed=0)
        result = train(graph, (x, y), (x, y), cfg)
        first = result.history[0].train_loss
        last = result.history[-1].train_loss
        assert last < 0.6 * first
        assert result.best_epoch >= 0
        assert result.best_val_loss <= min(h.val_loss
                                           for h in result.history)

    def test_best_state_tracks_lowest_val_loss(self):
        x, y = tiny_problem(seed=2, n=8)
        graph = build(ModelConfig(depth=2, base_filters=4, input_size=8),
                      seed=1)
        cfg = TrainConfig(batch_size=4, epochs=10, lr0=2e-3, seed=1)
        result = train(graph, (x, y), (x, y), cfg)
        losses = [h.val_loss for h in result.history]
        assert result.best_epoch == int(np.argmin(losses))
        assert result.best_val_loss == min(losses)

    def test_writes_checkpoint_and_history(self, tmp_path):
        x, y = tiny_problem(seed=3, n=6)
        graph = build(ModelConfig(depth=2, base_filters=4, input_size=8),
                      seed=2)
        cfg = TrainConfig(batch_size=6, epochs=3, lr0=1e-3, seed=2)
        ckpt = tmp_path / "model.ckpt"
        hist = tmp_path / "history.csv"
        result = train(graph, (x, y), (x, y), cfg, checkpoint_path=ckpt,
                       history_path=hist)
        arrays = load_checkpoint(ckpt)
        for name, ref in result.best_state.items():
            assert np.array_equal(arrays[name], ref)
        with open(hist, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["epoch", "lr", "train_loss", "val_loss",
                           "val_acc"]
        assert len(rows) == 1 + len(result.history)
        # Values round-trip through repr.
        assert float(rows[1][3]) == result.history[0].val_loss

    def test_interrupt_persists_resume_state(self, tmp_path):
        x, y = tiny_problem(seed=4, n=6)
        graph = build(ModelConfig(depth=2, base_filters=4, input_size=8),
                      seed=3)
        cfg = TrainConfig(batch_size=6, epochs=50, lr0=1e-3, seed=3)
        ckpt = tmp_path / "interrupted.ckpt"
        hist = tmp_path / "interrupted.csv"
        calls = []

        def log(line):
            calls.append(line)
            if len(calls) == 2:
                raise KeyboardInterrupt

        with pytest.raises(KeyboardInterrupt):
            train(graph, (x, y), (x, y), cfg, checkpoint_path=ckpt,
                  history_path=hist, log=log)
        arrays = load_checkpoint(ckpt)
        assert "adam.step" in arrays
        assert float(arrays["adam.step"]) == 2.0
        for name in graph.parameters():
            assert name in arrays
            assert f"adam.m.{name}" in arrays
            assert f"adam.v.{name}" in arrays
        with open(hist, newline="") as f:
            rows = list(csv.reader(f))
        assert len(rows) == 3  # header + two finished epochs

    def test_determinism_same_seed_same_history(self):
        x, y = tiny_problem(seed=5, n=6)
        runs = []
        for _ in range(2):
            graph = build(ModelConfig(depth=2, base_filters=4,
                                      input_size=8), seed=4)
            cfg = TrainConfig(batch_size=4, epochs=4, lr0=1e-3, seed=4)
            runs.append(train(graph, (x, y), (x, y), cfg))
        a, b = runs
        for ha, hb in zip(a.history, b.history):
            assert ha.train_loss == hb.train_loss
            assert ha.val_loss == hb.val_loss
        for name in a.best_state:
            assert np.array_equal(a.best_state[name], b.best_state[name])

    def test_history_csv_roundtrip(self, tmp_path):
        from vesseg.optim import EpochStats
        rows = [EpochStats(0, 1e-3, 0.71234567891234, 0.65, 0.5),
                EpochStats(1, 1e-4, 0.5, 0.600000000001, 0.75)]
        path = tmp_path / "h.csv"
        write_history_csv(path, rows)
        with open(path, newline="") as f:
            got = list(csv.DictReader(f))
        assert float(got[0]["train_loss"]) == rows[0].train_loss
        assert float(got[1]["val_loss"]) == rows[1].val_loss
        assert int(got[1]["epoch"]) == 1
