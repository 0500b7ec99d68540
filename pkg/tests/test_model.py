"""Model tests: initialization math, the canonical parameter count and shape
chain, Adam behaviour, the training loop contracts, and checkpoint I/O."""

import struct

import numpy as np
import pytest

from specxplain.model import (
    AdamState,
    CheckpointError,
    TrainConfig,
    adam_step,
    build_cnn,
    evaluate,
    fit,
    glorot_limits,
    history_to_csv,
    load_checkpoint,
    save_checkpoint,
)
from specxplain.tensor import Rng, Tensor, no_grad, sparse_cross_entropy


def tiny_model(seed=0, h=16, w=20, dropout=0.2):
    cfg = TrainConfig(seed=seed, dropout_rate=dropout)
    return build_cnn(cfg, Rng(seed), input_height=h, input_width=w)


def separable_set(n, h=16, w=20, seed=0):
    """Label 1 iff mean pixel > 0.5; linearly separable by construction."""
    rng = Rng(seed)
    x = np.empty((n, h, w, 3))
    y = np.empty(n, dtype=np.int64)
    for i in range(n):
        base = 0.3 if i % 2 == 0 else 0.7
        x[i] = np.clip(base + 0.05 * rng.normal((h, w, 3)), 0, 1)
        y[i] = int(x[i].mean() > 0.5)
    return x, y


class TestGlorot:
    def test_four_by_five_fans(self):
        lim = glorot_limits(4, 5)
        assert 0.816 <= lim <= 0.817  # draws then span roughly -0.82..+0.82

    def test_balanced_fans(self):
        assert glorot_limits(3, 3) == 1.0

    def test_zero_fans_rejected(self):
        with pytest.raises(ValueError):
            glorot_limits(0, 0)

    def test_draws_bounded_and_centred(self):
        lim = glorot_limits(100, 100)
        assert lim == pytest.approx(0.17320508, abs=1e-6)
        draws = Rng(3).uniform(-lim, lim, 10_000)
        assert np.all(np.abs(draws) < 0.1733)
        sigma_mean = lim / np.sqrt(3 * draws.size)
        assert abs(draws.mean()) < 3 * sigma_mean


class TestBuildCnn:
    def test_canonical_parameter_count(self):
        model = build_cnn(TrainConfig(), Rng(0))
        counts = [p.size for p in model.parameters()]
        per_layer = [counts[0] + counts[1], counts[2] + counts[3],
                     counts[4] + counts[5], counts[6] + counts[7],
                     counts[8] + counts[9]]
        assert per_layer == [448, 4_640, 18_496, 6_684_736, 130]
        assert model.parameter_count() == 6_708_450

    def test_hidden_dense_width(self):
        model = build_cnn(TrainConfig(), Rng(0))
        assert model.dense_params[0][0].shape == (64, 104_448)
        assert model.dense_params[1][0].shape == (2, 64)

    def test_same_seed_same_parameters(self):
        a = build_cnn(TrainConfig(), Rng(7), input_height=16, input_width=20)
        b = build_cnn(TrainConfig(), Rng(7), input_height=16, input_width=20)
        for pa, pb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_biases_start_at_zero(self):
        model = tiny_model()
        for _, bias in model.conv_params + model.dense_params:
            np.testing.assert_array_equal(bias.data, 0.0)


class TestForward:
    def test_probabilities_normalized(self):
        model = tiny_model()
        res = model.forward(Rng(1).uniform(0, 1, (16, 20, 3)))
        assert abs(res.probs.data.sum() - 1.0) < 1e-9

    def test_inference_is_pure(self):
        model = tiny_model()
        x = Rng(2).uniform(0, 1, (16, 20, 3))
        a = model.forward(x).probs.data
        b = model.forward(x).probs.data
        np.testing.assert_array_equal(a, b)

    def test_full_geometry_shape_chain(self):
        model = build_cnn(TrainConfig(), Rng(0))
        with no_grad():
            res = model.forward(np.zeros((128, 820, 3)))
        assert [t.shape for t in res.conv_pooled] == [(64, 410, 16), (32, 205, 32), (16, 102, 64)]
        assert res.last_conv_prepool.shape == (32, 205, 64)
        assert model.flat_features == 104_448
        assert res.logits.shape == (2,)

    def test_wrong_shape_rejected(self):
        with pytest.raises(ValueError, match="expected input"):
            tiny_model().forward(np.zeros((8, 8, 3)))

    def test_batched_matches_single(self):
        model = tiny_model()
        x = Rng(3).uniform(0, 1, (3, 16, 20, 3))
        batch = model.forward(x).probs.data
        for i in range(3):
            np.testing.assert_allclose(batch[i], model.forward(x[i]).probs.data, atol=1e-12)

    def test_training_mode_needs_rng(self):
        with pytest.raises(ValueError, match="rng"):
            tiny_model().forward(np.zeros((16, 20, 3)), training=True)


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        p = Tensor(np.array([1.0, -2.0]), True)
        state = AdamState([p])
        adam_step(state, [p], [np.zeros(2)])
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_magnitude_is_learning_rate(self):
        p = Tensor(np.array(5.0), True)
        state = AdamState([p], learning_rate=0.001)
        adam_step(state, [p], [np.array(0.37)])
        # bias-corrected first step: eta * g / (|g| + eps) ~= eta
        assert p.data == pytest.approx(5.0 - 0.001, abs=1e-6)

    def test_quadratic_convergence(self):
        p = Tensor(np.array(1.0), True)
        state = AdamState([p], learning_rate=0.01)
        for _ in range(500):
            adam_step(state, [p], [2.0 * p.data])
        assert abs(float(p.data)) < 0.01

    def test_shape_mismatch_rejected(self):
        p = Tensor(np.zeros(3), True)
        with pytest.raises(ValueError):
            adam_step(AdamState([p]), [p], [np.zeros(4)])


class TestFit:
    def test_learns_separable_set_quickly(self):
        model = tiny_model(seed=1)
        cfg = TrainConfig(epochs=5, batch_size=8, learning_rate=0.002, seed=1)
        train = separable_set(40, seed=5)
        history = fit(model, train, train, cfg)
        assert max(row["train_acc"] for row in history) == 1.0
        assert len(history) <= 5

    def test_history_never_exceeds_epoch_budget(self):
        model = tiny_model(seed=2)
        cfg = TrainConfig(epochs=20, batch_size=16, seed=2)
        data = separable_set(12, seed=2)
        history = fit(model, data, data, cfg)
        assert len(history) <= 20

    def test_frozen_validation_stops_after_patience(self):
        """A validation set with contradictory labels pins accuracy at 0.5."""
        model = tiny_model(seed=3)
        x, _ = separable_set(4, seed=3)
        val_x = np.concatenate([x, x])
        val_y = np.array([0] * 4 + [1] * 4)
        cfg = TrainConfig(epochs=20, batch_size=4, early_stop_patience=5, seed=3)
        history = fit(model, separable_set(8, seed=4), (val_x, val_y), cfg)
        assert len(history) == 6  # first epoch sets the best, then 5 stagnant
        assert all(row["val_acc"] == 0.5 for row in history)

    def test_best_weights_restored(self):
        model = tiny_model(seed=4)
        cfg = TrainConfig(epochs=6, batch_size=8, learning_rate=0.002, seed=4)
        train = separable_set(24, seed=6)
        val = separable_set(16, seed=7)
        history = fit(model, train, val, cfg)
        final = evaluate(model, val)
        assert final["accuracy"] == pytest.approx(max(r["val_acc"] for r in history))

    def test_deterministic_under_seed(self):
        cfg = TrainConfig(epochs=3, batch_size=8, early_stop_patience=3, seed=11)
        data = separable_set(16, seed=8)
        h1 = fit(tiny_model(seed=9), data, data, cfg)
        h2 = fit(tiny_model(seed=9), data, data, cfg)
        assert h1 == h2

    def test_jobs_do_not_change_results(self):
        cfg = TrainConfig(epochs=2, batch_size=8, early_stop_patience=2, seed=12)
        data = separable_set(16, seed=9)
        h1 = fit(tiny_model(seed=10), data, data, cfg, jobs=1, chunk_size=4)
        h2 = fit(tiny_model(seed=10), data, data, cfg, jobs=3, chunk_size=4)
        assert h1 == h2

    def test_single_optimizer_step_decreases_sample_loss(self):
        model = tiny_model(seed=5, dropout=0.0)
        params = model.parameters()
        rng = Rng(20)
        for trial in range(20):
            x = rng.uniform(0, 1, (16, 20, 3))
            label = trial % 2
            snapshot = [p.data.copy() for p in params]
            result = model.forward(x, training=True, rng=Rng(trial))
            loss = sparse_cross_entropy(result.probs, label)
            store = loss.backward(write_grad=False)
            grads = [store.get(p) if store.get(p) is not None else np.zeros_like(p.data)
                     for p in params]
            adam_step(AdamState(params, learning_rate=1e-4), params, grads)
            with no_grad():
                after = sparse_cross_entropy(model.forward(x).probs, label).item()
            assert after < loss.item()
            for p, snap in zip(params, snapshot):
                p.data[...] = snap

    def test_empty_dataset_rejected(self):
        model = tiny_model()
        with pytest.raises(ValueError):
            fit(model, (np.zeros((0, 16, 20, 3)), np.zeros(0, dtype=int)),
                (np.zeros((0, 16, 20, 3)), np.zeros(0, dtype=int)), TrainConfig())

    def test_csv_round_trip(self, tmp_path):
        history = [{"epoch": 1, "train_loss": 0.5, "train_acc": 0.75,
                    "val_loss": 0.6, "val_acc": 0.7}]
        path = tmp_path / "history.csv"
        history_to_csv(history, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "epoch,train_loss,train_acc,val_loss,val_acc"
        assert lines[1].startswith("1,0.5,")


class TestEvaluate:
    def test_self_consistent_predictions_score_one(self):
        model = tiny_model(seed=6)
        x = Rng(30).uniform(0, 1, (10, 16, 20, 3))
        with no_grad():
            y = model.forward(x).probs.data.argmax(axis=1)
        assert evaluate(model, (x, y))["accuracy"] == 1.0

    def test_untrained_model_near_chance(self):
        model = tiny_model(seed=7)
        x = Rng(31).uniform(0, 1, (400, 16, 20, 3))
        y = np.array([0, 1] * 200)
        acc = evaluate(model, (x, y))["accuracy"]
        assert abs(acc - 0.5) <= 0.1

    def test_confusion_sums_to_dataset_size(self):
        model = tiny_model(seed=8)
        x = Rng(32).uniform(0, 1, (25, 16, 20, 3))
        y = np.array([0, 1] * 12 + [0])
        result = evaluate(model, (x, y))
        assert result["confusion"].sum() == 25

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            evaluate(tiny_model(), (np.zeros((0, 16, 20, 3)), np.zeros(0, dtype=int)))


class TestGradientCheck:
    def test_full_model_matches_finite_differences(self):
        """Spot-check ~15 random entries of every parameter tensor (h=1e-5)."""
        model = tiny_model(seed=9, dropout=0.0)
        x = Rng(40).uniform(0, 1, (16, 20, 3))
        label = 1

        loss = sparse_cross_entropy(model.forward(x).probs, label)
        store = loss.backward(write_grad=False)

        check_rng = np.random.default_rng(0)
        h = 1e-5
        for p in model.parameters():
            grad = store.get(p)
            flat = p.data.reshape(-1)
            gflat = grad.reshape(-1)
            for idx in check_rng.choice(flat.size, size=min(15, flat.size), replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                with no_grad():
                    up = sparse_cross_entropy(model.forward(x).probs, label).item()
                flat[idx] = orig - h
                with no_grad():
                    down = sparse_cross_entropy(model.forward(x).probs, label).item()
                flat[idx] = orig
                fd = (up - down) / (2 * h)
                denom = max(abs(gflat[idx]), abs(fd), 1e-6)
                assert abs(gflat[idx] - fd) / denom < 1e-3


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model = tiny_model(seed=10)
        path = tmp_path / "model.cnnx"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        x = Rng(50).uniform(0, 1, (16, 20, 3))
        with no_grad():
            np.testing.assert_array_equal(model.forward(x).probs.data,
                                          loaded.forward(x).probs.data)
        for p, q in zip(model.parameters(), loaded.parameters()):
            np.testing.assert_array_equal(p.data, q.data)

    def test_truncated_file_rejected(self, tmp_path):
        model = tiny_model(seed=11)
        path = tmp_path / "model.cnnx"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 100])
        with pytest.raises(CheckpointError, match="corrupt"):
            load_checkpoint(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.cnnx"
        path.write_bytes(b"NOPE" + b"\x00" * 100)
        with pytest.raises(CheckpointError, match="not a CNNX"):
            load_checkpoint(path)

    def test_wrong_version_rejected(self, tmp_path):
        model = tiny_model(seed=12)
        path = tmp_path / "model.cnnx"
        save_checkpoint(model, path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_canonical_checkpoint_stores_every_parameter(self, tmp_path):
        model = build_cnn(TrainConfig(), Rng(0))
        path = tmp_path / "full.cnnx"
        save_checkpoint(model, path)
        desc_len = struct.unpack("<II", path.read_bytes()[4:12])[1]
        payload = path.stat().st_size - 12 - desc_len
        assert payload == 6_708_450 * 8
