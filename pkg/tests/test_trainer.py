import math

import numpy as np
import pytest

from phaseseg import mstcnpp, synthgen
from phaseseg.losses import FocalConfig, total_loss
from phaseseg.trainer import (
    AdamWState,
    DivergenceError,
    TrainConfig,
    adamw_step,
    cosine_lr,
    evaluate,
    fit,
    load_checkpoint,
    sample_epoch,
    save_checkpoint,
    sequence_weights,
)

TINY = mstcnpp.StageConfig(in_dim=8, channels=8, n_classes=4, stages=2,
                           layers_prediction=3, layers_refinement=3)


def make_split(n, sequence_seed, dim=8, noise=0.3):
    cfg = synthgen.SynthConfig(dim=dim, noise_sigma=noise, seed=0)
    return [(f.data, t.labels)
            for f, t in synthgen.generate(cfg, n, sequence_seed=sequence_seed)]


class TestAdamW:
    def test_zero_grad_no_decay_is_noop(self, rng):
        p = rng.normal(size=(3, 4))
        params = {"w": p.copy()}
        adamw_step(params, {"w": np.zeros((3, 4))}, AdamWState(), lr=0.1)
        np.testing.assert_array_equal(params["w"], p)

    def test_first_step_moves_by_lr_sign(self, rng):
        g = rng.normal(size=(5,))
        p = rng.normal(size=(5,))
        params = {"w": p.copy()}
        adamw_step(params, {"w": g}, AdamWState(), lr=1e-3)
        # bias-corrected first step: delta = -lr * g / (|g| + ~eps)
        np.testing.assert_allclose(params["w"] - p, -1e-3 * np.sign(g), rtol=1e-4)

    def test_weight_decay_shrinks_params(self, rng):
        p = rng.normal(size=(4,))
        params = {"w": p.copy()}
        adamw_step(params, {"w": np.zeros(4)}, AdamWState(), lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(params["w"], p * (1 - 0.1 * 0.5), rtol=1e-12)

    def test_nonfinite_gradient_names_block(self, rng):
        params = {"stage1/head_w": rng.normal(size=(2, 2))}
        grads = {"stage1/head_w": np.array([[np.nan, 0.0], [0.0, 0.0]])}
        with pytest.raises(DivergenceError, match="stage1/head_w"):
            adamw_step(params, grads, AdamWState(), lr=0.1)

    def test_two_steps_accumulate_moments(self, rng):
        # closed-form two-step trace for a single scalar parameter
        g1, g2 = 0.4, -0.2
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        params = {"w": np.array([1.0])}
        state = AdamWState()
        adamw_step(params, {"w": np.array([g1])}, state, lr=lr)
        adamw_step(params, {"w": np.array([g2])}, state, lr=lr)

        m = (1 - b1) * g1
        v = (1 - b2) * g1**2
        w = 1.0 - lr * (m / (1 - b1)) / (math.sqrt(v / (1 - b2)) + eps)
        m = b1 * m + (1 - b1) * g2
        v = b2 * v + (1 - b2) * g2**2
        w = w - lr * (m / (1 - b1**2)) / (math.sqrt(v / (1 - b2**2)) + eps)
        np.testing.assert_allclose(params["w"], [w], rtol=1e-12)


class TestCosine:
    def test_start_is_base(self):
        assert cosine_lr(0, 10, 3e-4) == 3e-4

    def test_end_is_zero(self):
        assert abs(cosine_lr(10, 10, 3e-4)) < 1e-19

    def test_midpoint_is_half(self):
        assert abs(cosine_lr(5, 10, 3e-4) - 1.5e-4) < 1e-19

    def test_beyond_total_floors_at_zero(self):
        assert cosine_lr(15, 10, 3e-4) == 0.0

    def test_monotone_decreasing(self):
        values = [cosine_lr(s, 20, 1.0) for s in range(21)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestSampling:
    def test_uniform_reproducible(self):
        data = make_split(5, sequence_seed=1)
        assert sample_epoch(data, "uniform", seed=9) == sample_epoch(data, "uniform", seed=9)
        assert sorted(sample_epoch(data, "uniform", seed=9)) == list(range(5))

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            sample_epoch([], "uniform", seed=0)

    def test_single_sequence_repeats(self):
        data = make_split(1, sequence_seed=1)
        assert sample_epoch(data, "class-balanced", seed=3, n_classes=4) == [0]

    def test_balanced_favors_minority_heavy_sequence(self):
        # A is 90% majority class; B carries the rare class
        a_labels = np.array([0] * 90 + [1] * 10)
        b_labels = np.array([0] * 30 + [1] * 70)
        data = [(np.zeros((100, 4)), a_labels), (np.zeros((100, 4)), b_labels)]
        probs = sequence_weights(data, 2)
        assert probs[1] > probs[0]

        counts = np.zeros(2)
        for chunk in range(100):
            for idx in sample_epoch(data, "class-balanced", seed=chunk, n_classes=2):
                counts[idx] += 1
        assert counts.sum() == 10_000 // 50  # 2 draws per epoch, 100 epochs
        # Monte-Carlo against the computed weights
        for chunk in range(4900):
            for idx in sample_epoch(data, "class-balanced", seed=1000 + chunk, n_classes=2):
                counts[idx] += 1
        total = counts.sum()
        assert counts[1] > counts[0]
        assert abs(counts[1] / total - probs[1]) < 0.02


class TestFit:
    def test_rising_validation_stops_at_epoch_two(self, rng):
        # val labels contradict train labels, so val loss rises as train fits
        x = np.tile(rng.normal(size=(1, 6)), (30, 1))
        train = [(x.copy(), np.zeros(30, dtype=np.int64))]
        val = [(x.copy(), np.ones(30, dtype=np.int64))]
        mcfg = mstcnpp.StageConfig(in_dim=6, channels=6, n_classes=3, stages=1,
                                   layers_prediction=2, layers_refinement=1)
        model = mstcnpp.init(mcfg, seed=0)
        cfg = TrainConfig(epochs=10, learning_rate=5e-3, patience=1, seed=0,
                          weight_decay=0.0)
        _, report = fit(model, train, val, cfg)
        assert report.stop_epoch == 2
        assert report.epochs[1].val_loss > report.epochs[0].val_loss

    def test_reaches_high_accuracy_on_separable_data(self):
        train = make_split(6, sequence_seed=100, dim=16)
        val = make_split(2, sequence_seed=101, dim=16)
        mcfg = mstcnpp.StageConfig(in_dim=16, channels=16, n_classes=4, stages=2,
                                   layers_prediction=4, layers_refinement=4)
        model = mstcnpp.init(mcfg, seed=0)
        cfg = TrainConfig(epochs=10, learning_rate=3e-3, patience=10, seed=0)
        _, report = fit(model, train, val, cfg)
        assert max(e.val_accuracy for e in report.epochs) >= 0.95

    def test_fixed_seed_reproduces_report_and_params(self):
        train = make_split(3, sequence_seed=100)
        val = make_split(1, sequence_seed=101)
        cfg = TrainConfig(epochs=3, learning_rate=1e-3, seed=4)
        m1, r1 = fit(mstcnpp.init(TINY, seed=4), train, val, cfg)
        m2, r2 = fit(mstcnpp.init(TINY, seed=4), train, val, cfg)
        assert r1.as_dict() == r2.as_dict()
        for (_, p1), (_, p2) in zip(mstcnpp.named_parameters(m1),
                                    mstcnpp.named_parameters(m2)):
            assert np.array_equal(p1, p2)

    def test_best_checkpoint_has_minimum_val_loss(self):
        train = make_split(3, sequence_seed=100)
        val = make_split(1, sequence_seed=101)
        model = mstcnpp.init(TINY, seed=0)
        cfg = TrainConfig(epochs=6, learning_rate=3e-3, patience=6, seed=0)
        best, report = fit(model, train, val, cfg)
        losses = [e.val_loss for e in report.epochs]
        assert losses[report.best_epoch - 1] == min(losses)
        fc = FocalConfig(gamma=cfg.gamma)
        loss, _ = evaluate(best, val, fc, cfg.smoothing_weight)
        assert abs(loss - min(losses)) < 1e-12

    def test_divergence_attaches_report(self):
        train = make_split(2, sequence_seed=100)
        val = make_split(1, sequence_seed=101)
        model = mstcnpp.init(TINY, seed=0)
        model.stages[0].proj_w[0, 0] = np.nan
        with pytest.raises(DivergenceError) as exc_info:
            fit(model, train, val, TrainConfig(epochs=2, learning_rate=1e-3))
        assert exc_info.value.report is not None

    def test_empty_sets_rejected(self):
        model = mstcnpp.init(TINY, seed=0)
        with pytest.raises(ValueError):
            fit(model, [], make_split(1, sequence_seed=1), TrainConfig())

    def test_single_sequence_overfit_sanity(self):
        # gradients are healthy enough to crush one 50-frame sequence
        cfg = synthgen.SynthConfig(dim=8, duration_mean=(12, 13, 15, 10),
                                   duration_std=(2, 2, 2, 2), seed=1)
        (features, timeline), = synthgen.generate(cfg, 1)
        x, y = features.data[:50], timeline.labels[:50]
        model = mstcnpp.init(TINY, seed=0)
        params = dict(mstcnpp.named_parameters(model))
        state = AdamWState()
        fc = FocalConfig(gamma=2.0)
        reached = False
        for _ in range(500):
            probs, cache = mstcnpp.forward(model, x, return_cache=True)
            breakdown, stage_grads = total_loss(probs, y, fc, 0.0)
            if breakdown.total < 0.01:
                reached = True
                break
            grads = mstcnpp.backward(model, cache, stage_grads)
            adamw_step(params, grads, state, lr=0.02)
        assert reached

    def test_gradient_accumulation_runs(self):
        train = make_split(4, sequence_seed=100)
        val = make_split(1, sequence_seed=101)
        model = mstcnpp.init(TINY, seed=0)
        cfg = TrainConfig(epochs=2, learning_rate=1e-3, batch_size=2, seed=0)
        _, report = fit(model, train, val, cfg)
        assert report.stop_epoch == 2

    def test_validation_fanout_matches_serial(self):
        val = make_split(4, sequence_seed=101)
        model = mstcnpp.init(TINY, seed=0)
        fc = FocalConfig(gamma=2.0)
        serial = evaluate(model, val, fc, 0.15, max_workers=1)
        threaded = evaluate(model, val, fc, 0.15, max_workers=4)
        assert serial == threaded


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        train = make_split(2, sequence_seed=100)
        model = mstcnpp.init(TINY, seed=0)
        params = dict(mstcnpp.named_parameters(model))
        state = AdamWState()
        fc = FocalConfig(gamma=2.0)
        for features, labels in train:
            probs, cache = mstcnpp.forward(model, features, return_cache=True)
            _, stage_grads = total_loss(probs, labels, fc, 0.15)
            grads = mstcnpp.backward(model, cache, stage_grads)
            adamw_step(params, grads, state, lr=1e-3)

        path = tmp_path / "ckpt.bin"
        save_checkpoint(model, state, path)
        loaded_model, loaded_state = load_checkpoint(path)
        assert loaded_state.step == state.step
        for name, _ in mstcnpp.named_parameters(model):
            np.testing.assert_array_equal(loaded_state.m[name], state.m[name])
            np.testing.assert_array_equal(loaded_state.v[name], state.v[name])

    def test_checkpoint_without_optimizer_section_rejected(self, tmp_path):
        model = mstcnpp.init(TINY, seed=0)
        path = tmp_path / "ckpt.bin"
        mstcnpp.save_model(model, path)
        with pytest.raises(mstcnpp.ModelFormatError):
            load_checkpoint(path)
