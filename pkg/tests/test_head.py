import math

import numpy as np
import pytest

from darc.calibrate import CalibratedSet
from darc.errors import ConfigError, ValidationError
from darc.head import (
    HeadParams,
    OptimizerState,
    TrainConfig,
    cosine_lr,
    forward,
    hard_indices,
    init_params,
    load_params,
    loss_and_grad,
    mine_hard_samples,
    optimizer_step,
    per_sample_losses,
    save_params,
    train,
)
from darc.synth import oracle_mine

from conftest import kink_free_instance


def make_calibrated(features, labels, n_classes=None):
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    n = features.shape[0]
    return CalibratedSet(
        features=features,
        labels=labels,
        class_names=[f"class_{i}" for i in range(n_classes)],
        provenance=np.zeros(n, dtype=np.uint8),
        anchor_index=np.arange(n, dtype=np.int64),
        center_class=np.full(n, -1, dtype=np.int64),
    )


def zero_attention_params(dim, h, n_classes, rng):
    params = init_params(dim, n_classes, hidden=h, seed=0)
    params.w1[:] = 0.0
    params.b1[:] = 0.0
    params.w2[:] = 0.0
    params.b2[:] = 0.0
    params.cls_w[:] = rng.standard_normal((dim, n_classes))
    params.cls_b[:] = rng.standard_normal(n_classes)
    return params


def oracle_forward(params, x):
    """Straight-line scalar recomputation of the head, loop by loop."""
    dim, h, n_cls = params.dim, params.h, params.n_classes
    hidden = []
    for j in range(h):
        z = params.b1[j]
        for d in range(dim):
            z += params.w1[d, j] * x[d]
        hidden.append(max(z, 0.0))
    gate = []
    for d in range(dim):
        z = params.b2[d]
        for j in range(h):
            z += params.w2[j, d] * hidden[j]
        gate.append(1.0 / (1.0 + math.exp(-z)))
    logits = []
    for c in range(n_cls):
        z = params.cls_b[c]
        for d in range(dim):
            z += params.cls_w[d, c] * gate[d] * x[d]
        logits.append(z)
    return np.array(logits), np.array(gate)


class TestForward:
    def test_zero_attention_gives_half_gate(self, rng):
        params = zero_attention_params(6, 3, 4, rng)
        x = rng.standard_normal(6)
        logits, gate = forward(params, x)
        assert np.allclose(gate, 0.5)
        assert np.allclose(logits, (0.5 * x) @ params.cls_w + params.cls_b)

    def test_zero_input_gives_bias_logits(self, rng):
        params = init_params(5, 3, hidden=2, seed=1)
        params.cls_b[:] = rng.standard_normal(3)
        logits, _ = forward(params, np.zeros(5))
        assert np.allclose(logits, params.cls_b)

    def test_matches_straight_line_oracle(self, rng):
        params = init_params(16, 3, hidden=8, seed=2)
        for name, p in params.as_dict().items():
            p += 0.1 * rng.standard_normal(p.shape)
        x = rng.standard_normal(16)
        logits, gate = forward(params, x)
        ref_logits, ref_gate = oracle_forward(params, x)
        np.testing.assert_allclose(logits, ref_logits, rtol=1e-6)
        np.testing.assert_allclose(gate, ref_gate, rtol=1e-6)

    def test_gate_strictly_inside_unit_interval(self, rng):
        # float64 sigmoid saturates to exactly 1.0 beyond |z| ~ 37, so the
        # open interval is checked at realistic embedding magnitudes
        params = init_params(12, 5, seed=3)
        X = 5.0 * rng.standard_normal((256, 12))
        _, gate = forward(params, X)
        assert np.all(gate > 0.0)
        assert np.all(gate < 1.0)

    def test_nonfinite_input_rejected(self):
        params = init_params(3, 2, seed=0)
        with pytest.raises(ValidationError):
            forward(params, np.array([1.0, np.inf, 0.0]))


class TestLossAndGrad:
    def test_uniform_logits_loss(self):
        params = init_params(4, 5, hidden=2, seed=0)
        for p in params.as_dict().values():
            p[:] = 0.0
        # all-zero params give identical (zero) logits for every class
        loss, _ = loss_and_grad(params, np.ones((3, 4)), np.array([0, 2, 4]))
        assert loss == pytest.approx(math.log(5), rel=1e-12)

    def test_gradients_match_finite_differences(self):
        # dim-8, 3-class instance; central differences with step 1e-4,
        # sampled away from the ReLU kink where the stencil is valid
        params, X, y = kink_free_instance(seed=4, dim=8, h=4, n_classes=3, rows=8)
        _, grads = loss_and_grad(params, X, y)
        step = 1e-4
        for name, p in params.as_dict().items():
            flat_p = p.reshape(-1)
            flat_g = grads[name].reshape(-1)
            for idx in range(flat_p.size):
                orig = flat_p[idx]
                flat_p[idx] = orig + step
                hi, _ = loss_and_grad(params, X, y)
                flat_p[idx] = orig - step
                lo, _ = loss_and_grad(params, X, y)
                flat_p[idx] = orig
                numeric = (hi - lo) / (2 * step)
                denom = max(abs(numeric), abs(flat_g[idx]), 1e-8)
                assert abs(flat_g[idx] - numeric) / denom < 1e-4

    def test_duplicated_batch_invariance(self, rng):
        params = init_params(6, 3, seed=5)
        X = rng.standard_normal((5, 6))
        y = rng.integers(0, 3, size=5)
        loss1, grads1 = loss_and_grad(params, X, y)
        loss2, grads2 = loss_and_grad(params, np.tile(X, (2, 1)), np.tile(y, 2))
        assert loss1 == pytest.approx(loss2, rel=1e-12)
        for name in grads1:
            np.testing.assert_allclose(grads1[name], grads2[name], rtol=1e-9)

    def test_label_out_of_range(self, rng):
        params = init_params(4, 2, seed=0)
        with pytest.raises(ValidationError):
            loss_and_grad(params, rng.standard_normal((2, 4)), np.array([0, 2]))

    def test_empty_batch_rejected(self):
        params = init_params(4, 2, seed=0)
        with pytest.raises(ValidationError):
            loss_and_grad(params, np.empty((0, 4)), np.empty(0, dtype=int))


class TestOptimizerStep:
    def test_zero_grad_decay_scales_weights_only(self):
        params = init_params(4, 2, hidden=2, seed=6)
        before = params.copy()
        state = OptimizerState.initial(params)
        config = TrainConfig(weight_decay=0.1)
        grads = {k: np.zeros_like(p) for k, p in params.as_dict().items()}
        optimizer_step(params, grads, state, lr=0.5, config=config)
        factor = 1.0 - 0.5 * 0.1
        for name in ("w1", "w2", "cls_w"):
            np.testing.assert_allclose(
                getattr(params, name), getattr(before, name) * factor, rtol=1e-12
            )
        for name in ("b1", "b2", "cls_b"):
            assert np.array_equal(getattr(params, name), getattr(before, name))

    def test_zero_grad_no_decay_is_fixpoint(self):
        params = init_params(4, 2, seed=7)
        before = params.copy()
        state = OptimizerState.initial(params)
        config = TrainConfig(weight_decay=0.0)
        grads = {k: np.zeros_like(p) for k, p in params.as_dict().items()}
        optimizer_step(params, grads, state, lr=0.5, config=config)
        for name, p in params.as_dict().items():
            assert np.array_equal(p, getattr(before, name))

    def test_step_counter_increments(self):
        params = init_params(2, 2, seed=0)
        state = OptimizerState.initial(params)
        grads = {k: np.zeros_like(p) for k, p in params.as_dict().items()}
        config = TrainConfig()
        for expected in (1, 2, 3):
            optimizer_step(params, grads, state, lr=0.1, config=config)
            assert state.step == expected

    def test_scalar_trajectory_matches_hand_stepped_oracle(self):
        config = TrainConfig(beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.05)
        lr = 0.01
        grad_sequence = [0.3, -0.2, 0.05]
        params = init_params(1, 2, hidden=1, seed=8)
        params.w1[0, 0] = 1.0
        state = OptimizerState.initial(params)
        for g in grad_sequence:
            grads = {k: np.zeros_like(p) for k, p in params.as_dict().items()}
            grads["w1"][0, 0] = g
            optimizer_step(params, grads, state, lr=lr, config=config)

        # hand-stepped reference in plain floats
        p, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate(grad_sequence, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            m_hat = m / (1 - 0.9**t)
            v_hat = v / (1 - 0.999**t)
            p = p * (1 - lr * 0.05) - lr * m_hat / (math.sqrt(v_hat) + 1e-8)
        assert abs(params.w1[0, 0] - p) < 1e-10


class TestCosineLr:
    def test_endpoints_exact(self):
        config = TrainConfig(n_max=100, lr_max=1e-4, lr_min=1e-6)
        assert cosine_lr(0, config) == 1e-4
        assert cosine_lr(100, config) == 1e-6

    def test_midpoint(self):
        config = TrainConfig(n_max=100, lr_max=1e-4, lr_min=1e-6)
        assert cosine_lr(50, config) == pytest.approx((1e-4 + 1e-6) / 2, rel=1e-12)

    def test_monotone_decrease(self):
        config = TrainConfig(n_max=40, lr_max=1e-3, lr_min=1e-5)
        values = [cosine_lr(e, config) for e in range(41)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestMining:
    def test_forced_example(self):
        assert hard_indices(np.array([1.0, 2.0, 3.0]), 1.2).tolist() == [2]

    def test_all_equal_yields_empty(self):
        assert hard_indices(np.full(10, 3.3), 1.2).size == 0

    def test_matches_scan_oracle(self, rng):
        losses = rng.uniform(0, 5, size=1000)
        got = hard_indices(losses, 1.2).tolist()
        assert got == oracle_mine(losses, 1.2)

    def test_mine_hard_samples_definition(self, rng):
        features = rng.standard_normal((40, 6)).astype(np.float32)
        labels = rng.integers(0, 3, size=40)
        calibrated = make_calibrated(features, labels, n_classes=3)
        params = init_params(6, 3, seed=9)
        losses = per_sample_losses(params, features.astype(np.float64), labels)
        expected = oracle_mine(losses, 1.2)
        assert mine_hard_samples(params, calibrated, 1.2).tolist() == expected


def separable_calibrated(rng, n_per_class=100, dim=8, gap=8.0):
    center = np.zeros(dim)
    center[0] = gap
    a = rng.standard_normal((n_per_class, dim)) - center
    b = rng.standard_normal((n_per_class, dim)) + center
    features = np.concatenate([a, b])
    labels = np.array([0] * n_per_class + [1] * n_per_class)
    return make_calibrated(features, labels, n_classes=2)


class TestTrain:
    def test_n_max_zero_returns_initial_params(self, rng):
        calibrated = separable_calibrated(rng)
        config = TrainConfig(n_max=0, seed=3)
        result = train(calibrated, config)
        expected = init_params(calibrated.dim, 2, config.hidden, config.seed)
        for name, p in result.params.as_dict().items():
            assert np.array_equal(p, getattr(expected, name))
        assert result.metrics == []

    def test_separable_data_reaches_high_accuracy(self, rng):
        calibrated = separable_calibrated(rng)
        config = TrainConfig(
            n_max=200, lr_max=5e-3, lr_min=1e-5, batch_size=32, seed=3
        )
        result = train(calibrated, config)
        assert result.metrics[-1].balanced_accuracy >= 0.99
        assert result.metrics[-1].mean_loss < result.metrics[0].mean_loss

    def test_same_seed_identical_logs(self, rng):
        calibrated = separable_calibrated(rng, n_per_class=30)
        config = TrainConfig(n_max=35, lr_max=1e-3, batch_size=16, n_mine=10, seed=21)
        log_a = [(m.mean_loss, m.balanced_accuracy) for m in train(calibrated, config).metrics]
        log_b = [(m.mean_loss, m.balanced_accuracy) for m in train(calibrated, config).metrics]
        assert log_a == log_b

    def test_same_seed_identical_params(self, rng):
        calibrated = separable_calibrated(rng, n_per_class=25)
        config = TrainConfig(n_max=20, lr_max=1e-3, batch_size=16, n_mine=7, seed=5)
        a = train(calibrated, config).params
        b = train(calibrated, config).params
        for name, p in a.as_dict().items():
            assert np.array_equal(p, getattr(b, name))

    def test_empty_set_rejected(self):
        calibrated = make_calibrated(np.empty((0, 4), dtype=np.float32), [], n_classes=2)
        with pytest.raises(ConfigError):
            train(calibrated, TrainConfig(n_max=1))


class TestParamsSerialization:
    def test_round_trip_f32_values(self, tmp_path):
        params = init_params(6, 4, hidden=3, seed=13)
        path = tmp_path / "params.darch1"
        save_params(params, path)
        loaded = load_params(path)
        assert loaded.dim == 6 and loaded.h == 3 and loaded.n_classes == 4
        for name, p in params.as_dict().items():
            np.testing.assert_array_equal(
                getattr(loaded, name), p.astype(np.float32).astype(np.float64)
            )

    def test_save_twice_identical(self, tmp_path):
        params = init_params(3, 2, seed=1)
        p1, p2 = tmp_path / "a.darch1", tmp_path / "b.darch1"
        save_params(params, p1)
        save_params(params, p2)
        assert p1.read_bytes() == p2.read_bytes()
