import json
import math

import numpy as np
import pytest

from fedbank.classifier import (
    ModelConfig,
    ModelParams,
    apply_update,
    forward,
    init_optimizer,
    init_params,
    params_from_json,
    params_to_json,
    predict_proba,
    supervised_grad,
    supervised_loss,
    weighted_average,
)
from fedbank.numerics import RngStream, finite_diff_grad


def linear_config(d=4, k=3, l2=1e-4):
    return ModelConfig(input_dim=d, num_classes=k, hidden_dim=0, l2_penalty=l2)


def hidden_config(d=4, k=3, h=5, l2=1e-4):
    return ModelConfig(input_dim=d, num_classes=k, hidden_dim=h, l2_penalty=l2)


def random_params(config, rng, scale=0.5):
    return ModelParams(config, rng.normal(scale=scale, size=config.num_params))


class TestForward:
    def test_zero_params_give_uniform(self):
        params = ModelParams(linear_config(), np.zeros(linear_config().num_params))
        np.testing.assert_allclose(forward(params, np.ones(4)), np.full(3, 1 / 3))

    def test_binary_reduces_to_sigmoid(self):
        config = ModelConfig(input_dim=3, num_classes=2)
        rng = RngStream(0)
        params = random_params(config, rng)
        w, b = params.unpack()
        x = rng.normal(size=3)
        delta = (w[1] - w[0]) @ x + (b[1] - b[0])
        np.testing.assert_allclose(
            forward(params, x)[1], 1.0 / (1.0 + math.exp(-delta)), rtol=1e-12
        )

    def test_batch_matches_single(self):
        rng = RngStream(1)
        for config in (linear_config(), hidden_config()):
            params = random_params(config, rng)
            xs = rng.normal(size=(6, config.input_dim))
            batch = predict_proba(params, xs)
            for i in range(6):
                np.testing.assert_allclose(batch[i], forward(params, xs[i]), rtol=1e-12)

    def test_dimension_mismatch(self):
        params = random_params(linear_config(), RngStream(2))
        with pytest.raises(ValueError):
            forward(params, np.ones(5))


class TestSupervisedGrad:
    @pytest.mark.parametrize("config_fn", [linear_config, hidden_config])
    def test_matches_finite_differences(self, config_fn):
        rng = RngStream(10)
        config = config_fn()
        for _ in range(20):
            params = random_params(config, rng)
            x = rng.normal(size=(5, config.input_dim))
            y = rng.integers(0, config.num_classes, size=5)
            analytic = supervised_grad(params, x, y)
            numeric = finite_diff_grad(
                lambda flat: supervised_loss(ModelParams(config, flat), x, y),
                params.flat,
            )
            scale = max(np.max(np.abs(numeric)), 1e-8)
            assert np.max(np.abs(analytic - numeric)) / scale < 1e-5

    def test_converged_separable_gradient_is_small(self):
        # train to convergence on separable data; the remaining gradient is
        # the l2 pull only
        config = ModelConfig(input_dim=2, num_classes=2, l2_penalty=1e-4)
        rng = RngStream(3)
        x = np.concatenate([rng.normal(size=(20, 2)) + 6, rng.normal(size=(20, 2)) - 6])
        y = np.array([0] * 20 + [1] * 20)
        params = init_params(config, rng)
        opt = init_optimizer(config.num_params, "adam", learning_rate=0.05)
        for _ in range(400):
            params, opt = apply_update(params, supervised_grad(params, x, y), opt)
        assert np.linalg.norm(supervised_grad(params, x, y)) < 0.01

    def test_duplicated_batch_same_gradient(self):
        rng = RngStream(4)
        config = linear_config()
        params = random_params(config, rng)
        x = rng.normal(size=(5, 4))
        y = rng.integers(0, 3, size=5)
        double = supervised_grad(params, np.concatenate([x, x]), np.concatenate([y, y]))
        np.testing.assert_allclose(supervised_grad(params, x, y), double, atol=1e-14)

    def test_label_out_of_range(self):
        params = random_params(linear_config(), RngStream(5))
        with pytest.raises(ValueError):
            supervised_grad(params, np.ones((1, 4)), [3])


class TestApplyUpdate:
    def test_sgd_step(self):
        config = linear_config()
        params = ModelParams(config, np.zeros(config.num_params))
        opt = init_optimizer(config.num_params, "sgd", learning_rate=0.1)
        new, _ = apply_update(params, np.ones(config.num_params), opt)
        np.testing.assert_allclose(new.flat, -0.1 * np.ones(config.num_params))

    def test_adam_first_step_is_signed_lr(self):
        config = linear_config()
        params = ModelParams(config, np.zeros(config.num_params))
        opt = init_optimizer(config.num_params, "adam", learning_rate=0.01)
        grad = RngStream(6).normal(size=config.num_params)
        new, opt2 = apply_update(params, grad, opt)
        np.testing.assert_allclose(new.flat, -0.01 * np.sign(grad), rtol=1e-6)
        assert opt2.step_count == 1

    def test_zero_gradient_keeps_params(self):
        config = linear_config()
        params = random_params(config, RngStream(7))
        zero = np.zeros(config.num_params)
        for kind in ("sgd", "adam"):
            opt = init_optimizer(config.num_params, kind, learning_rate=0.1)
            new, opt = apply_update(params, zero, opt)
            new, opt = apply_update(new, zero, opt)
            np.testing.assert_array_equal(new.flat, params.flat)

    def test_inputs_not_mutated(self):
        config = linear_config()
        params = random_params(config, RngStream(8))
        before = params.flat.copy()
        opt = init_optimizer(config.num_params, "adam", learning_rate=0.1)
        m_before = opt.m.copy()
        apply_update(params, np.ones(config.num_params), opt)
        np.testing.assert_array_equal(params.flat, before)
        np.testing.assert_array_equal(opt.m, m_before)

    def test_length_mismatch(self):
        params = random_params(linear_config(), RngStream(9))
        opt = init_optimizer(params.config.num_params, "sgd", learning_rate=0.1)
        with pytest.raises(ValueError):
            apply_update(params, np.ones(2), opt)


class TestWeightedAverage:
    def test_convex_combination(self):
        config = linear_config()
        a = ModelParams(config, np.zeros(config.num_params))
        b = ModelParams(config, np.full(config.num_params, 4.0))
        out = weighted_average([a, b], [0.25, 0.75])
        np.testing.assert_array_equal(out.flat, np.full(config.num_params, 3.0))

    def test_single_model_identity(self):
        params = random_params(linear_config(), RngStream(12))
        np.testing.assert_array_equal(weighted_average([params], [1.0]).flat, params.flat)

    def test_sample_count_weights(self):
        # weights n_c / N with n = [1, 3]
        config = linear_config()
        a = ModelParams(config, np.zeros(config.num_params))
        b = ModelParams(config, np.full(config.num_params, 4.0))
        n = np.array([1.0, 3.0])
        out = weighted_average([a, b], n / n.sum())
        np.testing.assert_array_equal(out.flat, np.full(config.num_params, 3.0))

    def test_permutation_invariant_bit_exact(self):
        rng = RngStream(13)
        config = linear_config()
        models = [random_params(config, rng) for _ in range(5)]
        raw = rng.uniform(0.1, 1.0, size=5)
        weights = raw / raw.sum()
        base = weighted_average(models, weights).flat
        perm = [3, 0, 4, 1, 2]
        shuffled = weighted_average(
            [models[i] for i in perm], weights[perm]
        ).flat
        np.testing.assert_array_equal(base, shuffled)

    def test_one_hot_weight_returns_model_exactly(self):
        rng = RngStream(14)
        config = linear_config()
        models = [random_params(config, rng) for _ in range(3)]
        out = weighted_average(models, [0.0, 1.0, 0.0])
        np.testing.assert_array_equal(out.flat, models[1].flat)

    def test_invalid_weights(self):
        params = random_params(linear_config(), RngStream(15))
        with pytest.raises(ValueError):
            weighted_average([params, params], [0.7, 0.7])
        with pytest.raises(ValueError):
            weighted_average([params, params], [-0.5, 1.5])

    def test_incompatible_configs(self):
        a = random_params(linear_config(d=4), RngStream(16))
        b = random_params(linear_config(d=5), RngStream(16))
        with pytest.raises(ValueError):
            weighted_average([a, b], [0.5, 0.5])


class TestSerialization:
    def test_round_trip(self):
        params = random_params(hidden_config(), RngStream(17))
        restored = params_from_json(params_to_json(params))
        assert restored.config == params.config
        np.testing.assert_array_equal(restored.flat, params.flat)

    def test_json_is_plain_document(self):
        doc = json.loads(params_to_json(random_params(linear_config(), RngStream(18))))
        assert set(doc) == {"config", "flat"}


def test_init_deterministic_and_near_uniform():
    config = linear_config()
    a = init_params(config, RngStream(20).child(0))
    b = init_params(config, RngStream(20).child(0))
    np.testing.assert_array_equal(a.flat, b.flat)
    probs = forward(a, np.ones(4))
    np.testing.assert_allclose(probs, np.full(3, 1 / 3), atol=0.05)
