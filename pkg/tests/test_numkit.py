"""Tests for the network kernel: forward/backward passes, Adam, heads,
coefficient encoding and checkpoints."""

from __future__ import annotations

import math

import numpy as np
import pytest

from famo2o.gradcheck import numeric_grad, relative_error
from famo2o.numkit import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    Adam,
    BalanceSpace,
    ContractError,
    Mlp,
    NonFiniteError,
    adam_step,
    clamp_log_std,
    encode_balance,
    encode_balance_grad,
    gaussian_log_prob,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    save_checkpoint,
    softmax,
    squashed_log_prob,
)


def _hand_net() -> Mlp:
    net = Mlp([2, 3, 1])
    net.weights[0][...] = [[0.5, -1.0, 0.25], [1.0, 0.5, -0.5]]
    net.biases[0][...] = [0.1, 0.0, -0.2]
    net.weights[1][...] = [[1.5], [-2.0], [3.0]]
    net.biases[1][...] = [0.3]
    return net


class TestMlpForward:
    def test_zero_weights_give_zero(self):
        net = Mlp([4, 5, 3])
        np.testing.assert_array_equal(mlp_forward(net, np.array([1.0, -2.0, 3.0, 0.5])), np.zeros(3))

    def test_identity_layer(self):
        net = Mlp([3, 3])
        net.weights[0][...] = np.eye(3)
        x = np.array([0.3, -1.2, 7.0])
        np.testing.assert_array_equal(mlp_forward(net, x), x)

    def test_hand_computed_two_three_one(self):
        # hidden pre-activation: [0.5 + 2 + 0.1, -1 + 1 + 0, 0.25 - 1 - 0.2] = [2.6, 0, -0.95]
        # after ReLU [2.6, 0, 0]; output 1.5 * 2.6 + 0.3 = 4.2
        np.testing.assert_allclose(mlp_forward(_hand_net(), np.array([1.0, 2.0])), [4.2], rtol=1e-12)

    def test_batch_matches_rows(self):
        rng = np.random.default_rng(3)
        net = Mlp([3, 6, 2], rng)
        x = rng.standard_normal((5, 3))
        batch = net(x)
        for i in range(5):
            np.testing.assert_allclose(batch[i], net(x[i]), rtol=1e-14)

    def test_dimension_mismatch_raises(self):
        with pytest.raises(ContractError):
            mlp_forward(Mlp([3, 2]), np.ones(4))

    def test_bad_layer_dims(self):
        with pytest.raises(ContractError):
            Mlp([3])
        with pytest.raises(ContractError):
            Mlp([3, 0, 2])


class TestMlpBackward:
    def test_zero_upstream(self):
        rng = np.random.default_rng(0)
        net = Mlp([3, 4, 2], rng)
        np.testing.assert_array_equal(mlp_backward(net, np.ones(3), np.zeros(2)), 0.0)

    def test_linear_scalar(self):
        net = Mlp([1, 1])
        net.weights[0][...] = 0.7
        c = 2.5
        grads = mlp_backward(net, np.array([c]), np.array([1.0]))
        np.testing.assert_allclose(grads, [c, 1.0])

    def test_shape_mismatch(self):
        net = Mlp([3, 4, 2], np.random.default_rng(0))
        with pytest.raises(ContractError):
            mlp_backward(net, np.ones(3), np.ones(3))

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        net = Mlp([3, 4, 2], rng)
        x = rng.standard_normal(3)
        up = rng.standard_normal(2)
        analytic = mlp_backward(net, x, up)
        numeric = numeric_grad(lambda: float(net(x) @ up), net.params)
        assert relative_error(analytic, numeric) < 1e-4

    def test_input_gradient(self):
        rng = np.random.default_rng(11)
        net = Mlp([3, 5, 2], rng)
        x = rng.standard_normal((4, 3))
        up = rng.standard_normal((4, 2))
        _, cache = net.forward(x)
        _, gin = net.backward(cache, up)
        numeric = numeric_grad(lambda: float(np.sum(net(x) * up)), x)
        assert relative_error(gin.ravel(), numeric.ravel()) < 1e-4

    def test_gradient_layout_matches_views(self):
        rng = np.random.default_rng(1)
        net = Mlp([2, 3, 1], rng)
        grads = mlp_backward(net, np.array([1.0, -1.0]), np.array([1.0]))
        assert grads.shape == net.params.shape
        assert net.weights[0].base is net.params or np.shares_memory(net.weights[0], net.params)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = np.array([1.0, -2.0])
        adam_step(Adam(2, lr=0.1), params, np.zeros(2))
        np.testing.assert_array_equal(params, [1.0, -2.0])

    def test_first_step_is_signed_lr(self):
        params = np.array([0.0])
        adam_step(Adam(1, lr=0.1), params, np.array([1.0]))
        np.testing.assert_allclose(params, [-0.1], rtol=1e-6)

    def test_quadratic_against_scalar_recursion(self):
        # independent scalar re-implementation of the bias-corrected recursion
        w_ref, m, v = 0.0, 0.0, 0.0
        for t in range(1, 101):
            g = 2.0 * (w_ref - 3.0)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w_ref -= 0.05 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        params = np.array([0.0])
        opt = Adam(1, lr=0.05)
        for _ in range(100):
            opt.step(params, 2.0 * (params - 3.0))
        np.testing.assert_allclose(params[0], w_ref, rtol=1e-12)
        assert abs(params[0] - 3.0) < 0.2 or abs(w_ref - params[0]) < 1e-12
        assert opt.t == 100

    def test_rejects_non_finite(self):
        params = np.zeros(3)
        opt = Adam(3)
        with pytest.raises(NonFiniteError):
            opt.step(params, np.array([0.0, np.nan, 1.0]))
        with pytest.raises(NonFiniteError):
            opt.step(params, np.array([np.inf, 0.0, 1.0]))
        assert opt.t == 0
        np.testing.assert_array_equal(params, 0.0)

    def test_step_count_and_shapes(self):
        opt = Adam(4)
        params = np.ones(4)
        for k in range(3):
            opt.step(params, np.ones(4))
            assert opt.t == k + 1
        assert opt.m.shape == opt.v.shape == params.shape
        with pytest.raises(ContractError):
            opt.step(params, np.ones(3))

    def test_params_stay_finite(self):
        rng = np.random.default_rng(5)
        net = Mlp([3, 8, 2], rng)
        opt = Adam(net.n_params, lr=1e-2)
        for _ in range(200):
            x = rng.standard_normal((16, 3))
            out, cache = net.forward(x)
            grads, _ = net.backward(cache, out - 1.0)
            opt.step(net.params, grads)
        assert np.all(np.isfinite(net.params))


class TestHeads:
    def test_softmax_normalised_and_positive(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((100, 4)) * 30
        p = softmax(logits)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(p > 0)

    def test_gaussian_mode_is_maximal(self):
        mean, log_std = np.array([0.2, -0.4]), np.array([-1.0, 0.5])
        grid = np.stack(np.meshgrid(np.linspace(-2, 2, 41), np.linspace(-2, 2, 41)), -1).reshape(-1, 2)
        lp = gaussian_log_prob(grid, mean, log_std)
        assert gaussian_log_prob(mean, mean, log_std) >= lp.max()

    def test_log_std_clamp(self):
        clamped, mask = clamp_log_std(np.array([-9.0, 0.0, 5.0]))
        np.testing.assert_array_equal(clamped, [LOG_STD_MIN, 0.0, LOG_STD_MAX])
        np.testing.assert_array_equal(mask, [False, True, False])

    def test_squashed_density_finite_and_inside_box(self):
        rng = np.random.default_rng(2)
        pre = rng.standard_normal((1000, 2)) * 3
        actions = 0.1 * np.tanh(pre)
        assert np.all(np.abs(actions) < 0.1)
        lp = squashed_log_prob(pre, np.zeros(2), np.zeros(2), 0.1)
        assert np.all(np.isfinite(lp))


class TestEncodeBalance:
    def test_zero_alternates(self):
        space = BalanceSpace(1e-9, 5.0, 6)
        np.testing.assert_allclose(encode_balance(0.0, 6, space), [0, 1, 0, 1, 0, 1], atol=1e-8)

    def test_dim_two_unit_norm(self):
        space = BalanceSpace(0.5, 10.0, 2)
        for beta in (0.5, 1.7, 9.3):
            enc = encode_balance(beta, 2, space)
            np.testing.assert_allclose(enc, [math.sin(beta), math.cos(beta)], rtol=1e-14)
            np.testing.assert_allclose(enc @ enc, 1.0, rtol=1e-14)

    def test_beta_three_dim_eight(self):
        space = BalanceSpace(1.0, 5.0, 8)
        expected = []
        for i in range(4):
            angle = 3.0 / 10000 ** (2 * i / 8)
            expected += [math.sin(angle), math.cos(angle)]
        np.testing.assert_allclose(encode_balance(3.0, 8, space), expected, rtol=1e-14)

    def test_entries_bounded(self):
        space = BalanceSpace(1.0, 14.0, 16)
        enc = encode_balance(np.linspace(1, 14, 200), 16, space)
        assert np.all(np.abs(enc) <= 1.0)

    def test_out_of_range_is_clamped_and_counted(self):
        space = BalanceSpace(1.0, 5.0, 4)
        enc = encode_balance(np.array([0.2, 3.0, 7.5]), 4, space)
        np.testing.assert_allclose(enc[0], encode_balance(1.0, 4, space))
        np.testing.assert_allclose(enc[2], encode_balance(5.0, 4, space))
        assert space.n_clamped == 2

    def test_odd_dimension_rejected(self):
        with pytest.raises(ContractError):
            BalanceSpace(1.0, 5.0, 3)

    @pytest.mark.parametrize("normalize", [False, True])
    def test_derivative(self, normalize):
        space = BalanceSpace(1.0, 5.0, 8, normalize=normalize)
        beta = np.array([1.3, 2.2, 4.9])
        h = 1e-6
        numeric = (encode_balance(beta + h, 8, space) - encode_balance(beta - h, 8, space)) / (2 * h)
        np.testing.assert_allclose(encode_balance_grad(beta, space), numeric, atol=1e-8)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        nets = {"a": Mlp([3, 5, 2], rng), "balance": Mlp([4, 2], rng)}
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, nets)
        loaded = load_checkpoint(path)
        assert list(loaded) == ["a", "balance"]
        for name in nets:
            assert loaded[name].layer_dims == nets[name].layer_dims
            np.testing.assert_array_equal(loaded[name].params, nets[name].params)

    def test_layout(self, tmp_path):
        net = _hand_net()
        path = tmp_path / "one.ckpt"
        save_checkpoint(path, {"n": net})
        raw = path.read_bytes()
        assert raw[:4] == b"FO2C"
        body = raw[4 + 8 + 4 + 1:]
        assert body[:4] == b"FMLP"
        weights = np.frombuffer(body[4 + 8 + 12:], dtype="<f8")
        np.testing.assert_array_equal(weights[:6], [0.5, -1.0, 0.25, 1.0, 0.5, -0.5])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"nope" + bytes(20))
        with pytest.raises(ValueError):
            load_checkpoint(path)
