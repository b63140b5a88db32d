import json

import numpy as np
import pytest

from anchorgzsl.errors import DimensionMismatch, NonScalarOutput, ZeroGradientNorm
from anchorgzsl.nn import (AdamState, Mlp, adam_step, gp_param_grads, grad_check, gradient_penalty, init_mlp,
                           input_grad, leaky, load_mlp, mlp_backward, mlp_forward, penalty_value, save_mlp)
from anchorgzsl.numerics import make_rng


def linear_net(W, b=None):
    W = np.asarray(W, dtype=np.float64)
    b = np.zeros(W.shape[1]) if b is None else np.asarray(b, dtype=np.float64)
    return Mlp([W], [b], ["linear"])


def random_net(seed, dims, acts, std=0.5):
    return init_mlp(dims, acts, make_rng(seed, "net"), std=std)


class TestForwardBackward:
    def test_identity_layer(self):
        X = make_rng(0).standard_normal((4, 3))
        out, _ = mlp_forward(linear_net(np.eye(3)), X)
        np.testing.assert_array_equal(out, X)

    def test_zero_weights_give_bias(self):
        net = linear_net(np.zeros((3, 2)), [1.5, -2.0])
        out, _ = mlp_forward(net, make_rng(0).standard_normal((5, 3)))
        np.testing.assert_array_equal(out, np.tile([1.5, -2.0], (5, 1)))

    def test_sum_loss_weight_gradient(self):
        X = make_rng(1).standard_normal((6, 3))
        net = linear_net(make_rng(2).standard_normal((3, 2)))
        _, cache = mlp_forward(net, X)
        grads, _ = mlp_backward(net, cache, np.ones((6, 2)))
        np.testing.assert_allclose(grads[0], X.T @ np.ones((6, 2)))
        np.testing.assert_allclose(grads[1], [6.0, 6.0])

    def test_dead_relu_blocks_gradient(self):
        net = Mlp([np.array([[1.0]]), np.array([[2.0]])], [np.array([-5.0]), np.zeros(1)], ["relu", "linear"])
        _, cache = mlp_forward(net, np.array([[1.0]]))
        grads, dX = mlp_backward(net, cache, np.ones((1, 1)))
        assert grads[0][0, 0] == 0.0 and dX[0, 0] == 0.0

    def test_upstream_shape_checked(self):
        net = linear_net(np.eye(2))
        _, cache = mlp_forward(net, np.ones((3, 2)))
        with pytest.raises(DimensionMismatch):
            mlp_backward(net, cache, np.ones((3, 1)))

    def test_input_width_checked(self):
        with pytest.raises(DimensionMismatch):
            mlp_forward(linear_net(np.eye(2)), np.ones((1, 3)))

    @pytest.mark.parametrize("seed", range(5))
    def test_random_net_matches_finite_differences(self, seed):
        net = random_net(seed, [5, 16, 8, 3], [leaky(0.2), "relu", "linear"])
        rng = make_rng(seed, "data")
        X, up = rng.standard_normal((7, 5)), rng.standard_normal((7, 3))

        def fn():
            out, cache = mlp_forward(net, X)
            return float(np.sum(out * up)), mlp_backward(net, cache, up)[0]
        assert grad_check(fn, net.params()) <= 1e-6

    def test_naive_loop_oracle(self):
        # forward pass recomputed with explicit Python loops
        net = random_net(3, [4, 5, 2], [leaky(0.2), "linear"])
        x = make_rng(3, "x").standard_normal(4)
        h = [sum(x[i] * net.weights[0][i, j] for i in range(4)) + net.biases[0][j] for j in range(5)]
        h = [v if v >= 0 else 0.2 * v for v in h]
        y = [sum(h[i] * net.weights[1][i, j] for i in range(5)) + net.biases[1][j] for j in range(2)]
        np.testing.assert_allclose(mlp_forward(net, x)[0][0], y, rtol=1e-13)


class TestInputGrad:
    def test_linear_returns_weight_row(self):
        w = np.array([[0.5], [-1.0], [2.0]])
        np.testing.assert_array_equal(input_grad(linear_net(w), np.ones(3)), w[:, 0])

    def test_constant_net(self):
        np.testing.assert_array_equal(input_grad(linear_net(np.zeros((3, 1)), [4.0]), np.ones(3)), 0.0)

    def test_vector_output_rejected(self):
        with pytest.raises(NonScalarOutput):
            input_grad(linear_net(np.eye(2)), np.ones(2))

    def test_random_net_vs_finite_differences(self):
        net = random_net(1, [6, 12, 1], [leaky(0.2), "linear"])
        x = make_rng(1, "x").standard_normal(6)
        h = 1e-6
        f = lambda v: mlp_forward(net, v)[0][0, 0]
        num = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(6)])
        np.testing.assert_allclose(input_grad(net, x), num, rtol=1e-6)


class TestGradientPenalty:
    def test_constant_critic(self):
        net = linear_net(np.zeros((3, 1)), [1.0])
        with pytest.raises(ZeroGradientNorm) as info:
            gp_param_grads(net, np.ones(3))
        assert info.value.penalty == 1.0
        pen, grads, skipped = gradient_penalty(net, np.ones((4, 3)))
        assert pen == 1.0 and skipped == 4
        assert all(np.all(g == 0) for g in grads)

    def test_unit_linear_critic(self):
        w = np.array([[0.6], [0.8]])
        value, grads = gp_param_grads(linear_net(w), np.array([3.0, -1.0]))
        assert value == pytest.approx(0.0, abs=1e-30)
        assert all(np.allclose(g, 0.0) for g in grads)

    @pytest.mark.parametrize("seed", range(5))
    def test_random_two_layer_critic(self, seed):
        net = random_net(seed, [6, 10, 1], [leaky(0.2), "linear"])
        x = make_rng(seed, "x").standard_normal(6)

        def fn():
            return gp_param_grads(net, x)
        assert grad_check(fn, net.params()) <= 1e-4

    def test_condition_columns_excluded_from_norm(self):
        net = random_net(2, [5, 8, 1], [leaky(0.2), "linear"])
        xhat, cond = np.ones(3), np.array([1.0, 0.0])
        value, _ = gp_param_grads(net, xhat, cond=cond)
        assert value == pytest.approx(penalty_value(net, np.concatenate([xhat, cond])[None], 1.0, n_feat=3))

    def test_analytic_matches_fd_mode(self):
        net = random_net(5, [4, 8, 8, 1], [leaky(0.2), leaky(0.2), "linear"])
        X = make_rng(5, "x").standard_normal((6, 4))
        pa, ga, _ = gradient_penalty(net, X, mode="analytic")
        pf, gf, _ = gradient_penalty(net, X, mode="fd")
        assert pa == pf
        for a, f in zip(ga, gf):
            np.testing.assert_allclose(a, f, atol=1e-7)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = [np.array([1.0, -2.0])]
        state = AdamState(p, lr=0.1)
        for _ in range(10):
            adam_step(p, [np.zeros(2)], state)
        np.testing.assert_array_equal(p[0], [1.0, -2.0])

    def test_quadratic_descent(self):
        w = [np.array([1.0])]
        state = AdamState(w, lr=0.1)
        for _ in range(100):
            state.step(w, [2.0 * w[0]])
        assert abs(w[0][0]) < 0.1

    def test_scalar_oracle(self):
        # hand-rolled bias-corrected Adam on f(w) = w^2
        w, m, v = 1.0, 0.0, 0.0
        p = [np.array([1.0])]
        state = AdamState(p, lr=0.05)
        for t in range(1, 30):
            g = 2 * w
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= 0.05 * (m / (1 - 0.9 ** t)) / ((v / (1 - 0.999 ** t)) ** 0.5 + 1e-8)
            state.step(p, [2 * p[0]])
        assert p[0][0] == pytest.approx(w, abs=1e-14)

    def test_first_step_moves_by_lr(self):
        p = [np.array([0.0, 0.0])]
        AdamState(p, lr=0.01).step(p, [np.array([3.0, -0.2])])
        np.testing.assert_allclose(p[0], [-0.01, 0.01], rtol=1e-6)


class TestGradCheck:
    def test_linear_loss(self):
        p = [np.array([0.3, -1.0, 2.0])]
        c = np.array([1.0, 2.0, -3.0])
        assert grad_check(lambda: (float(c @ p[0]), [c.copy()]), p) <= 1e-10

    def test_quadratic_loss(self):
        p = [np.array([0.3, -1.0, 2.0])]
        assert grad_check(lambda: (float(p[0] @ p[0]), [2 * p[0]]), p) <= 1e-8

    def test_detects_wrong_gradient(self):
        p = [np.array([0.5, 1.5])]
        assert grad_check(lambda: (float(p[0] @ p[0]), [3 * p[0]]), p) > 0.1

    def test_subset_and_restore(self):
        p = [make_rng(0).standard_normal((20, 20))]
        before = p[0].copy()
        err = grad_check(lambda: (float(np.sum(p[0] ** 2)), [2 * p[0]]), p, max_coords=10, rng=make_rng(1))
        assert err <= 1e-6
        np.testing.assert_array_equal(p[0], before)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        net = random_net(0, [3, 4, 2], [leaky(0.2), "relu"])
        save_mlp(net, tmp_path / "n.json", {"note": 1})
        back, extra = load_mlp(tmp_path / "n.json")
        assert back.equals(net) and extra == {"note": 1}
        assert json.loads((tmp_path / "n.json").read_text())["format"] == "anchorgzsl.mlp"

    def test_init_shapes_and_bias(self):
        net = init_mlp([7, 5, 1], [leaky(0.2), "linear"], make_rng(0))
        assert net.layer_dims == [7, 5, 1]
        assert all(np.all(b == 0) for b in net.biases)
        assert max(np.max(np.abs(W)) for W in net.weights) <= 0.02
