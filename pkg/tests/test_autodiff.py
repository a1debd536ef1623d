"""Gradient-oracle tests for the autodiff engine.

Every differentiable op is checked against central finite differences in
double precision (eps = 1e-5): elementwise ops at < 1e-6 relative error,
composite blocks at the 1e-4 acceptance gate. Inputs are kept away from
kinks and degenerate scales so the relative-error metric is meaningful.
"""

import numpy as np
import pytest

from ampscribe.autodiff import (
    Adam,
    AdamState,
    MultiHeadAttention,
    Tensor,
    adam_step,
    add,
    add_bias,
    avg_pool2d,
    binary_cross_entropy,
    conv2d,
    expand,
    grad_check,
    l2_normalize,
    layer_norm,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    permute,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
)
from ampscribe.errors import ShapeMismatch


def param(shape, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def const(shape, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(shape) * scale


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


class TestMatmul:
    def test_identity(self):
        x = param((4, 4), 0)
        out = matmul(Tensor(np.eye(4)), x)
        np.testing.assert_allclose(out.data, x.data)

    def test_scalar_case(self):
        assert matmul(Tensor([[3.0]]), Tensor([[2.0]])).item() == 6.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            matmul(param((3, 4), 0), param((3, 4), 1))

    def test_gradcheck_2d(self):
        a, b = param((3, 4), 1), param((4, 2), 2)
        err = grad_check(lambda: mean(mul(matmul(a, b), matmul(a, b))), [a, b])
        assert err < 1e-6

    def test_gradcheck_batched(self):
        a, b, w = param((2, 3, 4), 3), param((2, 4, 5), 4), param((5, 3), 5)
        err = grad_check(lambda: mean(matmul(matmul(a, b), w)), [a, b, w])
        assert err < 1e-6

    def test_weight_grad_sums_over_batch(self):
        a = Tensor(const((5, 3, 4), 6))
        w = param((4, 2), 7)
        out = matmul(a, w)
        out.backward(np.ones_like(out.data))
        expected = a.data.reshape(-1, 4).T @ np.ones((15, 2))
        np.testing.assert_allclose(w.grad, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# softmax / log_softmax
# ---------------------------------------------------------------------------


class TestSoftmax:
    def test_constant_vector_uniform(self):
        out = softmax(Tensor(np.full((1, 7), 3.3)))
        np.testing.assert_allclose(out.data, 1 / 7, atol=1e-12)

    def test_shift_invariance(self):
        x = const((4, 6), 8)
        a = softmax(Tensor(x)).data
        b = softmax(Tensor(x + 11.7)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_sums_to_one(self):
        out = softmax(Tensor(const((3, 5, 8), 9, scale=10)), axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_gradcheck_with_bce(self):
        x = param((3, 6), 10)
        t = np.random.default_rng(11).uniform(0.2, 0.8, (3, 6))
        err = grad_check(lambda: binary_cross_entropy(softmax(x), t), [x])
        assert err < 1e-6

    def test_log_softmax_gradcheck(self):
        x = param((4, 5), 12)
        w = const((4, 5), 13) + 2.0  # keep the readout weights away from zero
        err = grad_check(lambda: mean(mul(log_softmax(x), Tensor(w))), [x])
        assert err < 1e-6


# ---------------------------------------------------------------------------
# layer_norm
# ---------------------------------------------------------------------------


class TestLayerNorm:
    def test_moments(self):
        x = Tensor(const((6, 32), 14, scale=4) + 2)
        out = layer_norm(x, Tensor(np.full(32, 1.7)), Tensor(np.full(32, 0.3))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.3, atol=1e-9)
        np.testing.assert_allclose(out.std(axis=-1), 1.7, rtol=1e-3)

    def test_constant_input_gives_bias(self):
        x = Tensor(np.full((2, 8), 5.0))
        out = layer_norm(x, Tensor(np.ones(8)), Tensor(np.full(8, 0.25)))
        np.testing.assert_allclose(out.data, 0.25, atol=1e-9)

    def test_gradcheck(self):
        x, g, b = param((3, 10), 15), param((10,), 16), param((10,), 17)
        w = const((3, 10), 18) + 1.5
        err = grad_check(lambda: mean(mul(layer_norm(x, g, b), Tensor(w))), [x, g, b])
        assert err < 1e-6

    def test_gradcheck_other_axis(self):
        x, g, b = param((5, 4), 19), param((5,), 20), param((5,), 21)
        w = const((5, 4), 22) + 1.5
        err = grad_check(
            lambda: mean(mul(layer_norm(x, g, b, axis=0), Tensor(w))), [x, g, b]
        )
        assert err < 1e-5


# ---------------------------------------------------------------------------
# multi-head attention
# ---------------------------------------------------------------------------


class TestMultiHeadAttention:
    def test_single_key_collapses(self):
        rng = np.random.default_rng(1)
        attn = MultiHeadAttention(rng, dim=8, heads=2)
        q = Tensor(rng.standard_normal((5, 8)))
        kv = Tensor(rng.standard_normal((1, 8)))
        out = attn(q, kv, kv).data
        # softmax over one key is 1, so every query sees the same value row
        for row in out:
            np.testing.assert_allclose(row, out[0], atol=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(2)
        attn = MultiHeadAttention(rng, dim=8, heads=4)
        q = Tensor(rng.standard_normal((3, 8)))
        k = rng.standard_normal((6, 8))
        v = rng.standard_normal((6, 8))
        perm = rng.permutation(6)
        a = attn(q, Tensor(k), Tensor(v)).data
        b = attn(q, Tensor(k[perm]), Tensor(v[perm])).data
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_gradcheck_full(self):
        rng = np.random.default_rng(3)
        attn = MultiHeadAttention(rng, dim=6, heads=2)
        q, k, v = param((4, 6), 23), param((5, 6), 24), param((5, 6), 25)
        t = np.random.default_rng(26).uniform(0.1, 0.9, (4, 6))
        tensors = [q, k, v] + list(attn.params("a").values())
        err = grad_check(
            lambda: binary_cross_entropy(sigmoid(attn(q, k, v)), t), tensors
        )
        assert err < 1e-4

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(4)
        attn = MultiHeadAttention(rng, dim=8, heads=2)
        q = const((3, 5, 8), 27)
        kv = const((3, 7, 8), 28)
        batched = attn(Tensor(q), Tensor(kv), Tensor(kv)).data
        for i in range(3):
            single = attn(Tensor(q[i]), Tensor(kv[i]), Tensor(kv[i])).data
            np.testing.assert_allclose(batched[i], single, atol=1e-12)

    def test_dim_not_divisible(self):
        with pytest.raises(ShapeMismatch):
            MultiHeadAttention(np.random.default_rng(0), dim=6, heads=4)


# ---------------------------------------------------------------------------
# conv2d / pooling
# ---------------------------------------------------------------------------


class TestConv2d:
    def test_delta_kernel_identity(self):
        x = Tensor(const((1, 6, 7), 29))
        w = np.zeros((1, 1, 5, 5))
        w[0, 0, 2, 2] = 1.0
        out = conv2d(x, Tensor(w))
        np.testing.assert_allclose(out.data, x.data, atol=1e-12)

    def test_ones_kernel_interior(self):
        x = Tensor(np.full((1, 1, 9, 9), 2.0))
        out = conv2d(x, Tensor(np.ones((1, 1, 5, 5)))).data
        np.testing.assert_allclose(out[0, 0, 4, 4], 50.0, atol=1e-12)

    def test_channel_shapes(self):
        x = Tensor(const((2, 1, 10, 8), 30))
        assert conv2d(x, param((4, 1, 5, 5), 31)).shape == (2, 4, 10, 8)

    def test_gradcheck(self):
        x = param((1, 8, 8), 32, scale=0.5)
        w = param((2, 1, 3, 3), 33, scale=0.5)
        b = param((2,), 34, scale=0.1)
        t = np.random.default_rng(35).uniform(0.1, 0.9, (2, 8, 8))
        err = grad_check(
            lambda: binary_cross_entropy(sigmoid(conv2d(x, w, b)), t), [x, w, b]
        )
        assert err < 1e-5

    def test_avg_pool_gradcheck(self):
        x = param((2, 6, 6), 36)
        w = const((2, 3, 3), 37) + 1.5
        err = grad_check(lambda: mean(mul(avg_pool2d(x, 2), Tensor(w))), [x])
        assert err < 1e-6

    def test_avg_pool_trims_odd(self):
        x = Tensor(np.arange(25, dtype=float).reshape(1, 5, 5))
        assert avg_pool2d(x, 2).shape == (1, 2, 2)


# ---------------------------------------------------------------------------
# binary cross entropy
# ---------------------------------------------------------------------------


class TestBce:
    def test_perfect_prediction_near_zero(self):
        t = np.array([0.0, 1.0, 1.0, 0.0])
        assert binary_cross_entropy(Tensor(t), t).item() < 1e-6

    def test_half_everywhere_is_log2(self):
        t = np.random.default_rng(38).integers(0, 2, 50).astype(float)
        loss = binary_cross_entropy(Tensor(np.full(50, 0.5)), t)
        assert abs(loss.item() - np.log(2)) < 1e-12

    def test_gradcheck(self):
        x = param((4, 6), 39)
        t = np.random.default_rng(40).integers(0, 2, (4, 6)).astype(float)
        err = grad_check(lambda: binary_cross_entropy(sigmoid(x), t), [x])
        assert err < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            binary_cross_entropy(Tensor(np.full(3, 0.5)), np.zeros(4))


# ---------------------------------------------------------------------------
# elementwise / structural
# ---------------------------------------------------------------------------


class TestElementwise:
    def test_add_mul_gradcheck(self):
        a, b = param((3, 4), 41), param((3, 4), 42)
        err = grad_check(lambda: mean(mul(add(a, b), b)), [a, b])
        assert err < 1e-6

    def test_strict_shapes(self):
        with pytest.raises(ShapeMismatch):
            add(param((2, 3), 0), param((3, 2), 1))
        with pytest.raises(ShapeMismatch):
            mul(param((2, 3), 0), param((2, 1), 1))

    def test_add_bias_gradcheck(self):
        x, b = param((4, 3, 5), 43), param((3, 5), 44)
        w = const((4, 3, 5), 45) + 1.5
        err = grad_check(lambda: mean(mul(add_bias(x, b), Tensor(w))), [x, b])
        assert err < 1e-6

    def test_add_bias_shape_guard(self):
        with pytest.raises(ShapeMismatch):
            add_bias(param((4, 3, 5), 0), param((4, 5), 1))

    def test_expand_gradcheck(self):
        x = param((3, 1, 4), 46)
        y = Tensor(const((3, 6, 4), 47) + 1.5)
        err = grad_check(lambda: mean(mul(expand(x, 1, 6), y)), [x])
        assert err < 1e-6

    def test_relu_sigmoid_gradcheck(self):
        rng = np.random.default_rng(48)
        # keep inputs off the ReLU kink
        x = Tensor(rng.uniform(0.2, 2.0, (3, 4)) * rng.choice([-1, 1], (3, 4)),
                   requires_grad=True)
        err = grad_check(lambda: mean(mul(relu(x), sigmoid(x))), [x])
        assert err < 1e-6

    def test_l2_normalize_unit_norm_and_grad(self):
        x = param((4, 7), 49)
        out = l2_normalize(x)
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=-1), 1.0, atol=1e-9)
        w = const((4, 7), 50) + 1.5
        err = grad_check(lambda: mean(mul(l2_normalize(x), Tensor(w))), [x])
        assert err < 1e-6

    def test_permute_reshape_gradcheck(self):
        x = param((2, 3, 4), 51)
        y = Tensor(const((4, 6), 52) + 1.5)
        err = grad_check(
            lambda: mean(mul(reshape(permute(x, (2, 0, 1)), (4, 6)), y)), [x]
        )
        assert err < 1e-6


# ---------------------------------------------------------------------------
# graph semantics
# ---------------------------------------------------------------------------


class TestGraph:
    def test_fanout_accumulates(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.standard_normal(6), requires_grad=True)
            f = mean(mul(x, x))  # d/dx = 2x/6
            g = mean(scale(x, 3.0))  # d/dx = 0.5
            add(f, g).backward()
            np.testing.assert_allclose(x.grad, 2 * x.data / 6 + 0.5, atol=1e-10)

    def test_quadratic_exact(self):
        rng = np.random.default_rng(53)
        # half * ||x||^2 with coordinates bounded away from zero
        x = Tensor(rng.uniform(0.5, 2.0, 10) * rng.choice([-1, 1], 10),
                   requires_grad=True)
        err = grad_check(lambda: scale(mean(mul(x, x)), 5.0), [x])
        assert err < 1e-9

    def test_no_grad_blocks_graph(self):
        x = param((3,), 54)
        with no_grad():
            y = mul(x, x)
        assert y._parents == ()
        assert not y.requires_grad

    def test_backward_needs_scalar(self):
        x = param((3,), 55)
        with pytest.raises(ValueError):
            mul(x, x).backward()

    def test_deterministic_forward_backward(self):
        def run():
            rng = np.random.default_rng(0)
            x = Tensor(rng.standard_normal((8, 8)), requires_grad=True)
            w = Tensor(rng.standard_normal((8, 8)), requires_grad=True)
            loss = binary_cross_entropy(sigmoid(matmul(x, w)), rng.uniform(0, 1, (8, 8)))
            loss.backward()
            return loss.item(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(gx1, gx2)
        np.testing.assert_array_equal(gw1, gw2)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class TestAdam:
    def test_zero_grad_no_change(self):
        p = np.array([1.0, -2.0, 3.0])
        state = AdamState([p])
        adam_step(state, [p], [np.zeros(3)])
        np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])

    def test_first_step_direction(self):
        # hand-evaluated: at t=1, m_hat = g, v_hat = g^2, so the update is
        # -lr * g / (|g| + eps) ~= -lr * sign(g)
        p = np.array([0.5, -0.5, 2.0])
        g = np.array([0.3, -0.01, 4.0])
        state = AdamState([p], lr=1e-3)
        adam_step(state, [p], [g])
        delta = p - np.array([0.5, -0.5, 2.0])
        expected = -1e-3 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(delta, expected, rtol=1e-6)

    def test_bit_identical_trajectories(self):
        def train():
            rng = np.random.default_rng(3)
            params = {"w": Tensor(rng.standard_normal((4, 4)), requires_grad=True)}
            opt = Adam(params, lr=1e-2)
            x = rng.standard_normal((8, 4))
            t = rng.uniform(0, 1, (8, 4))
            for _ in range(100):
                opt.zero_grad()
                loss = binary_cross_entropy(sigmoid(matmul(Tensor(x), params["w"])), t)
                loss.backward()
                opt.step()
            return params["w"].data.copy()

        np.testing.assert_array_equal(train(), train())

    def test_shape_mismatch(self):
        p = np.zeros(3)
        state = AdamState([p])
        with pytest.raises(ShapeMismatch):
            adam_step(state, [p], [np.zeros(4)])

    def test_loss_decreases(self):
        rng = np.random.default_rng(9)
        params = {"w": Tensor(rng.standard_normal((6, 1)), requires_grad=True)}
        opt = Adam(params, lr=5e-2)
        x = rng.standard_normal((32, 6))
        t = (x @ rng.standard_normal((6, 1)) > 0).astype(float)
        losses = []
        for _ in range(60):
            opt.zero_grad()
            loss = binary_cross_entropy(sigmoid(matmul(Tensor(x), params["w"])), t)
            losses.append(loss.item())
            loss.backward()
            opt.step()
        assert losses[-1] < losses[0]
