import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pucare import tensor as T
from pucare.errors import ParameterError, ShapeError
from pucare.tensor import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def naive_conv(x, w, b, stride, padding):
    """Direct correlation sum, one output element at a time."""
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for r in range(ho):
                for q in range(wo):
                    patch = xp[i, :, r * stride : r * stride + k, q * stride : q * stride + k]
                    out[i, o, r, q] = (patch * w[o]).sum() + (b[o] if b is not None else 0.0)
    return out


class TestConv2d:
    def test_scalar_kernel_scales(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_correlation_sum(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 10.0

    def test_zero_weights(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 5, 5))
        out = T.conv2d(Tensor(x), Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.zeros(4)), padding=1)
        assert not out.data.any()

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_naive(self, stride, padding):
        rng = np.random.default_rng(stride * 10 + padding)
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, naive_conv(x, w, b, stride, padding), rtol=1e-12, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


class TestPoolAndUpsample:
    def test_window_max(self):
        out = T.max_pool2x2(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)))
        assert out.data.item() == 4.0

    def test_constant_halves(self):
        out = T.max_pool2x2(Tensor(np.full((1, 2, 6, 4), 3.5)))
        assert out.shape == (1, 2, 3, 2)
        assert (out.data == 3.5).all()

    def test_odd_size_rejected(self):
        with pytest.raises(ParameterError):
            T.max_pool2x2(Tensor(np.zeros((1, 1, 3, 4))))

    def test_pool_grad_routes_to_max(self):
        x = leaf(np.array([[1.0, 5.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        T.backward(T.sum(T.max_pool2x2(x)))
        np.testing.assert_array_equal(x.grad.reshape(2, 2), [[0, 1], [0, 0]])

    def test_pool_grad_one_per_window(self):
        x = leaf(np.random.default_rng(12).normal(size=(2, 3, 6, 8)))
        T.backward(T.sum(T.max_pool2x2(x)))
        per_window = x.grad.reshape(2, 3, 3, 2, 4, 2).sum(axis=(3, 5))
        np.testing.assert_array_equal(per_window, 1.0)

    def test_pool_of_upsample_is_identity(self):
        x = np.random.default_rng(13).normal(size=(2, 3, 4, 5))
        np.testing.assert_array_equal(T.max_pool2x2(T.upsample2x(Tensor(x))).data, x)

    def test_upsample_duplicates(self):
        out = T.upsample2x(Tensor(np.array([[[[5.0]]]])))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 5.0))

    def test_upsample_grad_sums_block(self):
        x = leaf(np.ones((1, 1, 2, 3)))
        T.backward(T.sum(T.upsample2x(x)))
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 3), 4.0))


class TestNormalisationAndPooling:
    def test_bn_identity_on_standardised_input(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 3, 5, 5))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out = T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), training=True)
        # the only departure from x is the eps term: x / sqrt(1 + eps)
        np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5), rtol=1e-10)
        assert np.abs(out.data - x).max() <= 1e-5 * np.abs(x).max()

    def test_bn_constant_input_gives_beta(self):
        out = T.batch_norm(
            Tensor(np.full((2, 2, 3, 3), 4.0)), Tensor(np.ones(2)), Tensor(np.full(2, 3.0)), np.zeros(2), np.ones(2), training=True
        )
        np.testing.assert_allclose(out.data, 3.0, atol=1e-6)

    def test_bn_running_stats_update(self):
        rng = np.random.default_rng(2)
        x = rng.normal(loc=2.0, scale=3.0, size=(8, 2, 4, 4))
        rm, rv = np.zeros(2), np.ones(2)
        T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True, momentum=0.1)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))

    def test_bn_eval_uses_running_stats(self):
        rm, rv = np.array([1.0]), np.array([4.0])
        out = T.batch_norm(Tensor(np.full((1, 1, 2, 2), 3.0)), Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, training=False)
        np.testing.assert_allclose(out.data, (3.0 - 1.0) / np.sqrt(4.0 + 1e-5))
        assert rm[0] == 1.0 and rv[0] == 4.0

    def test_bn_2d_input(self):
        x = np.random.default_rng(3).normal(size=(6, 4))
        out = T.batch_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), np.zeros(4), np.ones(4), training=True)
        np.testing.assert_allclose(out.data.mean(axis=0), 0.0, atol=1e-12)

    def test_gap_constant(self):
        assert T.global_avg_pool(Tensor(np.full((1, 1, 3, 3), 7.0))).data.item() == 7.0

    def test_gap_mean(self):
        out = T.global_avg_pool(Tensor(np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2)))
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 4.0

    def test_gap_grad(self):
        x = leaf(np.random.default_rng(11).normal(size=(2, 3, 4, 5)))
        T.backward(T.sum(T.global_avg_pool(x)))
        np.testing.assert_allclose(x.grad, 1 / 20)


class TestDenseAndElementwise:
    def test_dense_identity(self):
        x = np.random.default_rng(4).normal(size=(3, 5))
        np.testing.assert_array_equal(T.dense(Tensor(x), Tensor(np.eye(5)), Tensor(np.zeros(5))).data, x)

    def test_dense_dot(self):
        out = T.dense(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0, 4.0]])), Tensor(np.array([5.0])))
        assert out.data.item() == 16.0

    def test_sigmoid_zero(self):
        assert T.sigmoid(Tensor(np.zeros(3))).data.tolist() == [0.5, 0.5, 0.5]

    def test_sigmoid_stays_open(self):
        out = T.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
        assert 0.0 < out[0] and out[1] < 1.0

    def test_activation_dispatch(self):
        x = Tensor(np.array([-1.0, 2.0]))
        assert T.activation(x, "relu").data.tolist() == [0.0, 2.0]
        with pytest.raises(ParameterError):
            T.activation(x, "gelu")

    def test_concat_definition(self):
        a = np.random.default_rng(5).normal(size=(1, 2, 3, 3))
        out = T.concat_channels(Tensor(a), Tensor(np.zeros((1, 3, 3, 3))))
        assert out.shape == (1, 5, 3, 3)
        np.testing.assert_array_equal(out.data[:, :2], a)

    def test_concat_grad_is_ones(self):
        a = leaf(np.random.default_rng(6).normal(size=(1, 2, 3, 3)))
        T.backward(T.sum(T.concat_channels(a, Tensor(np.zeros((1, 3, 3, 3))))))
        np.testing.assert_array_equal(a.grad, np.ones_like(a.data))

    def test_mul_broadcast_grad(self):
        a = leaf(np.arange(8.0).reshape(1, 2, 2, 2))
        g = leaf(np.array([2.0, 3.0]).reshape(1, 2, 1, 1))
        T.backward(T.sum(T.mul(a, g)))
        np.testing.assert_array_equal(a.grad, np.broadcast_to(g.data, a.shape))
        np.testing.assert_array_equal(g.grad.ravel(), a.data.sum(axis=(0, 2, 3)))

    def test_bad_broadcast(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 3, 1, 1))))


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.random.default_rng(7).normal(size=(2, 3)))
        T.backward(T.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gives_2x(self):
        x = leaf(np.random.default_rng(8).normal(size=(4,)))
        T.backward(T.sum(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_shared_subgraph_accumulates(self):
        x = leaf([1.0, 2.0])
        y = T.add(x, x)
        T.backward(T.sum(T.add(y, x)))
        np.testing.assert_array_equal(x.grad, [3.0, 3.0])

    def test_leaf_grads_accumulate_across_calls(self):
        x = leaf([1.0, 2.0])
        T.backward(T.sum(x))
        T.backward(T.sum(x))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_non_scalar_loss(self):
        with pytest.raises(ParameterError):
            T.backward(leaf([1.0, 2.0]))

    def test_deep_chain_no_recursion_limit(self):
        x = leaf([1.0])
        y = x
        for _ in range(5000):
            y = T.add(y, Tensor(np.zeros(1)))
        T.backward(T.sum(y))
        assert x.grad.tolist() == [1.0]

    def test_graph_leaves(self):
        x, w = leaf([1.0]), leaf([2.0])
        g = T.Graph(T.sum(T.mul(x, w)))
        assert {id(t) for t in g.leaves()} == {id(x), id(w)}


class TestGradCheck:
    def test_pipeline(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(3, 2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        gamma, beta = rng.uniform(0.5, 1.5, 3), rng.normal(size=3)
        weights = rng.normal(size=(3, 3))

        def fn(x_, w_, g_, b_):
            h = T.conv2d(x_, w_, padding=1)
            h = T.batch_norm(h, g_, b_, np.zeros(3), np.ones(3), training=True)
            h = T.global_avg_pool(T.relu(h))
            return T.sum(T.mul(h, Tensor(weights[..., None, None])))

        errs = T.grad_check(fn, [x, w, gamma, beta])
        assert max(errs) < 1e-4

    def test_dense_linear_tolerance(self):
        rng = np.random.default_rng(10)
        x, w, b = rng.normal(size=(4, 5)), rng.normal(size=(3, 5)), rng.normal(size=3)
        c = rng.normal(size=(4, 3))
        errs = T.grad_check(lambda x_, w_, b_: T.sum(T.mul(T.dense(x_, w_, b_), Tensor(c))), [x, w, b], epsilon=1e-5)
        assert max(errs) < 1e-6

    def test_zero_network_finite(self):
        def fn(x_, w_):
            return T.sum(T.relu(T.conv2d(x_, w_, padding=1)))

        errs = T.grad_check(fn, [np.zeros((1, 1, 4, 4)), np.zeros((2, 1, 3, 3))])
        assert all(np.isfinite(errs))
        assert max(errs) < 1e-6


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-10, 10)), arrays(np.float64, (2, 3), elements=st.floats(-10, 10)))
def test_add_mul_grads(a, b):
    x, y = leaf(a), leaf(b)
    T.backward(T.sum(T.add(T.mul(x, y), x)))
    np.testing.assert_allclose(x.grad, b + 1.0)
    np.testing.assert_allclose(y.grad, a)
