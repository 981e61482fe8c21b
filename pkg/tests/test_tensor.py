import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from se2vae.gradcheck import grad_check
from se2vae.rng import RngStream
from se2vae.tensor import (Tensor, backward, batch_norm, conv2d, default_dtype,
                           leaky_relu, max_pool2d, no_grad, softmax_axis, tape,
                           tmean, transposed_conv2d, tsum)


def naive_conv2d(x, w, stride=1, padding=0):
    """Quadruple-nested-loop cross-correlation oracle."""
    b, c, h, wd = x.shape
    o, _, k, _ = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((b, o, ho, wo), dtype=np.float64)
    for bi in range(b):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = x[bi, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[bi, oi, i, j] = np.sum(patch.astype(np.float64) * w[oi])
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3))
        k = np.zeros((1, 1, 3, 3), dtype=np.float32)
        k[0, 0, 1, 1] = 1.0
        out = conv2d(x, Tensor(k), stride=1, padding=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_sum_of_nine_ones(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, w)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == pytest.approx(9.0)

    def test_matches_loop_oracle(self):
        rng = RngStream(7)
        x = rng.normal((2, 3, 8, 8), dtype=np.float32)
        w = rng.normal((4, 3, 5, 5), dtype=np.float32)
        got = conv2d(Tensor(x), Tensor(w)).data
        want = naive_conv2d(x, w)
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 2), (2, 1), (3, 2)])
    def test_strides_and_padding(self, stride, padding):
        rng = RngStream(8, stride * 10 + padding)
        x = rng.normal((2, 2, 9, 9), dtype=np.float32)
        w = rng.normal((3, 2, 3, 3), dtype=np.float32)
        got = conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
        want = naive_conv2d(x, w, stride=stride, padding=padding)
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ValueError, match="mismatch"):
            conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))


class TestTransposedConv2d:
    def test_adjoint_inner_product(self):
        rng = RngStream(11)
        a = Tensor(rng.normal((1, 1, 4, 4), dtype=np.float32))
        w = Tensor(rng.normal((1, 1, 3, 3), dtype=np.float32))
        b = Tensor(rng.normal((1, 1, 2, 2), dtype=np.float32))
        lhs = float(np.sum(conv2d(a, w).data * b.data))
        rhs = float(np.sum(a.data * transposed_conv2d(b, w).data))
        assert lhs == pytest.approx(rhs, rel=1e-4)

    def test_adjoint_identity_100_random_configs(self):
        rng = RngStream(12)
        for trial in range(100):
            k = int(rng.integers(1, 5))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, k))
            c, o = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            # pick h so the conv output size inverts exactly under the adjoint
            h = k - 2 * pad + stride * int(rng.integers(1, 7))
            if h < k - 2 * pad or h < 1:
                continue
            a = Tensor(rng.normal((2, c, h, h), dtype=np.float32))
            w = Tensor(rng.normal((o, c, k, k), dtype=np.float32))
            ya = conv2d(a, w, stride=stride, padding=pad)
            b = Tensor(rng.normal(ya.shape, dtype=np.float32))
            lhs = float(np.sum(ya.data * b.data))
            rhs = float(np.sum(a.data * transposed_conv2d(
                b, Tensor(np.ascontiguousarray(w.data)), stride=stride, padding=pad).data))
            assert abs(lhs - rhs) <= 1e-4 * max(abs(lhs), abs(rhs), 1.0)

    def test_delta_kernel_identity(self):
        x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
        k = np.zeros((1, 1, 3, 3), dtype=np.float32)
        k[0, 0, 1, 1] = 1.0
        out = transposed_conv2d(x, Tensor(k), stride=1, padding=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_stride2_non_overlapping_tiling(self):
        x = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
        w = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
        out = transposed_conv2d(x, w, stride=2, padding=0)
        assert out.shape == (1, 1, 4, 4)
        np.testing.assert_array_equal(out.data, np.ones((1, 1, 4, 4), dtype=np.float32))


def naive_maxpool(x):
    """Loop oracle for even-sized stride-2 2x2 pooling."""
    b, c, h, w = x.shape
    out = np.zeros((b, c, h // 2, w // 2), dtype=x.dtype)
    for bi in range(b):
        for ci in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[bi, ci, i, j] = x[bi, ci, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()
    return out


class TestMaxPool:
    def test_single_window(self):
        x = Tensor(np.array([[1, 2], [3, 4]], dtype=np.float32).reshape(1, 1, 2, 2))
        assert max_pool2d(x).item() == pytest.approx(4.0)

    def test_constant_input_ties_to_first(self):
        x = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
        with tape():
            out = max_pool2d(x)
            backward(tsum(out))
        expected = np.zeros((1, 1, 4, 4))
        expected[0, 0, ::2, ::2] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_matches_loop_oracle(self):
        rng = RngStream(13)
        x = rng.normal((2, 3, 6, 6), dtype=np.float32)
        np.testing.assert_array_equal(max_pool2d(Tensor(x)).data, naive_maxpool(x))

    def test_odd_size_rule(self):
        # 17 -> 9, matching the 68->34->17->9->5 downsampling chain
        x = Tensor(np.zeros((1, 1, 17, 17), dtype=np.float32))
        assert max_pool2d(x).shape == (1, 1, 9, 9)


class TestBatchNorm:
    def _buffers(self, c):
        return np.zeros(c, dtype=np.float64), np.ones(c, dtype=np.float64)

    def test_constant_input_zero_output(self):
        rm, rv = self._buffers(2)
        x = Tensor(np.full((4, 2, 3, 3), 7.0))
        g = Tensor(np.ones(2))
        b = Tensor(np.zeros(2))
        out = batch_norm(x, g, b, axes=(0, 2, 3), running_mean=rm, running_var=rv)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_two_point_closed_form(self):
        rm, rv = self._buffers(1)
        eps = 1e-5
        x = Tensor(np.array([-1.0, 1.0]).reshape(2, 1))
        out = batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)),
                         axes=(0,), running_mean=rm, running_var=rv, eps=eps)
        expected = np.array([-1.0, 1.0]) / np.sqrt(1.0 + eps)
        np.testing.assert_allclose(out.data.reshape(-1), expected, rtol=1e-6)

    def test_train_then_eval_momentum_zero(self):
        rm, rv = np.zeros(3), np.ones(3)
        rng = RngStream(21)
        x = Tensor(rng.normal((5, 3, 4, 4)))
        g = Tensor(rng.normal((3,)))
        b = Tensor(rng.normal((3,)))
        out_train = batch_norm(x, g, b, axes=(0, 2, 3), running_mean=rm,
                               running_var=rv, momentum=0.0, train=True)
        out_eval = batch_norm(x, g, b, axes=(0, 2, 3), running_mean=rm,
                              running_var=rv, momentum=0.0, train=False)
        np.testing.assert_allclose(out_eval.data, out_train.data, rtol=1e-5, atol=1e-6)

    def test_zero_size_reduction_raises(self):
        rm, rv = self._buffers(2)
        x = Tensor(np.zeros((0, 2)))
        with pytest.raises(ValueError, match="zero-size"):
            batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), axes=(0,),
                       running_mean=rm, running_var=rv)


class TestActivations:
    def test_leaky_relu_negative(self):
        assert leaky_relu(Tensor(np.array(-1.0))).item() == pytest.approx(-0.1)

    def test_softmax_constant(self):
        out = softmax_axis(Tensor(np.zeros(8)), axis=0)
        np.testing.assert_allclose(out.data, 1.0 / 8.0, rtol=1e-6)

    def test_softmax_closed_form(self):
        out = softmax_axis(Tensor(np.log(np.array([1.0, 3.0]))), axis=0)
        np.testing.assert_allclose(out.data, [0.25, 0.75], rtol=1e-6)

    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=2, max_size=16))
    @settings(max_examples=100, deadline=None)
    def test_softmax_rows_sum_to_one(self, values):
        out = softmax_axis(Tensor(np.array(values, dtype=np.float32)), axis=0)
        assert abs(out.data.sum() - 1.0) < 1e-6


class TestBackward:
    def test_product_gradients(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        y = Tensor(np.array(3.0), requires_grad=True)
        with tape():
            backward(x * y)
        assert x.grad == pytest.approx(3.0)
        assert y.grad == pytest.approx(2.0)

    def test_leaky_relu_sum_gradient(self):
        x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
        with tape():
            backward(tsum(leaky_relu(x)))
        np.testing.assert_allclose(x.grad, [0.1, 1.0])

    def test_double_backward_doubles(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        y = Tensor(np.array(3.0), requires_grad=True)
        with tape():
            loss = x * y
            backward(loss)
            backward(loss)
        assert x.grad == pytest.approx(6.0)

    def test_non_scalar_loss_raises(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with tape():
            with pytest.raises(ValueError, match="scalar"):
                backward(x * x)


class TestGradCheck:
    def test_quadratic_exact(self):
        with default_dtype(np.float64):
            p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
            err = grad_check(lambda: tsum(p * p), [p])
        assert err < 1e-7

    def test_corrupted_gradient_detected(self):
        with default_dtype(np.float64):
            p = Tensor(np.array([1.0, -2.0]), requires_grad=True)

            def build():
                return tsum(p * p)

            with tape():
                backward(build())
            analytic = p.grad * 1.01  # deliberately corrupted by 1%
            errs = []
            with no_grad():
                for i in range(p.size):
                    orig = p.data[i]
                    p.data[i] = orig + 1e-4
                    lp = build().item()
                    p.data[i] = orig - 1e-4
                    lm = build().item()
                    p.data[i] = orig
                    num = (lp - lm) / 2e-4
                    errs.append(abs(analytic[i] - num) / max(abs(analytic[i]), abs(num), 1e-8))
        assert max(errs) > 1e-3

    def test_three_layer_network_fd(self):
        rng = RngStream(31)
        with default_dtype(np.float64):
            w1 = Tensor(rng.normal((2, 1, 3, 3)) * 0.5, requires_grad=True)
            w2 = Tensor(rng.normal((3, 2, 3, 3)) * 0.5, requires_grad=True)
            w3 = Tensor(rng.normal((1, 3, 1, 1)) * 0.5, requires_grad=True)
            x = Tensor(rng.normal((2, 1, 6, 6)))

            def build():
                h = leaky_relu(conv2d(x, w1, padding=1))
                h = max_pool2d(h)
                h = leaky_relu(conv2d(h, w2, padding=1))
                h = conv2d(h, w3)
                return tsum(h * h)

            err = grad_check(build, [w1, w2, w3])
        assert err < 1e-6

    def test_nondeterministic_raises(self):
        state = {"n": 0.0}

        def build():
            state["n"] += 1.0
            return Tensor(np.array(state["n"]), dtype=np.float64)

        with default_dtype(np.float64):
            p = Tensor(np.array([1.0]), requires_grad=True)
            with pytest.raises(RuntimeError, match="deterministic"):
                grad_check(build, [p])


class TestReproducibility:
    def test_identical_streams(self):
        a = RngStream(99, 5)
        b = RngStream(99, 5)
        np.testing.assert_array_equal(a.normal((100,)), b.normal((100,)))
        np.testing.assert_array_equal(a.uniform((50,)), b.uniform((50,)))

    def test_counter_resume(self):
        a = RngStream(42)
        a.normal((10,))
        first = a.uniform((5,))
        b = RngStream(42, 0, counter=1)
        np.testing.assert_array_equal(first, b.uniform((5,)))

    def test_streams_differ(self):
        a = RngStream(1, 0).normal((20,))
        b = RngStream(1, 1).normal((20,))
        assert not np.array_equal(a, b)
