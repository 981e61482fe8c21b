import numpy as np
import pytest
from helpers import naive_conv2d, naive_rotate_kernel

from se2vae import se2
from se2vae.gradcheck import grad_check
from se2vae.rng import RngStream
from se2vae.tensor import (Tensor, default_dtype, leaky_relu, rotate_image,
                           tsum)

N = 8


class TestRotationWeights:
    def test_identity_at_zero(self):
        w = se2.rotation_weights(5, N)[0]
        np.testing.assert_array_equal(w, np.eye(25))

    @pytest.mark.parametrize("j,quarters", [(2, 1), (4, 2), (6, 3)])
    def test_exact_quarter_turn_permutation(self, j, quarters):
        rng = RngStream(5, j)
        kern = rng.normal((5, 5))
        rotated = se2.rotation_weights(5, N)[j] @ kern.reshape(-1)
        np.testing.assert_allclose(rotated.reshape(5, 5),
                                   np.rot90(kern, quarters), atol=1e-12)

    def test_weights_nonnegative_and_mass_bounded(self):
        table = se2.rotation_weights(5, N)
        assert np.all(table >= 0)
        assert np.all(table.sum(axis=-1) <= 1.0 + 1e-12)

    def test_mass_lost_only_outside_disk(self):
        table = se2.rotation_weights(5, N)
        ctr = 2.0
        for j in range(N):
            for t in range(25):
                r, c = divmod(t, 5)
                radius = np.hypot(r - ctr, c - ctr)
                if radius <= 2.5 - np.sqrt(2):  # always stays inside under rotation
                    assert table[j, t].sum() == pytest.approx(1.0, abs=1e-12)


class TestRotateKernel:
    def test_j_zero_identity(self):
        kern = Tensor(RngStream(1).normal((2, 3, 5, 5), dtype=np.float32))
        np.testing.assert_array_equal(se2.rotate_kernel(kern, 0, N).data, kern.data)

    def test_quarter_turn_exact(self):
        kern = RngStream(2).normal((5, 5), dtype=np.float32)
        got = se2.rotate_kernel(Tensor(kern), N // 4, N).data
        np.testing.assert_allclose(got, np.rot90(kern), atol=1e-6)

    def test_45_degrees_matches_bilinear_oracle(self):
        kern = np.zeros((5, 5))
        kern[2, :] = [1.0, 2.0, 3.0, 4.0, 5.0]  # single central row
        got = se2.rotate_kernel(Tensor(kern, dtype=np.float64), 1, N).data
        want = naive_rotate_kernel(kern, 2 * np.pi / N)
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_linear_in_base(self):
        rng = RngStream(3)
        k1, k2 = rng.normal((5, 5)), rng.normal((5, 5))
        a, b = 1.7, -0.3
        for j in range(N):
            lhs = se2.rotate_kernel(Tensor(a * k1 + b * k2, dtype=np.float64), j, N).data
            rhs = (a * se2.rotate_kernel(Tensor(k1, dtype=np.float64), j, N).data
                   + b * se2.rotate_kernel(Tensor(k2, dtype=np.float64), j, N).data)
            np.testing.assert_allclose(lhs, rhs, atol=1e-6)

    def test_out_of_range_raises(self):
        with pytest.raises(IndexError):
            se2.rotate_kernel(Tensor(np.zeros((5, 5))), N, N)


class TestLiftingConv:
    def test_radial_kernel_gives_identical_slices(self):
        # rotationally symmetric kernel: value depends only on radius.
        # N=4 rotations are exact permutations, so symmetry holds exactly.
        ctr = 2.0
        kern = np.zeros((1, 1, 5, 5), dtype=np.float32)
        for r in range(5):
            for c in range(5):
                kern[0, 0, r, c] = np.exp(-np.hypot(r - ctr, c - ctr))
        x = Tensor(RngStream(4).normal((1, 1, 8, 8), dtype=np.float32))
        out = se2.lifting_conv(x, Tensor(kern), 4, padding=2).data
        for j in range(1, 4):
            np.testing.assert_allclose(out[:, :, j], out[:, :, 0], atol=1e-5)

    def test_radial_kernel_quarter_turn_orbits_at_n8(self):
        # at N=8 the 90-degree-multiple slices of a radial kernel agree
        # exactly; the interpolated 45-degree slices agree only approximately
        ctr = 2.0
        kern = np.zeros((1, 1, 5, 5), dtype=np.float32)
        for r in range(5):
            for c in range(5):
                kern[0, 0, r, c] = np.exp(-np.hypot(r - ctr, c - ctr))
        x = Tensor(RngStream(4, 1).normal((1, 1, 8, 8), dtype=np.float32))
        out = se2.lifting_conv(x, Tensor(kern), N, padding=2).data
        for j in (2, 4, 6):
            np.testing.assert_allclose(out[:, :, j], out[:, :, 0], atol=1e-5)
        for j in (3, 5, 7):
            np.testing.assert_allclose(out[:, :, j], out[:, :, 1], atol=1e-5)
        # resampling error between the two orbits stays small but nonzero
        rel = (np.linalg.norm(out[:, :, 1] - out[:, :, 0])
               / np.linalg.norm(out[:, :, 0]))
        assert 0.0 < rel < 0.2

    def test_90_degree_equivariance(self):
        rng = RngStream(5)
        x = Tensor(rng.normal((2, 3, 8, 8), dtype=np.float32))
        kern = Tensor(rng.normal((4, 3, 5, 5), dtype=np.float32))
        base = se2.lifting_conv(x, kern, N, padding=2)
        rotated_in = se2.lifting_conv(rotate_image(x, 1), kern, N, padding=2)
        want = se2.rotate_se2_map(base, 1)
        np.testing.assert_allclose(rotated_in.data, want.data, rtol=1e-5, atol=1e-5)

    def test_matches_rotate_then_correlate_oracle(self):
        rng = RngStream(6)
        x = rng.normal((1, 2, 7, 7), dtype=np.float32)
        base = rng.normal((3, 2, 5, 5), dtype=np.float32)
        got = se2.lifting_conv(Tensor(x), Tensor(base), N, padding=2).data
        for j in range(N):
            rotated = np.stack([
                np.stack([naive_rotate_kernel(base[m, c], 2 * np.pi * j / N)
                          for c in range(2)]) for m in range(3)])
            want = naive_conv2d(x, rotated, padding=2)
            np.testing.assert_allclose(got[:, :, j], want, rtol=1e-4, atol=1e-4)


def naive_se2_conv(x, kern, n, padding):
    """Brute-force shift-rotate-correlate loop oracle."""
    b, m_in, _, h, w = x.shape
    m_out = kern.shape[0]
    out = None
    for j in range(n):
        acc = 0.0
        for m in range(m_in):
            for ell in range(n):
                kk = np.stack([[naive_rotate_kernel(kern[o, m, (ell - j) % n],
                                                    2 * np.pi * j / n)]
                               for o in range(m_out)])
                acc = acc + naive_conv2d(x[:, m, ell][:, None], kk, padding=padding)
        if out is None:
            out = np.zeros((b, m_out, n) + acc.shape[-2:])
        out[:, :, j] = acc
    return out


class TestSe2Conv:
    def test_orientation_constant_symmetry(self):
        # input and kernel constant along orientation, spatial kernel radial
        # (so its rotations are exact): output is constant along orientation
        n = 4
        rng = RngStream(7)
        x2d = rng.normal((2, 3, 1, 6, 6), dtype=np.float32)
        x = Tensor(np.repeat(x2d, n, axis=2))
        ctr = 2.0
        radial = np.zeros((4, 3, 1, 5, 5), dtype=np.float32)
        amp = rng.normal((4, 3), dtype=np.float32)
        for r in range(5):
            for c in range(5):
                radial[:, :, 0, r, c] = amp * np.exp(-np.hypot(r - ctr, c - ctr))
        kern = Tensor(np.repeat(radial, n, axis=2))
        out = se2.se2_conv(x, kern, padding=2).data
        for j in range(1, n):
            np.testing.assert_allclose(out[:, :, j], out[:, :, 0],
                                       rtol=1e-4, atol=1e-4)

    def test_cyclic_shift_rotation_equivariance(self):
        rng = RngStream(8)
        x = Tensor(rng.normal((1, 2, N, 6, 6), dtype=np.float32))
        kern = Tensor(rng.normal((3, 2, N, 5, 5), dtype=np.float32))
        base = se2.se2_conv(x, kern, padding=2)
        moved = se2.se2_conv(se2.rotate_se2_map(x, 1), kern, padding=2)
        want = se2.rotate_se2_map(base, 1)
        np.testing.assert_allclose(moved.data, want.data, rtol=1e-4, atol=1e-4)

    def test_matches_brute_force_oracle(self):
        n = 4
        rng = RngStream(9)
        x = rng.normal((1, 2, n, 6, 6), dtype=np.float32)
        kern = rng.normal((2, 2, n, 5, 5), dtype=np.float32)
        got = se2.se2_conv(Tensor(x), Tensor(kern), padding=2).data
        want = naive_se2_conv(x, kern, n, padding=2)
        np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-4)

    def test_orientation_mismatch_raises(self):
        with pytest.raises(ValueError):
            se2.se2_conv(Tensor(np.zeros((1, 2, 8, 6, 6))),
                         Tensor(np.zeros((3, 2, 4, 5, 5))))


class TestSe2TransposedConv:
    def test_adjoint_of_se2_conv(self):
        rng = RngStream(10)
        a = Tensor(rng.normal((1, 2, N, 6, 6), dtype=np.float32))
        kern = Tensor(rng.normal((3, 2, N, 5, 5), dtype=np.float32))
        ya = se2.se2_conv(a, kern, padding=2)
        b = Tensor(rng.normal(ya.shape, dtype=np.float32))
        lhs = float(np.sum(ya.data * b.data))
        rhs = float(np.sum(a.data * se2.se2_transposed_conv(b, kern, padding=2).data))
        assert lhs == pytest.approx(rhs, rel=1e-4)

    def test_strided_equivariance(self):
        rng = RngStream(11)
        x = Tensor(rng.normal((1, 3, N, 5, 5), dtype=np.float32))
        kern = Tensor(rng.normal((3, 2, N, 3, 3), dtype=np.float32))
        base = se2.se2_transposed_conv(x, kern, stride=2, padding=1)
        moved = se2.se2_transposed_conv(se2.rotate_se2_map(x, 1), kern,
                                        stride=2, padding=1)
        want = se2.rotate_se2_map(base, 1)
        np.testing.assert_allclose(moved.data, want.data, rtol=1e-4, atol=1e-4)


class TestOrientationProject:
    def test_constant_along_orientation(self):
        x2d = RngStream(12).normal((2, 3, 1, 4, 4), dtype=np.float32)
        x = Tensor(np.repeat(x2d, N, axis=2))
        np.testing.assert_allclose(se2.orientation_project(x, "mean").data,
                                   x2d[:, :, 0], rtol=1e-6)

    def test_mean_shift_invariant_bit_exact(self):
        x = Tensor(RngStream(13).normal((2, 3, N, 4, 4), dtype=np.float32))
        base = se2.orientation_project(x, "mean").data
        for k in range(1, N):
            shifted = se2.orientation_project(se2.cyclic_shift(x, k), "mean").data
            np.testing.assert_allclose(shifted, base, rtol=1e-6, atol=1e-7)

    def test_max_of_range_is_max_regardless_of_shift(self):
        vals = np.arange(1.0, 9.0, dtype=np.float32).reshape(1, 1, 8, 1, 1)
        x = Tensor(np.broadcast_to(vals, (1, 1, 8, 3, 3)).copy())
        for k in range(8):
            out = se2.orientation_project(se2.cyclic_shift(x, k), "max")
            np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 8.0,
                                                            dtype=np.float32))


class TestCyclicShift:
    def test_zero_is_identity(self):
        x = Tensor(RngStream(14).normal((1, 2, N, 3, 3), dtype=np.float32))
        np.testing.assert_array_equal(se2.cyclic_shift(x, 0).data, x.data)

    def test_full_cycle_is_identity(self):
        x = Tensor(RngStream(15).normal((1, 2, N, 3, 3), dtype=np.float32))
        np.testing.assert_array_equal(se2.cyclic_shift(x, N).data, x.data)

    def test_group_law(self):
        x = Tensor(RngStream(16).normal((1, 2, N, 3, 3), dtype=np.float32))
        out = se2.cyclic_shift(se2.cyclic_shift(x, 3), 5)
        np.testing.assert_array_equal(out.data, x.data)


class TestRotateImage:
    def test_four_turns_identity(self):
        x = Tensor(RngStream(17).normal((1, 1, 4, 4), dtype=np.float32))
        np.testing.assert_array_equal(rotate_image(x, 4).data, x.data)

    def test_composition(self):
        x = Tensor(RngStream(18).normal((1, 1, 5, 5), dtype=np.float32))
        np.testing.assert_array_equal(rotate_image(rotate_image(x, 1), 1).data,
                                      rotate_image(x, 2).data)

    def test_hand_checked_permutation(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(rotate_image(x, 1).data,
                                      np.array([[2.0, 4.0], [1.0, 3.0]]))

    def test_non_square_raises(self):
        with pytest.raises(ValueError):
            rotate_image(Tensor(np.zeros((1, 1, 3, 4))), 1)


class TestOrientationBatchNorm:
    def test_constant_input_zero_before_scale(self):
        rm, rv = np.zeros(2), np.ones(2)
        x = Tensor(np.full((3, 2, N, 4, 4), 5.0))
        out = se2.orientation_batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)),
                                         rm, rv)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-5)

    def test_shifted_batch_same_stats_shifted_output(self):
        rng = RngStream(19)
        x = Tensor(rng.normal((3, 2, N, 4, 4), dtype=np.float32))
        g, b = Tensor(rng.normal((2,), dtype=np.float32)), Tensor(rng.normal((2,), dtype=np.float32))
        rm1, rv1 = np.zeros(2), np.ones(2)
        rm2, rv2 = np.zeros(2), np.ones(2)
        base = se2.orientation_batch_norm(x, g, b, rm1, rv1)
        shifted = se2.orientation_batch_norm(se2.cyclic_shift(x, 3), g, b, rm2, rv2)
        np.testing.assert_allclose(rm1, rm2, rtol=1e-6)
        np.testing.assert_allclose(rv1, rv2, rtol=1e-6)
        np.testing.assert_allclose(shifted.data, se2.cyclic_shift(base, 3).data,
                                   rtol=1e-5, atol=1e-6)

    def test_stats_match_loop_oracle(self):
        rng = RngStream(20)
        x = rng.normal((3, 2, N, 4, 4))
        rm, rv = np.zeros(2), np.ones(2)
        se2.orientation_batch_norm(Tensor(x, dtype=np.float64), Tensor(np.ones(2)),
                                   Tensor(np.zeros(2)), rm, rv, momentum=0.0)
        for c in range(2):
            vals = [x[b, c, o, i, j] for b in range(3) for o in range(N)
                    for i in range(4) for j in range(4)]
            assert rm[c] == pytest.approx(np.mean(vals), rel=1e-6)
            assert rv[c] == pytest.approx(np.var(vals), rel=1e-6)

    def test_batch_of_one_raises(self):
        rm, rv = np.zeros(2), np.ones(2)
        with pytest.raises(ValueError, match="batch"):
            se2.orientation_batch_norm(Tensor(np.zeros((1, 2, N, 4, 4))),
                                       Tensor(np.ones(2)), Tensor(np.zeros(2)),
                                       rm, rv)


class TestEquivarianceChain:
    def test_full_chain_quarter_turn(self):
        """lifting -> OBN(eval) -> leaky -> pool -> se2 -> pool, at k*90 deg."""
        rng = RngStream(21)
        x = Tensor(rng.normal((2, 3, 12, 12), dtype=np.float32))
        lift_k = Tensor(rng.normal((4, 3, 5, 5), dtype=np.float32))
        conv_k = Tensor(rng.normal((5, 4, N, 5, 5), dtype=np.float32))
        g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
        rm, rv = np.zeros(4), np.ones(4)

        def net(img):
            h = se2.lifting_conv(img, lift_k, N, padding=2)
            h = se2.orientation_batch_norm(h, g, b, rm.copy(), rv.copy(), train=False)
            h = leaky_relu(h)
            h = se2.spatial_max_pool(h)
            h = se2.se2_conv(h, conv_k, padding=2)
            return se2.spatial_max_pool(h)

        base = net(x)
        for k in (1, 2, 3):
            moved = net(rotate_image(x, k))
            want = se2.rotate_se2_map(base, k)
            np.testing.assert_allclose(moved.data, want.data,
                                       rtol=1e-4, atol=1e-3)

    def test_projection_invariance_after_chain(self):
        rng = RngStream(22)
        x = Tensor(rng.normal((1, 2, 8, 8), dtype=np.float32))
        lift_k = Tensor(rng.normal((3, 2, 5, 5), dtype=np.float32))
        base = se2.orientation_project(se2.lifting_conv(x, lift_k, N, padding=2),
                                       "mean")
        for k in (1, 2, 3):
            moved = se2.orientation_project(
                se2.lifting_conv(rotate_image(x, k), lift_k, N, padding=2), "mean")
            want = rotate_image(base, k)
            denom = np.abs(want.data) + 1e-6
            assert np.max(np.abs(moved.data - want.data) / denom) < 1e-4


class TestLayerGradients:
    def test_layers_pass_grad_check(self):
        rng = RngStream(23)
        with default_dtype(np.float64):
            x = Tensor(rng.normal((2, 2, 6, 6)) * 0.5)
            lift_k = Tensor(rng.normal((2, 2, 5, 5)) * 0.3, requires_grad=True)
            conv_k = Tensor(rng.normal((2, 2, 4, 5, 5)) * 0.3, requires_grad=True)
            tk = Tensor(rng.normal((2, 2, 4, 3, 3)) * 0.3, requires_grad=True)
            g = Tensor(np.ones(2), requires_grad=True)
            b = Tensor(np.zeros(2), requires_grad=True)
            rm, rv = np.zeros(2), np.ones(2)

            def build():
                h = se2.lifting_conv(x, lift_k, 4, padding=2)
                h = se2.orientation_batch_norm(h, g, b, rm.copy(), rv.copy())
                h = leaky_relu(h)
                h = se2.spatial_max_pool(h)
                h = se2.se2_conv(h, conv_k, padding=2)
                h = se2.se2_transposed_conv(h, tk, stride=2, padding=1)
                p = se2.orientation_project(h, "mean")
                return tsum(p * p)

            err = grad_check(build, [lift_k, conv_k, tk, g, b])
        assert err < 1e-5
