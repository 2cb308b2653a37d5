"""Engine verification: direct convolution oracles, finite differences,
degeneracies, graph mechanics, and the FQW1 tensor file layout.
"""

import struct

import numpy as np
import pytest

from freqnet import autodiff as ad
from freqnet.errors import InvalidInputError
from freqnet.selfcheck import finite_difference_grad, relative_grad_error


def conv2d_direct(x, w, b, stride, padding):
    """Literal seven-loop convolution definition (the oracle)."""
    bsz, cin, h, wdt = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wdt + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((bsz, cout, ho, wo))
    for bi in range(bsz):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    acc = b[o]
                    for c in range(cin):
                        for i in range(k):
                            for j in range(k):
                                acc += w[o, c, i, j] * xp[bi, c, y * stride + i, xx * stride + j]
                    out[bi, o, y, xx] = acc
    return out


def bilinear_sample_direct(plane, py, px):
    """Scalar bilinear lookup with zero outside the plane (the oracle)."""
    h, w = plane.shape
    y0, x0 = int(np.floor(py)), int(np.floor(px))
    fy, fx = py - y0, px - x0
    acc = 0.0
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            if 0 <= yy < h and 0 <= xx < w:
                acc += wy * wx * plane[yy, xx]
    return acc


class TestConv2d:
    def test_matches_direct_definition(self):
        rng = np.random.default_rng(0)
        for stride, padding, k, h, w in ((1, 1, 3, 5, 6), (2, 1, 4, 6, 8), (1, 0, 1, 4, 4)):
            x = rng.normal(size=(2, 3, h, w))
            wt = rng.normal(size=(4, 3, k, k))
            b = rng.normal(size=4)
            got = ad.conv2d(ad.Tensor(x), ad.Tensor(wt), ad.Tensor(b), stride, padding)
            want = conv2d_direct(x, wt, b, stride, padding)
            assert got.data.shape == want.shape
            assert np.max(np.abs(got.data - want)) < 1e-12

    def test_identity_1x1_kernel(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 3, 4, 4))
        w = np.eye(3).reshape(3, 3, 1, 1)
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(np.zeros(3)))
        assert np.max(np.abs(out.data - x)) < 1e-15

    def test_zero_weights_give_bias_plane(self):
        x = np.ones((1, 2, 5, 5))
        w = np.zeros((3, 2, 3, 3))
        b = np.array([1.0, -2.0, 0.5])
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), padding=1)
        for o in range(3):
            assert np.all(out.data[0, o] == b[o])

    def test_non_integral_output_rejected(self):
        x = ad.Tensor(np.zeros((1, 1, 5, 5)))
        w = ad.Tensor(np.zeros((1, 1, 2, 2)))
        b = ad.Tensor(np.zeros(1))
        with pytest.raises(InvalidInputError):
            ad.conv2d(x, w, b, stride=2, padding=0)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            ad.conv2d(
                ad.Tensor(np.zeros((1, 2, 4, 4))),
                ad.Tensor(np.zeros((1, 3, 3, 3))),
                ad.Tensor(np.zeros(1)),
                padding=1,
            )

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 2, 4, 5))
        w = rng.normal(size=(2, 2, 3, 3))
        b = rng.normal(size=2)

        def run(xa, wa, ba):
            out = ad.conv2d(ad.Tensor(xa), ad.Tensor(wa), ad.Tensor(ba), 1, 1)
            return float((out.data * out.data).sum())

        xt, wt, bt = (ad.Tensor(a, requires_grad=True) for a in (x, w, b))
        out = ad.conv2d(xt, wt, bt, 1, 1)
        ad.backward(ad.tensor_sum(ad.mul(out, out)))
        fd = finite_difference_grad(run, [x, w, b])
        for t, f in zip((xt, wt, bt), fd):
            assert relative_grad_error(t.grad, f) < 1e-4


class TestDepthwise:
    def test_channel_isolation_bit_identical(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 4, 6, 6))
        w = rng.normal(size=(4, 1, 3, 3))
        b = rng.normal(size=4)
        full = ad.depthwise_conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), padding=1)
        noised = x.copy()
        noised[:, [0, 2, 3]] = rng.normal(size=(2, 3, 6, 6)) * 100
        other = ad.depthwise_conv2d(ad.Tensor(noised), ad.Tensor(w), ad.Tensor(b), padding=1)
        assert np.array_equal(full.data[:, 1], other.data[:, 1])

    def test_matches_block_diagonal_embedding(self):
        # A depthwise conv is a dense conv whose weight is block-diagonal
        # across channels; embed and compare.
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 3, 5, 5))
        w = rng.normal(size=(3, 1, 3, 3))
        b = rng.normal(size=3)
        dense = np.zeros((3, 3, 3, 3))
        for c in range(3):
            dense[c, c] = w[c, 0]
        got = ad.depthwise_conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), padding=1)
        want = conv2d_direct(x, dense, b, 1, 1)
        assert np.max(np.abs(got.data - want)) < 1e-12

    def test_identity_kernels(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 2, 4, 4))
        w = np.zeros((2, 1, 3, 3))
        w[:, 0, 1, 1] = 1.0
        out = ad.depthwise_conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(np.zeros(2)), padding=1)
        assert np.max(np.abs(out.data - x)) < 1e-15

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(1, 3, 4, 4))
        w = rng.normal(size=(3, 1, 3, 3))
        b = rng.normal(size=3)

        def run(xa, wa, ba):
            out = ad.depthwise_conv2d(ad.Tensor(xa), ad.Tensor(wa), ad.Tensor(ba), padding=1)
            return float((out.data * out.data).sum())

        xt, wt, bt = (ad.Tensor(a, requires_grad=True) for a in (x, w, b))
        out = ad.depthwise_conv2d(xt, wt, bt, padding=1)
        ad.backward(ad.tensor_sum(ad.mul(out, out)))
        fd = finite_difference_grad(run, [x, w, b])
        for t, f in zip((xt, wt, bt), fd):
            assert relative_grad_error(t.grad, f) < 1e-4

    def test_bad_weight_shape(self):
        with pytest.raises(InvalidInputError):
            ad.depthwise_conv2d(
                ad.Tensor(np.zeros((1, 2, 4, 4))),
                ad.Tensor(np.zeros((2, 2, 3, 3))),
                ad.Tensor(np.zeros(2)),
                padding=1,
            )


class TestDeformable:
    def test_zero_offsets_equal_standard_conv(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        off = np.zeros((2, 18, 7, 6))
        got = ad.deformable_conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), ad.Tensor(off))
        want = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), stride=1, padding=1)
        assert got.data.shape == want.data.shape
        assert np.max(np.abs(got.data - want.data)) < 1e-12

    def test_single_tap_matches_bilinear_oracle(self):
        # 1x1 kernel with unit weight reduces the op to a pure bilinear
        # lookup at (y + dy, x + dx), checkable point by point.
        rng = np.random.default_rng(8)
        plane = rng.normal(size=(5, 5))
        off = rng.uniform(-2.3, 2.3, size=(1, 2, 5, 5))
        x = ad.Tensor(plane[None, None])
        w = ad.Tensor(np.ones((1, 1, 1, 1)))
        b = ad.Tensor(np.zeros(1))
        out = ad.deformable_conv2d(x, w, b, ad.Tensor(off))
        for y in range(5):
            for xx in range(5):
                want = bilinear_sample_direct(
                    plane, y + off[0, 0, y, xx], xx + off[0, 1, y, xx]
                )
                assert abs(out.data[0, 0, y, xx] - want) < 1e-12

    def test_integer_shift_on_constant_input_interior(self):
        # Shifting every sample by exactly one pixel changes nothing where
        # the shifted taps stay inside the plane.
        x = np.full((1, 2, 8, 8), 3.0)
        rng = np.random.default_rng(9)
        w = rng.normal(size=(2, 2, 3, 3))
        b = rng.normal(size=2)
        zero = ad.deformable_conv2d(
            ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), ad.Tensor(np.zeros((1, 18, 8, 8)))
        )
        shifted = ad.deformable_conv2d(
            ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), ad.Tensor(np.ones((1, 18, 8, 8)))
        )
        assert np.max(np.abs(zero.data[:, :, 2:-2, 2:-2] - shifted.data[:, :, 2:-2, 2:-2])) < 1e-12

    def test_gradients_incl_offsets_match_finite_differences(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(2, 2, 3, 3)) * 0.5
        b = rng.normal(size=2) * 0.1
        # Fractional parts away from 0/1 keep finite differences off the
        # bilinear kinks.
        off = rng.choice([-1.0, 1.0], size=(1, 18, 5, 5)) * rng.uniform(
            0.2, 0.8, size=(1, 18, 5, 5)
        )

        def run(xa, wa, ba, oa):
            out = ad.deformable_conv2d(ad.Tensor(xa), ad.Tensor(wa), ad.Tensor(ba), ad.Tensor(oa))
            return float((out.data * out.data).sum())

        ts = [ad.Tensor(a, requires_grad=True) for a in (x, w, b, off)]
        out = ad.deformable_conv2d(*ts)
        ad.backward(ad.tensor_sum(ad.mul(out, out)))
        fd = finite_difference_grad(run, [x, w, b, off])
        for t, f in zip(ts, fd):
            assert relative_grad_error(t.grad, f) < 1e-4

    def test_offset_shape_and_even_kernel_rejected(self):
        x = ad.Tensor(np.zeros((1, 2, 4, 4)))
        w = ad.Tensor(np.zeros((2, 2, 3, 3)))
        b = ad.Tensor(np.zeros(2))
        with pytest.raises(InvalidInputError):
            ad.deformable_conv2d(x, w, b, ad.Tensor(np.zeros((1, 18, 4, 5))))
        with pytest.raises(InvalidInputError):
            ad.deformable_conv2d(
                x, ad.Tensor(np.zeros((2, 2, 2, 2))), b,
                ad.Tensor(np.zeros((1, 8, 4, 4))),
            )


class TestElementwiseOps:
    def test_leaky_relu_values_and_subgradient(self):
        x = ad.Tensor(np.array([-2.0, -0.5, 0.0, 0.5, 2.0]), requires_grad=True)
        out = ad.leaky_relu(x, 0.2)
        assert np.allclose(out.data, [-0.4, -0.1, 0.0, 0.5, 2.0])
        ad.backward(ad.tensor_sum(out))
        # Subgradient at exactly zero is the slope.
        assert np.allclose(x.grad, [0.2, 0.2, 0.2, 1.0, 1.0])

    def test_leaky_relu_bad_slope(self):
        with pytest.raises(InvalidInputError):
            ad.leaky_relu(ad.Tensor(np.zeros(3)), 1.5)

    def test_no_broadcasting_anywhere(self):
        a = ad.Tensor(np.zeros((2, 3)))
        b = ad.Tensor(np.zeros((2, 1)))
        for op in (ad.add, ad.sub, ad.mul):
            with pytest.raises(InvalidInputError):
                op(a, b)
        with pytest.raises(InvalidInputError):
            ad.weighted_sum([a, b], [1.0, 1.0])

    def test_weighted_sum_values_and_grads(self):
        rng = np.random.default_rng(11)
        xs = [rng.normal(size=(3, 3)) for _ in range(3)]
        ws = [0.5, -1.0, 2.0]
        ts = [ad.Tensor(x, requires_grad=True) for x in xs]
        out = ad.weighted_sum(ts, ws)
        assert np.allclose(out.data, sum(w * x for w, x in zip(ws, xs)))
        ad.backward(ad.tensor_sum(out))
        for w, t in zip(ws, ts):
            assert np.allclose(t.grad, w)

    def test_sqrt_rejects_negative(self):
        with pytest.raises(InvalidInputError):
            ad.sqrt(ad.Tensor(np.array([-1.0])))

    def test_channel_scale(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(2, 3, 2, 2))
        w = np.array([1.0, 0.0, -2.0])
        t = ad.Tensor(x, requires_grad=True)
        out = ad.channel_scale(t, w)
        for c in range(3):
            assert np.allclose(out.data[:, c], w[c] * x[:, c])
        ad.backward(ad.tensor_sum(out))
        for c in range(3):
            assert np.allclose(t.grad[:, c], w[c])


class TestBackwardMechanics:
    def test_sum_gradient_is_ones(self):
        x = ad.Tensor(np.random.default_rng(13).normal(size=(4, 5)), requires_grad=True)
        ad.backward(ad.tensor_sum(x))
        assert np.array_equal(x.grad, np.ones((4, 5)))

    def test_half_sum_of_squares_gradient_is_x(self):
        rng = np.random.default_rng(14)
        data = rng.normal(size=(3, 3))
        x = ad.Tensor(data, requires_grad=True)
        loss = ad.scale(ad.tensor_sum(ad.mul(x, x)), 0.5)
        ad.backward(loss)
        assert np.max(np.abs(x.grad - data)) < 1e-12

    def test_repeated_backward_accumulates_exactly(self):
        data = np.arange(6, dtype=np.float64).reshape(2, 3)
        x = ad.Tensor(data, requires_grad=True)
        loss = ad.scale(ad.tensor_sum(ad.mul(x, x)), 0.5)
        ad.backward(loss)
        first = x.grad.copy()
        ad.backward(loss)
        assert np.array_equal(x.grad, 2.0 * first)
        x.zero_grad()
        assert x.grad is None

    def test_shared_subexpression_fan_out(self):
        # y = sum(x * x + x * x) must give 4x, proving fan-out accumulation.
        data = np.array([1.0, -2.0, 3.0])
        x = ad.Tensor(data, requires_grad=True)
        sq = ad.mul(x, x)
        ad.backward(ad.tensor_sum(ad.add(sq, sq)))
        assert np.allclose(x.grad, 4.0 * data)

    def test_non_scalar_loss_rejected(self):
        x = ad.Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(InvalidInputError):
            ad.backward(ad.mul(x, x))

    def test_inference_graphs_stay_detached(self):
        # No requires_grad input -> no parents retained, flat memory.
        x = ad.Tensor(np.ones((1, 1, 4, 4)))
        w = ad.Tensor(np.ones((1, 1, 3, 3)))
        out = ad.conv2d(x, w, ad.Tensor(np.zeros(1)), padding=1)
        assert out._parents == ()
        assert out._vjp is None
        assert not out.requires_grad

    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(77)
            x = ad.Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
            w = ad.Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
            b = ad.Tensor(rng.normal(size=4), requires_grad=True)
            off = ad.Tensor(rng.normal(size=(2, 18, 6, 6)) * 0.3, requires_grad=True)
            out = ad.deformable_conv2d(x, w, b, off)
            out = ad.leaky_relu(out, 0.2)
            loss = ad.tensor_sum(ad.mul(out, out))
            ad.backward(loss)
            return loss.data.copy(), x.grad.copy(), w.grad.copy(), off.grad.copy()

        a = run()
        b = run()
        for left, right in zip(a, b):
            assert np.array_equal(left, right)


class TestTensorFile:
    def test_round_trip_and_byte_layout(self, tmp_path):
        rng = np.random.default_rng(15)
        tensors = {
            "alpha.w": rng.normal(size=(2, 3)).astype(np.float32),
            "beta.b": rng.normal(size=(4,)).astype(np.float32),
        }
        path = tmp_path / "t.fqw"
        ad.save_tensors(path, tensors)
        back = ad.load_tensors(path)
        assert set(back) == {"alpha.w", "beta.b"}
        assert np.array_equal(back["alpha.w"], tensors["alpha.w"])
        assert np.array_equal(back["beta.b"], tensors["beta.b"])

        # Byte-level oracle for the header of the first record.
        raw = path.read_bytes()
        assert raw[:4] == b"FQW1"
        (count,) = struct.unpack("<I", raw[4:8])
        assert count == 2
        (nlen,) = struct.unpack("<I", raw[8:12])
        assert raw[12 : 12 + nlen].decode() == "alpha.w"
        pos = 12 + nlen
        (rank,) = struct.unpack("<I", raw[pos : pos + 4])
        assert rank == 2
        dims = struct.unpack("<2I", raw[pos + 4 : pos + 12])
        assert dims == (2, 3)
        payload = np.frombuffer(raw, dtype="<f4", offset=pos + 12, count=6)
        assert np.array_equal(payload.reshape(2, 3), tensors["alpha.w"])

    def test_f32_storage_quantizes(self, tmp_path):
        x = {"v": np.array([1.0 + 1e-12], dtype=np.float64)}
        path = tmp_path / "q.fqw"
        ad.save_tensors(path, x)
        assert ad.load_tensors(path)["v"].dtype == np.float32

    def test_corrupt_files_rejected(self, tmp_path):
        bad = tmp_path / "bad.fqw"
        bad.write_bytes(b"WXYZ" + b"\x00" * 8)
        with pytest.raises(InvalidInputError):
            ad.load_tensors(bad)
        good = tmp_path / "trunc.fqw"
        ad.save_tensors(good, {"a": np.zeros((2, 2), dtype=np.float32)})
        good.write_bytes(good.read_bytes()[:-3])
        with pytest.raises(InvalidInputError):
            ad.load_tensors(good)
