"""Spectral transforms against the naive DFT oracle, plus gradients."""

import numpy as np
import pytest

from defog import fft, reference, tensor as T
from defog.errors import ShapeError
from defog.fft import ComplexGrid, SpectralTransform, complex_to_real, irfft2, real_to_complex, rfft2
from defog.tensor import Tape, Tensor, backward, gradcheck

from conftest import rand64


class TestFft1d:
    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6, 7, 8, 12, 13, 16, 20, 27, 32])
    def test_matches_naive_dft(self, rng, n):
        x = rng.standard_normal((2, n)) + 1j * rng.standard_normal((2, n))
        got = fft.fft1d(x)
        want = reference.naive_dft(x)
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)

    @pytest.mark.parametrize("n", [4, 6, 11, 16])
    def test_inverse_roundtrip(self, rng, n):
        x = rng.standard_normal((3, n)) + 1j * rng.standard_normal((3, n))
        np.testing.assert_allclose(fft.fft1d(fft.fft1d(x), inverse=True), x, atol=1e-10)


class TestRfft2:
    def test_delta_image_flat_spectrum(self):
        x = np.zeros((1, 1, 4, 6), np.float32)
        x[0, 0, 0, 0] = 1.0
        spec = rfft2(Tensor(x))
        np.testing.assert_allclose(spec.re.data, 1.0, atol=1e-6)
        np.testing.assert_allclose(spec.im.data, 0.0, atol=1e-6)

    def test_constant_image_dc_only(self):
        v = 0.7
        spec = rfft2(Tensor(np.full((1, 1, 5, 8), v, np.float32)))
        s = spec.to_complex()[0, 0]
        np.testing.assert_allclose(s[0, 0], v * 5 * 8, rtol=1e-5)
        s[0, 0] = 0.0
        assert np.abs(s).max() < 1e-3

    def test_matches_naive_dft_7x6(self, rng):
        x = rng.standard_normal((1, 1, 7, 6)).astype(np.float32)
        spec = rfft2(Tensor(x)).to_complex()
        want = reference.naive_dft2(x)[..., : 6 // 2 + 1]
        scale = np.abs(want).max()
        assert np.abs(spec - want).max() / scale < 1e-4

    def test_matches_naive_dft_all_small_sizes(self, rng):
        for h in range(2, 17):
            for w in range(2, 17):
                x = rng.standard_normal((1, 1, h, w)).astype(np.float32)
                spec = rfft2(Tensor(x)).to_complex()
                want = reference.naive_dft2(x)[..., : w // 2 + 1]
                denom = max(np.abs(want).max(), 1e-6)
                assert np.abs(spec - want).max() / denom < 1e-4, (h, w)

    def test_linearity(self, rng):
        a = rng.standard_normal((1, 2, 6, 9)).astype(np.float32)
        b = rng.standard_normal((1, 2, 6, 9)).astype(np.float32)
        s = rfft2(Tensor(2.5 * a - 1.25 * b)).to_complex()
        want = 2.5 * rfft2(Tensor(a)).to_complex() - 1.25 * rfft2(Tensor(b)).to_complex()
        np.testing.assert_allclose(s, want, rtol=1e-3, atol=1e-3)


class TestIrfft2:
    @pytest.mark.parametrize("h,w", [(2, 2), (4, 4), (3, 5), (7, 6), (16, 16), (5, 16)])
    def test_roundtrip(self, rng, h, w):
        x = rng.standard_normal((2, 2, h, w)).astype(np.float32)
        y = irfft2(rfft2(Tensor(x))).data
        assert np.abs(y - x).max() / np.abs(x).max() < 1e-4

    def test_dc_only_gives_ones(self):
        h, w = 4, 6
        re = np.zeros((1, 1, h, w // 2 + 1), np.float32)
        re[0, 0, 0, 0] = h * w
        spec = ComplexGrid(Tensor(re), Tensor(np.zeros_like(re)), w)
        np.testing.assert_allclose(irfft2(spec).data, 1.0, atol=1e-6)

    @pytest.mark.parametrize("h,w", [(4, 6), (5, 7), (8, 8)])
    def test_parseval_with_implied_bins(self, rng, h, w):
        x = rng.standard_normal((1, 1, h, w)).astype(np.float32)
        spec = rfft2(Tensor(x)).to_complex()
        energy = (np.abs(spec) ** 2 * fft.column_weights(w)).sum() / (h * w)
        direct = (x.astype(np.float64) ** 2).sum()
        assert abs(energy - direct) / direct < 1e-3

    def test_width_metadata_validated(self):
        re = Tensor(np.zeros((1, 1, 4, 5), np.float32))
        with pytest.raises(ShapeError):
            ComplexGrid(re, Tensor(np.zeros((1, 1, 4, 5), np.float32)), 12)


class TestRealComplexPacking:
    def test_shapes_and_roundtrip(self, rng):
        x = rng.standard_normal((1, 3, 8, 5)).astype(np.float32)
        # Wf for width 5 is 3; build via rfft2 of a width-5 image
        spec = rfft2(Tensor(x))
        t = complex_to_real(spec)
        assert t.shape == (1, 6, 8, 3)
        back = real_to_complex(t, 5)
        np.testing.assert_array_equal(back.re.data, spec.re.data)
        np.testing.assert_array_equal(back.im.data, spec.im.data)

    def test_pure_real_spectrum_has_zero_imag_half(self):
        x = np.zeros((1, 1, 4, 4), np.float32)
        x[0, 0, 0, 0] = 1.0  # delta: flat, purely real spectrum
        t = complex_to_real(rfft2(Tensor(x)))
        np.testing.assert_allclose(t.data[:, 1:], 0.0, atol=1e-6)

    def test_odd_channels_rejected(self):
        with pytest.raises(ShapeError):
            real_to_complex(Tensor(np.zeros((1, 3, 4, 3), np.float32)), 4)

    def test_zero_spectrum(self):
        spec = real_to_complex(Tensor(np.zeros((1, 2, 4, 3), np.float32)), 4)
        assert np.abs(spec.to_complex()).max() == 0.0


class TestSpectralTransform:
    def test_identity_hook(self, rng):
        st = SpectralTransform(2, np.random.default_rng(3))
        st.use_identity_hook()
        x = rng.standard_normal((1, 2, 8, 8)).astype(np.float32)
        y = st(Tensor(x)).data
        assert np.abs(y - x).max() / np.abs(x).max() < 1e-4

    def test_identity_hook_odd_sizes(self, rng):
        st = SpectralTransform(1, np.random.default_rng(3))
        st.use_identity_hook()
        x = rng.standard_normal((1, 1, 5, 7)).astype(np.float32)
        y = st(Tensor(x)).data
        assert np.abs(y - x).max() / np.abs(x).max() < 1e-4

    def test_zero_input_zero_output(self):
        st = SpectralTransform(2, np.random.default_rng(3))
        y = st(Tensor(np.zeros((1, 2, 6, 6), np.float32)))
        np.testing.assert_allclose(y.data, 0.0, atol=1e-7)

    @pytest.mark.parametrize("h,w", [(2, 2), (5, 7), (8, 6), (3, 9)])
    def test_output_shape_equals_input(self, rng, h, w):
        st = SpectralTransform(2, np.random.default_rng(3))
        x = Tensor(rng.standard_normal((1, 2, h, w)).astype(np.float32))
        assert st(x).shape == x.shape

    def test_channel_mismatch_rejected(self):
        st = SpectralTransform(2, np.random.default_rng(3))
        with pytest.raises(ShapeError):
            st(Tensor(np.zeros((1, 3, 4, 4), np.float32)))

    def test_global_receptive_field(self, rng):
        st = SpectralTransform(2, np.random.default_rng(5))
        st.eval()
        x = rng.standard_normal((1, 2, 8, 8)).astype(np.float32)
        base = st(Tensor(x)).data
        xb = x.copy()
        xb[0, 0, 3, 5] += 1.0
        bumped = st(Tensor(xb)).data
        changed = np.abs(bumped - base) > 1e-9
        assert changed.mean() >= 0.99

    def test_gradcheck_full_unit(self, rng):
        st = SpectralTransform(2, np.random.default_rng(7))
        for p in st.params():
            p.assign(p.value.data.astype(np.float64))
        x = rand64(rng, 1, 2, 8, 8)
        wrt = [x] + [p.value for p in st.params()]
        gradcheck(lambda: T.mean_all(T.tanh(st(x))), wrt, n_probes=8, rng=rng)


class TestSpectralGradients:
    def test_pack_forward(self, rng):
        x = rand64(rng, 1, 2, 4, 6)

        def fn():
            spec = rfft2(x)
            return T.sum_all(T.tanh(complex_to_real(spec) * 0.3))

        gradcheck(fn, [x], rng=rng)

    @pytest.mark.parametrize("w", [6, 7])
    def test_unpack_inverse(self, rng, w):
        wf = w // 2 + 1
        t = rand64(rng, 1, 4, 5, wf)

        def fn():
            return T.sum_all(T.tanh(irfft2(real_to_complex(t, w))))

        gradcheck(fn, [t], rng=rng)

    def test_roundtrip_gradient_is_identity(self, rng):
        # d/dx mean(irfft2(rfft2(x))) must equal d/dx mean(x)
        x = Tensor(rng.standard_normal((1, 1, 6, 6)), requires_grad=True)
        with Tape() as tape:
            backward(T.mean_all(irfft2(rfft2(x))))
        np.testing.assert_allclose(tape.grad_of(x), 1.0 / 36.0, atol=1e-10)
