"""Haar analysis/synthesis: exactness, oracle equivalence, gradients."""

import numpy as np
import pytest

from defog import tensor as T, wavelet
from defog.errors import ShapeError
from defog.tensor import Tensor, gradcheck
from defog.wavelet import WaveletBands, dwt2, idwt2

from conftest import rand64


class TestAnalysis:
    def test_constant_image(self):
        c = 0.35
        bands = dwt2(Tensor(np.full((1, 2, 6, 6), c, np.float32)))
        np.testing.assert_allclose(bands.ll.data, 4 * c, rtol=1e-6)
        for band in (bands.lh, bands.hl, bands.hh):
            np.testing.assert_allclose(band.data, 0.0, atol=1e-6)

    def test_single_block_values(self):
        a, b, c, d = 1.0, 2.0, 4.0, 8.0
        x = Tensor(np.array([[[[a, b], [c, d]]]], dtype=np.float32))
        bands = dwt2(x)
        assert bands.ll.item() == a + b + c + d
        assert bands.lh.item() == -a - b + c + d
        assert bands.hl.item() == -a + b - c + d
        assert bands.hh.item() == a - b - c + d

    def test_equals_fixed_filter_conv(self, rng):
        x = rng.standard_normal((1, 1, 8, 8))  # float64: bit-level agreement
        w = wavelet.analysis_conv_weight(1, dtype=np.float64)
        conv = T.conv2d(Tensor(x), Tensor(w), stride=2).data
        bands = dwt2(Tensor(x))
        for i, band in enumerate(bands):
            np.testing.assert_array_equal(band.data, conv[:, i : i + 1])

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError, match="pad"):
            dwt2(Tensor(np.zeros((1, 1, 5, 6), np.float32)))
        with pytest.raises(ShapeError):
            dwt2(Tensor(np.zeros((1, 1, 6, 7), np.float32)))

    def test_shift_covariance(self, rng):
        x = rng.standard_normal((1, 1, 12, 12)).astype(np.float32)
        bands = dwt2(Tensor(x))
        shifted = dwt2(Tensor(np.roll(x, (2, 2), axis=(2, 3))))
        for b0, b1 in zip(bands, shifted):
            np.testing.assert_array_equal(np.roll(b0.data, (1, 1), axis=(2, 3)), b1.data)


class TestSynthesis:
    @pytest.mark.parametrize("h,w", [(2, 2), (4, 6), (8, 8), (16, 10), (32, 32)])
    def test_perfect_reconstruction(self, rng, h, w):
        x = rng.standard_normal((2, 3, h, w)).astype(np.float32)
        y = idwt2(dwt2(Tensor(x))).data
        assert np.abs(y - x).max() < 1e-5

    def test_ll_four_gives_ones(self):
        four = Tensor(np.full((1, 1, 3, 3), 4.0, np.float32))
        zero = Tensor(np.zeros((1, 1, 3, 3), np.float32))
        y = idwt2(WaveletBands(four, zero, zero, zero))
        np.testing.assert_allclose(y.data, 1.0, atol=1e-7)

    def test_energy_relation(self, rng):
        x = rng.standard_normal((1, 2, 10, 14)).astype(np.float32)
        bands = dwt2(Tensor(x))
        band_energy = sum(float((b.data.astype(np.float64) ** 2).sum()) for b in bands)
        direct = float((x.astype(np.float64) ** 2).sum())
        assert abs(band_energy / 4.0 - direct) / direct < 1e-4

    def test_band_shape_mismatch_rejected(self):
        a = Tensor(np.zeros((1, 1, 2, 2), np.float32))
        b = Tensor(np.zeros((1, 1, 2, 3), np.float32))
        with pytest.raises(ShapeError):
            WaveletBands(a, a, a, b)


class TestGradients:
    def test_dwt2(self, rng):
        x = rand64(rng, 1, 2, 6, 8)

        def fn():
            bands = dwt2(x)
            s = T.sum_all(T.tanh(bands.ll))
            for band in (bands.lh, bands.hl, bands.hh):
                s = s + T.sum_all(T.tanh(band * 0.5))
            return s

        gradcheck(fn, [x], rng=rng)

    def test_idwt2(self, rng):
        parts = [rand64(rng, 1, 2, 3, 4) for _ in range(4)]

        def fn():
            return T.sum_all(T.tanh(idwt2(WaveletBands(*parts))))

        gradcheck(fn, parts, rng=rng)

    def test_roundtrip_gradient_is_identity(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 4, 4)), requires_grad=True)
        with T.Tape() as tape:
            T.backward(T.sum_all(idwt2(dwt2(x))))
        np.testing.assert_allclose(tape.grad_of(x), 1.0, atol=1e-12)
