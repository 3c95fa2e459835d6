"""Objective terms against hand-derived values and the independent reference."""

import math

import numpy as np
import pytest

from defog import losses, reference, tensor as T
from defog.errors import ShapeError
from defog.losses import (
    FeatureStub, LossWeights, RandomFeatureNet, SsimConfig, VggStyleFeatureNet,
    adversarial_losses, combine_terms, metric_report_line, ms_ssim_loss,
    perceptual_loss, psnr, smooth_l1, ssim, ssim_map, total_loss,
)
from defog.tensor import Tensor, gradcheck

from conftest import rand64


def img(rng, *shape, lo=0.0, hi=1.0, dtype=np.float32):
    return Tensor(rng.uniform(lo, hi, shape).astype(dtype))


class TestSmoothL1:
    def test_identical_zero(self, rng):
        a = img(rng, 1, 3, 8, 8)
        assert smooth_l1(a, a).item() == 0.0

    def test_hand_values(self):
        a = Tensor(np.zeros((1, 3, 4, 4), np.float32))
        b = Tensor(np.full((1, 3, 4, 4), 0.5, np.float32))
        np.testing.assert_allclose(smooth_l1(a, b).item(), 0.125, rtol=1e-6)
        c = Tensor(np.full((1, 3, 4, 4), 2.0, np.float32))
        np.testing.assert_allclose(smooth_l1(a, c).item(), 1.5, rtol=1e-6)

    def test_continuity_at_one(self):
        a = Tensor(np.zeros((1, 1, 1, 1), np.float64))
        b = Tensor(np.ones((1, 1, 1, 1), np.float64))
        np.testing.assert_allclose(smooth_l1(a, b).item(), 0.5, atol=1e-12)
        bb = Tensor(np.full((1, 1, 1, 1), 1.0 + 1e-9))
        np.testing.assert_allclose(smooth_l1(a, bb).item(), 0.5, atol=1e-6)

    def test_symmetry(self, rng):
        a, b = img(rng, 1, 3, 6, 6), img(rng, 1, 3, 6, 6, lo=-1, hi=2)
        assert smooth_l1(a, b).item() == smooth_l1(b, a).item()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            smooth_l1(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 3, 4, 5))))

    def test_gradient(self, rng):
        a = rand64(rng, 1, 3, 4, 4, lo=-2, hi=2)
        b = rand64(rng, 1, 3, 4, 4)
        gradcheck(lambda: smooth_l1(a, b), [a, b], rng=rng)


class TestPerceptual:
    def test_identity_zero(self, rng):
        a = img(rng, 1, 3, 16, 16)
        fx = RandomFeatureNet()
        assert perceptual_loss(a, a, fx).item() == 0.0

    def test_stub_reduces_to_mse(self, rng):
        a, b = img(rng, 2, 3, 8, 8), img(rng, 2, 3, 8, 8)
        got = perceptual_loss(a, b, FeatureStub()).item()
        want = float(((a.data - b.data) ** 2).mean())
        np.testing.assert_allclose(got, want, rtol=1e-6)

    def test_gradients_reach_pred_only(self, rng):
        a = Tensor(rng.uniform(0, 1, (1, 3, 12, 12)).astype(np.float32), requires_grad=True)
        b = Tensor(rng.uniform(0, 1, (1, 3, 12, 12)).astype(np.float32), requires_grad=True)
        fx = RandomFeatureNet()
        with T.Tape() as tape:
            T.backward(perceptual_loss(a, b, fx))
        assert tape.grad_of(a) is not None
        assert tape.grad_of(b) is None

    def test_deterministic_across_instances(self, rng):
        a, b = img(rng, 1, 3, 12, 12), img(rng, 1, 3, 12, 12)
        v1 = perceptual_loss(a, b, RandomFeatureNet()).item()
        v2 = perceptual_loss(a, b, RandomFeatureNet()).item()
        assert v1 == v2

    def test_vgg_style_tap_shapes(self, rng):
        fx = VggStyleFeatureNet()
        taps = fx.taps(img(rng, 1, 3, 32, 32))
        assert [t.shape for t in taps] == [
            (1, 64, 32, 32), (1, 128, 16, 16), (1, 256, 8, 8),
        ]

    def test_vgg_style_load_state_validates(self):
        fx = VggStyleFeatureNet()
        with pytest.raises(ShapeError):
            fx.load_state({f"conv{i}.weight": np.zeros((1, 1, 3, 3)) for i in range(7)}
                          | {f"conv{i}.bias": np.zeros(1) for i in range(7)})

    def test_gradient(self, rng):
        a = rand64(rng, 1, 3, 8, 8, lo=0.1, hi=0.9)
        b = rand64(rng, 1, 3, 8, 8, lo=0.1, hi=0.9)
        gradcheck(lambda: perceptual_loss(a, b, FeatureStub()), [a], n_probes=10, rng=rng)


class TestSsim:
    def test_self_similarity(self, rng):
        a = img(rng, 1, 3, 16, 16)
        lum, cs = ssim_map(a, a)
        np.testing.assert_array_equal(lum.data, 1.0)
        np.testing.assert_array_equal(cs.data, 1.0)
        assert abs(ssim(a, a) - 1.0) < 1e-6

    def test_inverted_image_dissimilar(self, rng):
        a = img(rng, 1, 1, 16, 16, lo=0.0, hi=0.3)
        b = Tensor(1.0 - a.data)
        assert ssim(a, b) < 1.0

    def test_constant_images_closed_form(self):
        cfg = SsimConfig()
        a = Tensor(np.full((1, 1, 12, 12), 0.2, np.float64))
        b = Tensor(np.full((1, 1, 12, 12), 0.4, np.float64))
        lum, cs = ssim_map(a, b, cfg)
        want_l = (2 * 0.2 * 0.4 + cfg.t1) / (0.2**2 + 0.4**2 + cfg.t1)
        np.testing.assert_allclose(lum.data, want_l, rtol=1e-6)
        np.testing.assert_allclose(cs.data, 1.0, atol=1e-5)

    def test_window_sums_to_one(self):
        k = losses.gaussian_window(11, 1.5, np.float64)
        np.testing.assert_allclose(k.sum(), 1.0, atol=1e-12)
        assert k.shape == (11, 11)

    def test_small_image_rejected(self, rng):
        a = img(rng, 1, 1, 10, 16)
        with pytest.raises(ShapeError):
            ssim_map(a, a)

    def test_matches_reference_route(self, rng):
        a = img(rng, 1, 3, 20, 20)
        b = img(rng, 1, 3, 20, 20)
        got = ssim(a, b)
        want = reference.ssim_reference(a.data[0], b.data[0])
        np.testing.assert_allclose(got, want, atol=1e-6)


class TestMsSsim:
    def test_identity_zero(self, rng):
        a = img(rng, 1, 3, 64, 64)
        assert ms_ssim_loss(a, a).item() == 0.0

    def test_single_scale_degeneracy(self, rng):
        a, b = img(rng, 1, 3, 32, 32), img(rng, 1, 3, 32, 32)
        cfg = SsimConfig(scales=1)
        got = ms_ssim_loss(a, b, cfg).item()
        lum, cs = ssim_map(a, b, cfg)
        want = 1.0 - float((lum.data * cs.data).mean())
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)

    def test_matches_clean_room_reference(self, rng):
        for _ in range(3):
            a = img(rng, 1, 3, 64, 64, dtype=np.float64)
            b = img(rng, 1, 3, 64, 64, dtype=np.float64)
            got = ms_ssim_loss(a, b, SsimConfig(scales=3)).item()
            want = 1.0 - reference.msssim_reference(a.data[0], b.data[0], scales=3)
            np.testing.assert_allclose(got, want, atol=1e-5)

    def test_bounded_on_unit_range(self, rng):
        for _ in range(5):
            a, b = img(rng, 1, 1, 48, 48), img(rng, 1, 1, 48, 48)
            v = ms_ssim_loss(a, b, SsimConfig(scales=2)).item()
            assert 0.0 <= v <= 1.0

    def test_too_many_scales_reports_max(self, rng):
        a = img(rng, 1, 1, 32, 32)
        with pytest.raises(ShapeError, match="S = 2"):
            ms_ssim_loss(a, a, SsimConfig(scales=3))

    def test_gradient(self, rng):
        a = rand64(rng, 1, 1, 24, 24, lo=0.1, hi=0.9)
        b = rand64(rng, 1, 1, 24, 24, lo=0.1, hi=0.9)
        cfg = SsimConfig(scales=2)
        gradcheck(lambda: ms_ssim_loss(a, b, cfg), [a, b], n_probes=10, rng=rng)


class TestAdversarial:
    def test_fooled_discriminator(self):
        near_one = Tensor(np.full((4, 1), 1.0 - 1e-7, np.float64))
        half = Tensor(np.full((4, 1), 0.5, np.float64))
        g_loss, _ = adversarial_losses(half, half, near_one)
        assert g_loss.item() < 1e-6

    def test_hand_values(self):
        half = Tensor(np.full((3, 1), 0.5, np.float64))
        g_loss, d_loss = adversarial_losses(half, half, half)
        np.testing.assert_allclose(g_loss.item(), math.log(2.0), rtol=1e-12)
        np.testing.assert_allclose(d_loss.item(), 2.0 * math.log(2.0), rtol=1e-12)

    def test_out_of_range_rejected(self):
        bad = Tensor(np.array([[0.5], [1.0]]))
        good = Tensor(np.array([[0.5], [0.5]]))
        with pytest.raises(ShapeError):
            adversarial_losses(bad, good, good)
        with pytest.raises(ShapeError):
            adversarial_losses(good, Tensor(np.array([[0.0], [0.5]])), good)

    def test_gradient(self, rng):
        pr = rand64(rng, 4, 1, lo=0.2, hi=0.8)
        pd = rand64(rng, 4, 1, lo=0.2, hi=0.8)
        pg = rand64(rng, 4, 1, lo=0.2, hi=0.8)
        gradcheck(lambda: adversarial_losses(pr, pd, pg)[0], [pg], rng=rng)
        gradcheck(lambda: adversarial_losses(pr, pd, pg)[1], [pr, pd], rng=rng)


class TestTotal:
    def test_stub_terms_sum(self):
        assert combine_terms(1.0, 1.0, 1.0, 1.0) == 1.2105

    def test_linearity_in_each_term(self):
        w = LossWeights()
        base = combine_terms(0.0, 0.0, 0.0, 0.0, w)
        assert base == 0.0
        assert combine_terms(1.0, 0.0, 0.0, 0.0, w) == 1.0
        assert combine_terms(0.0, 1.0, 0.0, 0.0, w) == w.alpha
        assert combine_terms(0.0, 0.0, 1.0, 0.0, w) == w.beta
        assert combine_terms(0.0, 0.0, 0.0, 1.0, w) == w.gamma

    def test_default_weights(self):
        w = LossWeights()
        assert (w.alpha, w.beta, w.gamma) == (0.2, 0.01, 0.0005)
        with pytest.raises(ShapeError):
            LossWeights(alpha=-0.1)

    def test_perfect_prediction_near_zero(self, rng):
        a = img(rng, 1, 3, 64, 64)
        fooled = Tensor(np.full((1, 1), 1.0 - 1e-7, np.float32))
        total, parts = total_loss(a, a, FeatureStub(), fooled)
        assert total.item() < 1e-5
        assert parts["l1"] == 0.0 and parts["msssim"] == 0.0 and parts["perc"] == 0.0

    def test_breakdown_consistent(self, rng):
        a, b = img(rng, 1, 3, 64, 64), img(rng, 1, 3, 64, 64)
        d = Tensor(np.full((1, 1), 0.5, np.float32))
        total, parts = total_loss(a, b, FeatureStub(), d)
        want = combine_terms(parts["l1"], parts["msssim"], parts["perc"], parts["adv"])
        np.testing.assert_allclose(total.item(), want, rtol=1e-5)

    def test_gradient_of_weighted_sum(self, rng):
        a = rand64(rng, 1, 3, 22, 22, lo=0.15, hi=0.85)
        b = rand64(rng, 1, 3, 22, 22, lo=0.15, hi=0.85)
        d = rand64(rng, 1, 1, lo=0.3, hi=0.7)
        cfg = SsimConfig(scales=1)

        def fn():
            total, _ = total_loss(a, b, FeatureStub(), d, cfg=cfg)
            return total

        gradcheck(fn, [a, d], n_probes=8, rng=rng)


class TestPsnr:
    def test_identical_infinite(self, rng):
        a = img(rng, 1, 3, 8, 8)
        assert psnr(a, a) == math.inf

    def test_uniform_difference_20db(self):
        a = Tensor(np.zeros((1, 3, 8, 8), np.float64))
        b = Tensor(np.full((1, 3, 8, 8), 0.1, np.float64))
        np.testing.assert_allclose(psnr(a, b), 20.0, atol=1e-9)

    def test_uniform_16_255_closed_form(self):
        a = Tensor(np.zeros((1, 3, 8, 8), np.float64))
        b = Tensor(np.full((1, 3, 8, 8), 16.0 / 255.0, np.float64))
        np.testing.assert_allclose(psnr(a, b), 20.0 * math.log10(255.0 / 16.0), atol=1e-9)

    def test_max_value_scaling(self, rng):
        a = Tensor(np.zeros((1, 1, 4, 4)))
        b = Tensor(np.full((1, 1, 4, 4), 16.0))
        np.testing.assert_allclose(psnr(a, b, max_value=255.0),
                                   20.0 * math.log10(255.0 / 16.0), atol=1e-9)


class TestReportFormat:
    def test_line_shape(self):
        line = metric_report_line("img_0001.png", 24.04789, 0.91237)
        assert line == "img_0001.png\tPSNR=24.0479\tSSIM=0.9124"
