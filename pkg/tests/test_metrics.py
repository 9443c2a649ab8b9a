import math

import numpy as np
import pytest
import torch

from flowtok.metrics import (
    causality_probe,
    frechet_distance,
    psnr,
    spearman,
    ssim,
    token_usage_histogram,
)
from flowtok.nets import DecoderConfig, EncoderConfig, Tokenizer


def gen(seed=0):
    g = torch.Generator()
    g.manual_seed(seed)
    return g


class TestPsnr:
    def test_identity_capped(self):
        a = torch.rand(3, 16, 16, generator=gen(1))
        assert psnr(a, a.clone()) == 99.0

    def test_known_mse(self):
        a = torch.zeros(1, 16, 16)
        b = torch.full((1, 16, 16), 0.1)
        assert psnr(a, b, peak=1.0) == pytest.approx(20.0, abs=1e-6)

    def test_scale_cancellation(self):
        g = gen(2)
        a = torch.rand(3, 16, 16, generator=g)
        b = torch.rand(3, 16, 16, generator=g)
        assert psnr(a, b, peak=1.0) == pytest.approx(psnr(a * 0.5, b * 0.5, peak=0.5), abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(torch.zeros(2, 2), torch.zeros(3, 3))

    def test_bad_peak(self):
        with pytest.raises(ValueError):
            psnr(torch.zeros(2, 2), torch.zeros(2, 2), peak=0.0)


class TestSsim:
    def test_identity(self):
        a = torch.rand(3, 16, 16, generator=gen(3))
        assert ssim(a, a.clone()) == pytest.approx(1.0, abs=1e-9)

    def test_constant_images_closed_form(self):
        # zero variances: only the luminance term survives
        c1, c2 = 0.3, 0.6
        a = torch.full((16, 16), c1)
        b = torch.full((16, 16), c2)
        C1 = 0.01**2
        expect = (2 * c1 * c2 + C1) / (c1**2 + c2**2 + C1)
        assert ssim(a, b) == pytest.approx(expect, abs=1e-9)

    def test_symmetry(self):
        g = gen(4)
        a = torch.rand(1, 16, 16, generator=g)
        b = torch.rand(1, 16, 16, generator=g)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_too_small_image(self):
        with pytest.raises(ValueError):
            ssim(torch.zeros(8, 8), torch.zeros(8, 8))

    def test_range(self):
        g = gen(5)
        for seed in range(3):
            a = torch.rand(1, 12, 12, generator=g)
            b = torch.rand(1, 12, 12, generator=g)
            assert -1.0 <= ssim(a, b) <= 1.0


class TestFrechet:
    def test_identical_sets_near_zero(self):
        f = np.random.RandomState(0).randn(200, 8)
        assert frechet_distance(f, f.copy()) <= 1e-4

    def test_two_gaussians_1d(self):
        rs = np.random.RandomState(1)
        n = 10_000
        a = rs.randn(n, 1)
        b = rs.randn(n, 1) + 1.0
        d = frechet_distance(a, b)
        assert abs(d - 1.0) < 0.05

    def test_symmetric(self):
        rs = np.random.RandomState(2)
        a, b = rs.randn(300, 5), rs.randn(300, 5) * 1.3 + 0.2
        assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), rel=1e-6)

    def test_nonnegative(self):
        rs = np.random.RandomState(3)
        for _ in range(5):
            a, b = rs.randn(50, 6), rs.randn(50, 6)
            assert frechet_distance(a, b) >= 0.0

    def test_small_sample_regularized(self):
        # fewer samples than dimensions still yields a finite value
        rs = np.random.RandomState(4)
        d = frechet_distance(rs.randn(5, 16), rs.randn(5, 16))
        assert math.isfinite(d)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            frechet_distance(np.zeros((0, 4)), np.zeros((10, 4)))

    def test_torch_inputs_accepted(self):
        g = gen(6)
        a = torch.randn(100, 4, generator=g)
        b = torch.randn(100, 4, generator=g)
        assert math.isfinite(frechet_distance(a.numpy(), b.numpy()))


class TestTokenUsageHistogram:
    def test_all_selector(self):
        h = token_usage_histogram(16, 1000, "all", gen(7))
        assert torch.equal(h, torch.ones(16, dtype=torch.float64))

    def test_first_k_matches_counting(self):
        K = 16
        h = token_usage_histogram(K, 100_000, "first-k", gen(8))
        expect = torch.tensor([(K - i) / K for i in range(K)], dtype=torch.float64)
        assert (h - expect).abs().max().item() < 0.02
        assert all(a > b for a, b in zip(h.tolist(), h.tolist()[1:]))

    def test_interval_selector_balanced(self):
        h = token_usage_histogram(16, 100_000, "interval", gen(9))
        ratio = h.max().item() / h.min().item()
        assert ratio < 1.5

    def test_interval_beats_first_k_balance(self):
        hi = token_usage_histogram(16, 50_000, "interval", gen(10))
        hf = token_usage_histogram(16, 50_000, "first-k", gen(11))
        ratio_i = hi.max().item() / hi.min().item()
        ratio_f = hf.max().item() / hf.min().item()
        assert ratio_i < ratio_f

    def test_frequencies_in_unit_interval(self):
        for sel in ("interval", "all", "first-k"):
            h = token_usage_histogram(16, 5000, sel, gen(12))
            assert (h >= 0).all() and (h <= 1).all()

    def test_deterministic_given_seed(self):
        a = token_usage_histogram(16, 5000, "interval", gen(13))
        b = token_usage_histogram(16, 5000, "interval", gen(13))
        assert torch.equal(a, b)

    def test_unknown_selector(self):
        with pytest.raises(ValueError):
            token_usage_histogram(16, 10, "nested", gen(14))


class TestSpearman:
    def test_perfect_decreasing(self):
        assert spearman([1, 2, 3, 4], [8.0, 6.0, 4.0, 2.0]) == pytest.approx(-1.0)

    def test_perfect_increasing(self):
        assert spearman([1, 2, 3, 4], [1.0, 2.0, 5.0, 9.0]) == pytest.approx(1.0)

    def test_one_adjacent_swap(self):
        # n = 4 with one adjacent inversion: rho = -0.8
        assert spearman([1, 2, 3, 4], [8.0, 6.0, 7.0, 5.0]) == pytest.approx(-0.8)

    def test_monotone_invariance(self):
        xs = [1, 2, 3, 4, 5]
        ys = [10.0, 8.0, 5.0, 4.0, 1.0]
        assert spearman(xs, ys) == pytest.approx(spearman(xs, [y**3 for y in ys]))


class TestCausalityProbe:
    @staticmethod
    def micro_tokenizer():
        torch.manual_seed(20)
        return Tokenizer(
            EncoderConfig(image_side=16, patch_size=8, d_e=32, depth=2, heads=2,
                          K=16, d_token=16),
            DecoderConfig(latent_side=16, patch_size=8, d_model=32, depth=2, heads=2,
                          token_dim=16, n_tokens=16, repa_layer=1),
        )

    def test_untrained_curve_flat(self):
        # zero-velocity decoder: the normalized error is the plain velocity
        # magnitude, identical across prefix lengths up to noise draws
        tok = self.micro_tokenizer()
        images = torch.rand(64, 3, 16, 16, generator=gen(21)) * 2 - 1
        curve = causality_probe(tok, images, ks=[2, 4, 8, 16], rng=gen(22))
        errs = [e for _, e in curve]
        assert max(errs) / min(errs) < 1.05

    def test_perfect_decoder_zero_error(self):
        tok = self.micro_tokenizer()
        images = torch.rand(8, 3, 16, 16, generator=gen(23)) * 2 - 1

        class PerfectDecoder:
            def __init__(self, x):
                self.x = x

            def __call__(self, z, r, t, cond):
                tb = t.reshape(-1, 1, 1, 1)
                return (z - self.x) / tb, None

        class FakeTok:
            enc_cfg = tok.enc_cfg
            codec = tok.codec

            def encode(self, ims):
                return tok.encode(ims)

        fake = FakeTok()
        # bind the probe's decoder to the ideal field for these images
        fake.decoder = PerfectDecoder(images)
        curve = causality_probe(fake, images, ks=[2, 8, 16], rng=gen(24))
        assert all(e < 1e-8 for _, e in curve)

    def test_k_bounds(self):
        tok = self.micro_tokenizer()
        images = torch.rand(4, 3, 16, 16, generator=gen(25))
        with pytest.raises(ValueError):
            causality_probe(tok, images, ks=[0], rng=gen(26))
        with pytest.raises(ValueError):
            causality_probe(tok, images, ks=[17], rng=gen(27))

    def test_returns_pairs(self):
        tok = self.micro_tokenizer()
        images = torch.rand(4, 3, 16, 16, generator=gen(28))
        curve = causality_probe(tok, images, ks=[4, 16], rng=gen(29))
        assert [k for k, _ in curve] == [4, 16]
        assert all(math.isfinite(e) for _, e in curve)
