"""PSNR/SSIM against closed forms and direct-convolution oracles."""

import math

import numpy as np
import pytest

from invrescale.metrics import (MetricReport, crop_border, evaluate_planes,
                                evaluate_rgb, psnr, psnr_display, ssim,
                                write_metrics_csv)


class TestPsnr:
    def test_identical_is_infinite_capped(self):
        a = np.random.default_rng(0).random((8, 8)) * 255
        assert psnr(a, a.copy()) == math.inf
        assert psnr_display(psnr(a, a.copy())) == 99.0

    def test_one_step_error(self):
        a = np.zeros((16, 16))
        got = psnr(a, a + 1.0)
        assert got == pytest.approx(20 * math.log10(255.0), abs=1e-12)
        assert got == pytest.approx(48.1308, abs=1e-3)

    def test_scalar_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.random((12, 9)) * 255
        b = rng.random((12, 9)) * 255
        got = psnr(a, b)
        se = 0.0
        for u, v in zip(a.reshape(-1), b.reshape(-1)):
            se += (u - v) ** 2
        want = 10 * math.log10(255 ** 2 / (se / a.size))
        assert abs(got - want) <= 1e-9

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a = rng.random((8, 8)) * 255
        b = rng.random((8, 8)) * 255
        assert psnr(a, b) == psnr(b, a)

    def test_monotone_in_noise_amplitude(self):
        rng = np.random.default_rng(3)
        a = rng.random((16, 16)) * 255
        noise = rng.standard_normal((16, 16))
        values = [psnr(a, a + amp * noise) for amp in (1.0, 2.0, 4.0, 8.0, 16.0)]
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def ssim_oracle(a, b, peak=255.0):
    """Direct 2-D windowed computation, no separable tricks."""
    window = 11
    sigma = 1.5
    half = (window - 1) // 2
    t = np.arange(window) - half
    g1 = np.exp(-(t ** 2) / (2 * sigma ** 2))
    g1 /= g1.sum()
    w2 = np.outer(g1, g1)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    h, wdt = a.shape
    vals = []
    for i in range(h - window + 1):
        for j in range(wdt - window + 1):
            pa = a[i:i + window, j:j + window]
            pb = b[i:i + window, j:j + window]
            mu_a = (w2 * pa).sum()
            mu_b = (w2 * pb).sum()
            va = (w2 * pa * pa).sum() - mu_a ** 2
            vb = (w2 * pb * pb).sum() - mu_b ** 2
            cov = (w2 * pa * pb).sum() - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                        / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestSsim:
    def test_identical_is_one(self):
        a = np.random.default_rng(4).random((16, 16)) * 255
        assert ssim(a, a.copy()) == pytest.approx(1.0, abs=1e-12)

    def test_inverted_structure_is_negative(self):
        rng = np.random.default_rng(5)
        a = (rng.random((16, 16)) > 0.5) * 255.0
        assert ssim(a, 255.0 - a) < 0.0

    def test_direct_convolution_oracle(self):
        rng = np.random.default_rng(6)
        a = rng.random((14, 15)) * 255
        b = np.clip(a + 20 * rng.standard_normal((14, 15)), 0, 255)
        assert abs(ssim(a, b) - ssim_oracle(a, b)) <= 1e-9

    def test_symmetry(self):
        rng = np.random.default_rng(7)
        a = rng.random((12, 12)) * 255
        b = rng.random((12, 12)) * 255
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_small_plane_rejected(self):
        with pytest.raises(ValueError, match="window"):
            ssim(np.zeros((10, 16)), np.zeros((10, 16)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((16, 16)), np.zeros((16, 17)))


class TestReporting:
    def test_border_crop_recorded(self):
        rng = np.random.default_rng(8)
        a = rng.random((20, 20))
        report = evaluate_planes("x", a, a.copy(), border=2)
        assert report.border_crop == 2
        assert report.ssim == pytest.approx(1.0, abs=1e-12)

    def test_crop_border(self):
        a = np.arange(36.0).reshape(6, 6)
        np.testing.assert_array_equal(crop_border(a, 1), a[1:-1, 1:-1])
        with pytest.raises(ValueError):
            crop_border(a, 3)

    def test_rgb_variant(self):
        rng = np.random.default_rng(9)
        a = rng.random((16, 16, 3))
        same = evaluate_rgb("x", a, a.copy(), border=0)
        assert same.ssim == pytest.approx(1.0, abs=1e-12)
        assert psnr_display(same.psnr_db) == 99.0
        # A pure chroma change must move the RGB score more than the luma one.
        b = a.copy()
        b[:, :, 2] = np.clip(b[:, :, 2] + 0.3, 0, 1)
        from invrescale.data import rgb_to_y
        luma = evaluate_planes("x", rgb_to_y(a), rgb_to_y(b), border=0)
        rgb = evaluate_rgb("x", a, b, border=0)
        assert rgb.ssim < luma.ssim

    def test_csv_emission(self, tmp_path):
        rows = [MetricReport("a.png", math.inf, 1.0, 2),
                MetricReport("b.png", 31.5, 0.875, 2)]
        path = tmp_path / "m.csv"
        write_metrics_csv(path, rows)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "name,psnr_db,ssim"
        assert lines[1] == "a.png,99.0,1.0"
        assert lines[2] == "b.png,31.5,0.875"
