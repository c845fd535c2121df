import numpy as np
import pytest

from causalclean import ShapeError
from causalclean.data import (DegradationSpec, PSNR_CAP, degrade, measure,
                              psnr, rgb_to_y, ssim)


def naive_ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Double-loop windowed SSIM oracle with its own Gaussian weights."""
    coords = np.arange(window) - (window - 1) / 2.0
    g1 = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g1 /= g1.sum()
    kern = np.outer(g1, g1)
    c1, c2 = k1 ** 2, k2 ** 2
    h, w = a.shape
    vals = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            wa = a[i:i + window, j:j + window]
            wb = b[i:i + window, j:j + window]
            mua = (kern * wa).sum()
            mub = (kern * wb).sum()
            va = (kern * wa * wa).sum() - mua ** 2
            vb = (kern * wb * wb).sum() - mub ** 2
            cov = (kern * wa * wb).sum() - mua * mub
            vals.append(((2 * mua * mub + c1) * (2 * cov + c2))
                        / ((mua ** 2 + mub ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestPsnr:
    def test_tenth_offset_is_twenty_db(self):
        a = np.random.default_rng(1).random((3, 16, 16)) * 0.5
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_identical_inputs_hit_cap(self):
        a = np.random.default_rng(2).random((3, 8, 8))
        assert psnr(a, a.copy()) == PSNR_CAP

    def test_doubling_mse_drops_three_db(self):
        a = np.zeros((1, 32, 32))
        d1 = psnr(a, a + 0.05)
        d2 = psnr(a, a + 0.05 * np.sqrt(2.0))
        assert d1 - d2 == pytest.approx(3.0102999566, abs=1e-8)

    def test_monotone_in_noise_level(self):
        clean = np.random.default_rng(3).random((1, 3, 64, 64))
        values = []
        for s in (10.0, 30.0, 50.0):
            spec = DegradationSpec("gaussian_noise", s, s, seed=11)
            values.append(psnr(degrade(clean, spec)[0], clean[0]))
        assert values[0] > values[1] > values[2]

    def test_y_channel_mode(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((3, 16, 16)), rng.random((3, 16, 16))
        ya, yb = rgb_to_y(a), rgb_to_y(b)
        expected = 10.0 * np.log10(1.0 / np.mean((ya - yb) ** 2))
        assert psnr(a, b, mode="y_channel") == pytest.approx(expected, abs=1e-12)

    def test_y_channel_is_bt601(self):
        frame = np.zeros((3, 2, 2))
        frame[0] = 1.0  # pure red
        assert np.allclose(rgb_to_y(frame), 0.299)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((3, 4, 4)), np.zeros((3, 5, 5)))


class TestSsim:
    def test_self_similarity_is_one(self):
        x = np.random.default_rng(5).random((1, 16, 16))
        assert abs(ssim(x, x.copy()) - 1.0) < 1e-9

    def test_anticorrelated_checkerboard_negative(self):
        tile = np.indices((16, 16)).sum(axis=0) % 2
        x = tile[None].astype(np.float64)
        assert ssim(x, 1.0 - x) < 0.0

    def test_constant_offset_below_one_and_matches_oracle(self):
        x = np.full((1, 16, 16), 0.3)
        y = np.full((1, 16, 16), 0.8)
        value = ssim(x, y)
        assert value < 1.0
        assert value == pytest.approx(naive_ssim(x[0], y[0]), abs=1e-12)

    def test_matches_naive_oracle_on_random_frames(self):
        rng = np.random.default_rng(6)
        a, b = rng.random((32, 32)), rng.random((32, 32))
        mine = ssim(a[None], b[None])
        assert abs(mine - naive_ssim(a, b)) < 1e-6

    def test_frame_smaller_than_window_rejected(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))

    def test_in_valid_range(self):
        rng = np.random.default_rng(7)
        a, b = rng.random((2, 1, 16, 16)), rng.random((2, 1, 16, 16))
        assert -1.0 <= ssim(a, b) <= 1.0


class TestMeasure:
    def test_report_lines(self):
        rng = np.random.default_rng(8)
        gt = rng.random((2, 3, 16, 16))
        noisy = np.clip(gt + rng.normal(0, 0.05, gt.shape), 0, 1)
        report = measure(noisy, gt)
        assert len(report.psnr_frames) == 2
        text = "\n".join(report.lines())
        assert "psnr_mean = " in text and "ssim_mean = " in text
        assert report.ssim_mean <= 1.0
