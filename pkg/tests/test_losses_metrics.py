"""還原損失與影像品質指標"""

import math

import numpy as np
import pytest

from app.core.exceptions import DimensionError
from app.core.gradcheck import gradcheck
from app.core.tensor import Tensor
from app.models.perceptual import PerceptualProxy
from app.services.losses import perceptual_loss, smooth_l1, total_loss
from app.services.metrics import PSNR_CAP, gaussian_window, psnr, ssim


def smooth_l1_oracle(y: np.ndarray, t: np.ndarray, beta: float) -> float:
    e = np.abs(y - t)
    return float(np.mean(np.where(e < beta, 0.5 * e * e / beta, e - 0.5 * beta)))


@pytest.fixture(scope="module")
def proxy() -> PerceptualProxy:
    return PerceptualProxy(seed=1234, dtype="f64")


def image(rng, h: int = 8, w: int = 8) -> Tensor:
    return Tensor(rng.uniform(size=(3, h, w)), dtype="f64")


class TestSmoothL1:
    def test_zero_when_equal(self, rng):
        y = image(rng)
        assert smooth_l1(y, y).item() == 0.0

    def test_linear_branch(self):
        y = Tensor([2.0], dtype="f64")
        t = Tensor([0.0], dtype="f64")
        assert smooth_l1(y, t, beta=1.0).item() == pytest.approx(1.5)

    def test_quadratic_branch(self):
        y = Tensor([0.5], dtype="f64")
        t = Tensor([0.0], dtype="f64")
        assert smooth_l1(y, t, beta=1.0).item() == pytest.approx(0.125)

    def test_matches_oracle(self, rng):
        y, t = image(rng), image(rng)
        for beta in (0.05, 0.5, 1.0):
            assert smooth_l1(y, t, beta).item() == pytest.approx(smooth_l1_oracle(y.data, t.data, beta))

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            smooth_l1(image(rng, 8, 8), image(rng, 8, 4))


class TestPerceptual:
    def test_proxy_is_frozen_and_reproducible(self, proxy):
        assert all(not p.requires_grad for p in proxy.parameters())
        assert PerceptualProxy(seed=1234, dtype="f64").checksum() == proxy.checksum()
        assert PerceptualProxy(seed=99, dtype="f64").checksum() != proxy.checksum()

    def test_three_taps(self, proxy, rng):
        taps = proxy(image(rng))
        assert [t.shape for t in taps] == [(8, 8, 8), (16, 4, 4), (32, 2, 2)]

    def test_zero_when_equal_and_symmetric(self, proxy, rng):
        y, t = image(rng), image(rng)
        assert perceptual_loss(y, y, proxy).item() == 0.0
        assert perceptual_loss(y, t, proxy).item() == pytest.approx(perceptual_loss(t, y, proxy).item())
        assert perceptual_loss(y, t, proxy).item() > 0.0

    def test_sum_of_tap_mse(self, proxy, rng):
        y, t = image(rng), image(rng)
        expected = sum(float(np.mean((a.data - b.data) ** 2)) for a, b in zip(proxy(y), proxy(t)))
        assert perceptual_loss(y, t, proxy).item() == pytest.approx(expected)

    def test_shape_mismatch(self, proxy, rng):
        with pytest.raises(DimensionError):
            perceptual_loss(image(rng, 8, 8), image(rng, 4, 8), proxy)


class TestTotalLoss:
    def test_lambda_zero_is_smooth_l1(self, proxy, rng):
        y, t = image(rng), image(rng)
        assert total_loss(y, t, proxy, lam=0.0).item() == smooth_l1(y, t).item()

    def test_weighted_sum(self, proxy, rng):
        y, t = image(rng), image(rng)
        expected = smooth_l1(y, t).item() + 0.04 * perceptual_loss(y, t, proxy).item()
        assert total_loss(y, t, proxy).item() == pytest.approx(expected)

    def test_gradient(self, proxy, rng):
        # 遠離 smooth-L1 與 ReLU 的轉折點
        t = image(rng)
        y = Tensor(t.data + rng.uniform(0.1, 0.3, size=t.shape) * rng.choice([-1.0, 1.0], size=t.shape), dtype="f64")
        assert gradcheck(lambda a: total_loss(a, t, proxy, lam=0.04, beta=0.05), [y], max_entries=24) < 1e-5


class TestPSNR:
    def test_identical_images_hit_cap(self, rng):
        x = rng.uniform(size=(3, 8, 8))
        assert psnr(x, x) == PSNR_CAP

    def test_known_mse(self):
        y = np.full((3, 4, 4), 0.5)
        assert psnr(y, y + 0.1) == pytest.approx(20.0)
        assert psnr(y, y + 0.01) == pytest.approx(40.0)

    def test_double_loop_oracle(self, rng):
        for _ in range(100):
            y = rng.uniform(size=(3, 6, 5))
            t = rng.uniform(size=(3, 6, 5))
            total = 0.0
            for c in range(3):
                for i in range(6):
                    for j in range(5):
                        total += (y[c, i, j] - t[c, i, j]) ** 2
            expected = 10.0 * math.log10(1.0 / (total / 90.0))
            assert psnr(y, t) == pytest.approx(expected, abs=1e-9)

    def test_accepts_tensors(self, rng):
        x = image(rng)
        assert psnr(x, Tensor(x.data + 0.1, dtype="f64")) == pytest.approx(20.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


class TestSSIM:
    def test_window(self):
        win = gaussian_window()
        assert win.shape == (11, 11)
        assert win.sum() == pytest.approx(1.0)
        assert win[5, 5] == win.max()
        np.testing.assert_allclose(win, win.T)

    def test_identical_is_one(self, rng):
        x = rng.uniform(size=(3, 16, 16))
        assert ssim(x, x) == pytest.approx(1.0)

    def test_symmetric_and_bounded(self, rng):
        x = rng.uniform(size=(3, 16, 16))
        y = np.clip(x + rng.normal(0, 0.2, size=x.shape), 0, 1)
        assert ssim(x, y) == pytest.approx(ssim(y, x))
        assert -1.0 <= ssim(x, y) < 1.0

    def test_sliding_window_oracle(self, rng):
        win = gaussian_window()
        c1, c2 = 0.01 ** 2, 0.03 ** 2
        for _ in range(100):
            y = rng.uniform(size=(2, 13, 12))
            t = np.clip(y + rng.normal(0, 0.1, size=y.shape), 0, 1)
            channel_scores = []
            for c in range(2):
                local = []
                for i in range(13 - 10):
                    for j in range(12 - 10):
                        a = y[c, i:i + 11, j:j + 11]
                        b = t[c, i:i + 11, j:j + 11]
                        mu_a, mu_b = np.sum(win * a), np.sum(win * b)
                        var_a = np.sum(win * (a - mu_a) ** 2)
                        var_b = np.sum(win * (b - mu_b) ** 2)
                        cov = np.sum(win * (a - mu_a) * (b - mu_b))
                        local.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                                     / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
                channel_scores.append(np.mean(local))
            assert ssim(y, t) == pytest.approx(np.mean(channel_scores), abs=1e-6)

    def test_more_noise_means_lower_ssim(self, rng):
        x = rng.uniform(size=(1, 24, 24))
        noise = rng.normal(size=x.shape)
        assert ssim(x, x + 0.05 * noise) > ssim(x, x + 0.3 * noise)

    def test_constant_shift_keeps_structure(self):
        x = np.tile(np.linspace(0, 0.5, 16), (16, 1))
        assert ssim(x, x + 0.01) > 0.99

    def test_too_small(self):
        with pytest.raises(DimensionError, match="11"):
            ssim(np.zeros((3, 10, 16)), np.zeros((3, 10, 16)))
