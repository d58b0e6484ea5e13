"""影像品質指標：PSNR（MAX=1）與 SSIM（11×11 Gaussian 視窗，σ=1.5）"""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import convolve2d

from app.core.exceptions import DimensionError

PSNR_CAP = 100.0
MSE_FLOOR = 1e-10

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_L = 1.0


def _as_array(x) -> np.ndarray:
    return np.asarray(x.numpy() if hasattr(x, "numpy") else x, dtype=np.float64)


def psnr(y, t) -> float:
    """10·log10(1/MSE)；MSE < 1e-10 時回傳 100 dB"""
    y, t = _as_array(y), _as_array(t)
    if y.shape != t.shape:
        raise DimensionError(f"psnr: 形狀不符 {list(y.shape)} vs {list(t.shape)}")
    mse = float(np.mean((y - t) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """正規化（總和為 1）的二維 Gaussian 視窗"""
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def _ssim_channel(x: np.ndarray, y: np.ndarray, win: np.ndarray) -> float:
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2

    def filt(a: np.ndarray) -> np.ndarray:
        return convolve2d(a, win, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x ** 2
    var_y = filt(y * y) - mu_y ** 2
    cov = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def ssim(y, t) -> float:
    """
    平均結構相似度（逐通道計算後取平均）

    參數:
        y, t: [C×H×W] 或 [H×W]，H, W ≥ 11

    返回:
        [-1, 1] 之間的值
    """
    y, t = _as_array(y), _as_array(t)
    if y.shape != t.shape:
        raise DimensionError(f"ssim: 形狀不符 {list(y.shape)} vs {list(t.shape)}")
    if y.ndim == 2:
        y, t = y[None], t[None]
    if y.ndim != 3 or y.shape[1] < SSIM_WINDOW or y.shape[2] < SSIM_WINDOW:
        raise DimensionError(f"ssim: 影像必須至少 {SSIM_WINDOW}×{SSIM_WINDOW}，實際 {list(y.shape)}")
    win = gaussian_window()
    return float(np.mean([_ssim_channel(y[c], t[c], win) for c in range(y.shape[0])]))
