"""還原損失：L_all = smooth-L1 + λ·perceptual"""

from __future__ import annotations

from typing import Optional

from app.core import functional as F
from app.core.exceptions import DimensionError
from app.core.tensor import Tensor
from app.models.perceptual import PerceptualProxy


def smooth_l1(y: Tensor, t: Tensor, beta: float = 1.0) -> Tensor:
    """逐元素 0.5·e²/β（|e|<β）或 |e|−0.5·β，取平均"""
    return F.smooth_l1(y, t, beta)


def perceptual_loss(y: Tensor, t: Tensor, proxy: PerceptualProxy) -> Tensor:
    """凍結代理網路三個擷取點的特徵 MSE 總和"""
    if y.shape != t.shape:
        raise DimensionError(f"perceptual_loss: 形狀不符 {list(y.shape)} vs {list(t.shape)}")
    total: Optional[Tensor] = None
    for fy, ft in zip(proxy(y), proxy(t)):
        diff = F.sub(fy, ft)
        term = F.mean(F.mul(diff, diff))
        total = term if total is None else F.add(total, term)
    return total


def total_loss(y: Tensor, t: Tensor, proxy: PerceptualProxy, lam: float = 0.04, beta: float = 1.0) -> Tensor:
    """
    L_all = L_1 + λ·L_perc

    參數:
        y: 還原結果
        t: 乾淨影像
        proxy: 感知代理網路
        lam: λ（0 時不計算感知項）
        beta: smooth-L1 門檻
    """
    loss = smooth_l1(y, t, beta)
    if lam == 0:
        return loss
    return F.add(loss, F.mul(perceptual_loss(y, t, proxy), lam))
