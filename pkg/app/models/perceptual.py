"""感知損失代理網路：以固定種子初始化、完全凍結的三階段卷積金字塔"""

import numpy as np

from app.core import functional as F
from app.core.module import Module
from app.core.tensor import Tensor
from app.models.layers import Conv2d

# (輸入通道, 輸出通道, 步幅)
PROXY_STAGES = ((3, 8, 1), (8, 16, 2), (16, 32, 2))


class PerceptualProxy(Module):
    """
    凍結的隨機卷積特徵金字塔，每個階段後（ReLU 之後）各有一個擷取點

    參數:
        seed: 權重初始化種子（記錄於檢查點，損失因此可重現）
        dtype: "f32" 或 "f64"
    """

    def __init__(self, seed: int = 1234, dtype: str = "f32"):
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.stages = [Conv2d(c_in, c_out, 3, rng, dtype, stride=stride) for c_in, c_out, stride in PROXY_STAGES]
        self.requires_grad_(False)

    def forward(self, x: Tensor) -> list[Tensor]:
        taps = []
        for conv in self.stages:
            x = F.relu(conv(x))
            taps.append(x)
        return taps
