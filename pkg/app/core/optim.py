"""Adam 優化器（β₁=0.9, β₂=0.999, ε=1e-8）"""

from __future__ import annotations

from typing import Iterable, Union

import numpy as np

from app.core.exceptions import CheckpointError
from app.core.module import Parameter


class Adam:
    """
    以參數名稱保存一階 / 二階動差，狀態可完整寫入檢查點以支援續訓

    參數:
        params: (名稱, 參數) 序列或字典
        lr: 學習率
        betas: (β₁, β₂)
        eps: 分母穩定項
    """

    def __init__(
        self,
        params: Union[dict[str, Parameter], Iterable[tuple[str, Parameter]]],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params: dict[str, Parameter] = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        """沒有梯度的參數（本步未參與計算）保持不變"""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            if not p.has_grad:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.assign(p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))

    def state_dict(self, prefix: str = "adam.") -> dict[str, np.ndarray]:
        state: dict[str, np.ndarray] = {}
        for name in self.params:
            state[f"{prefix}m.{name}"] = self.m[name]
            state[f"{prefix}v.{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], step_count: int, prefix: str = "adam.") -> None:
        for name, p in self.params.items():
            for slot, store in (("m", self.m), ("v", self.v)):
                key = f"{prefix}{slot}.{name}"
                if key not in state:
                    raise CheckpointError(f"檢查點缺少優化器狀態 {key}")
                if state[key].shape != p.data.shape:
                    raise CheckpointError(f"優化器狀態 {key} 形狀不符: {list(state[key].shape)}")
                store[name] = state[key].astype(p.data.dtype, copy=True)
        self.step_count = int(step_count)
