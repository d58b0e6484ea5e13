"""有限差分梯度檢查 (Finite-difference Gradient Check)

以中央差分比較解析梯度，誤差採範數相對誤差
‖g_analytic − g_numeric‖ / (‖g_analytic‖ + ‖g_numeric‖)。
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from app.core import functional as F
from app.core.tensor import Tape, Tensor, no_grad


def _reduce(out: Tensor, projection: Optional[np.ndarray]) -> Tensor:
    if out.ndim == 0:
        return out
    return F.sum(F.mul(out, Tensor(projection, dtype=out.dtype)))


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    檢查 fn 對 inputs 的梯度

    參數:
        fn: 接收 inputs 並回傳張量的函式；非純量輸出會以固定隨機投影歸約成純量
        inputs: 要檢查的張量（建議 f64），其 requires_grad 會被設為 True
        h: 中央差分步長
        max_entries: 每個輸入最多抽查的元素數（None 表示全部）
        seed: 投影與抽樣的亂數種子

    返回:
        所有輸入中最大的範數相對誤差
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()

    with no_grad():
        probe = fn(*inputs)
    projection = None if probe.ndim == 0 else rng.standard_normal(probe.shape)

    with Tape() as tape:
        loss = _reduce(fn(*inputs), projection)
    tape.backward(loss)

    def evaluate() -> float:
        with no_grad():
            return _reduce(fn(*inputs), projection).item()

    worst = 0.0
    for t in inputs:
        analytic = t.grad.reshape(-1) if t.has_grad else np.zeros(t.size)
        flat = t.data.reshape(-1)
        if max_entries is not None and max_entries < flat.size:
            picks = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            picks = np.arange(flat.size)
        numeric = np.zeros(len(picks))
        for n, idx in enumerate(picks):
            original = flat[idx]
            flat[idx] = original + h
            plus = evaluate()
            flat[idx] = original - h
            minus = evaluate()
            flat[idx] = original
            numeric[n] = (plus - minus) / (2.0 * h)
        chosen = analytic[picks]
        denom = np.linalg.norm(chosen) + np.linalg.norm(numeric)
        if denom == 0.0:
            continue
        worst = max(worst, float(np.linalg.norm(chosen - numeric) / denom))
    return worst
