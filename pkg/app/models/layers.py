"""基礎網路層：線性層、LayerNorm、卷積、注意力、(自適應) Transformer block"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from app.core import functional as F
from app.core.exceptions import ConfigError, DimensionError
from app.core.module import Module, Parameter, const_init, uniform_init
from app.core.tensor import Tensor


# ==================== token ↔ 特徵圖 ====================

def tokens_to_map(x: Tensor, hw: tuple[int, int]) -> Tensor:
    """[N×C] → [C×h×w]（token 以列優先排列）"""
    h, w = hw
    if x.ndim != 2 or x.shape[0] != h * w:
        raise DimensionError(f"token 數 {x.shape[0] if x.ndim == 2 else x.shape} 無法排成 {h}×{w} 的矩形")
    return F.reshape(F.transpose(x, (1, 0)), (x.shape[1], h, w))


def map_to_tokens(m: Tensor) -> Tensor:
    """[C×h×w] → [N×C]"""
    c, h, w = m.shape
    return F.transpose(F.reshape(m, (c, h * w)), (1, 0))


def identity_kernel(channels: int, k: int = 3) -> np.ndarray:
    """中心為 1 的 delta 深度卷積核 [C×1×k×k]"""
    kern = np.zeros((channels, 1, k, k))
    kern[:, 0, k // 2, k // 2] = 1.0
    return kern


# ==================== 基本層 ====================

class Linear(Module):
    """x @ W + b，W 為 [d_in×d_out]"""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype: str = "f32",
                 bias: bool = True, init_scale: float = 1.0):
        self.d_in, self.d_out = d_in, d_out
        self.weight = uniform_init(rng, (d_in, d_out), d_in, dtype, init_scale)
        self.bias = const_init(0.0, (d_out,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        vector = x.ndim == 1
        if vector:
            x = F.reshape(x, (1, x.shape[0]))
        y = F.matmul(x, self.weight)
        if self.bias is not None:
            y = F.add_bias(y, self.bias)
        return F.reshape(y, (self.d_out,)) if vector else y


class LayerNorm(Module):
    def __init__(self, channels: int, dtype: str = "f32"):
        self.weight = const_init(1.0, (channels,), dtype)
        self.bias = const_init(0.0, (channels,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, dtype: str = "f32",
                 stride: int = 1, init_scale: float = 1.0):
        self.stride = stride
        self.padding = kernel // 2
        self.weight = uniform_init(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel, dtype, init_scale)
        self.bias = const_init(0.0, (c_out,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class MLP(Module):
    """Linear → σ → Linear"""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, dtype: str = "f32",
                 activation: str = "gelu"):
        self.fc1 = Linear(d_in, d_hidden, rng, dtype)
        self.fc2 = Linear(d_hidden, d_out, rng, dtype)
        self.act = F.activation(activation)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(x)))


# ==================== 注意力 ====================

def attention(xq: Tensor, xkv: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, heads: int) -> Tensor:
    """
    多頭縮放點積注意力 softmax(QKᵀ/√d_h)V

    參數:
        xq: 查詢來源 [Nq×C_in]
        xkv: 鍵 / 值來源 [Nk×C_in]
        w_q, w_k, w_v: [C_in×d]
        heads: 頭數（必須整除 d）

    返回:
        [Nq×d]
    """
    if not (w_q.shape == w_k.shape == w_v.shape) or w_q.ndim != 2:
        raise DimensionError(
            f"attention: 投影矩陣形狀不一致 W_q={list(w_q.shape)} W_k={list(w_k.shape)} W_v={list(w_v.shape)}"
        )
    d = w_q.shape[1]
    if heads < 1 or d % heads != 0:
        raise ConfigError(f"attention: 頭數 {heads} 無法整除投影維度 {d}")
    dh = d // heads
    nq, nk = xq.shape[0], xkv.shape[0]

    def split(x: Tensor, n: int) -> Tensor:
        return F.transpose(F.reshape(x, (n, heads, dh)), (1, 0, 2))

    q = split(F.matmul(xq, w_q), nq)
    k = split(F.matmul(xkv, w_k), nk)
    v = split(F.matmul(xkv, w_v), nk)
    logits = F.mul(F.matmul(q, F.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    weights = F.softmax(logits, axis=-1)
    out = F.matmul(weights, v)
    return F.reshape(F.transpose(out, (1, 0, 2)), (nq, d))


def msa(x_sg: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, heads: int = 1) -> Tensor:
    """自注意力 MSA(X) = softmax(QKᵀ/√d)V，Q = X W_q 等"""
    return attention(x_sg, x_sg, w_q, w_k, w_v, heads)


# ==================== FFN ====================

def adaptive_ffn(
    x_sl: Tensor,
    hw: tuple[int, int],
    expand: Linear,
    kernel: Tensor,
    contract: Linear,
    activation: str = "gelu",
) -> Tensor:
    """
    FFN(X_sl, v) = MLP(σ(W_DWC ∗ X_sl))

    擴張線性層 → 排回空間 → 深度卷積（核由 v 產生或為固定參數）→ σ → 收縮線性層。
    殘差由呼叫端的 block 加上。
    """
    hidden = expand(x_sl)
    spatial = tokens_to_map(hidden, hw)
    conv = F.depthwise_conv2d(spatial, kernel)
    return contract(map_to_tokens(F.activation(activation)(conv)))


# ==================== Transformer block ====================

class EncoderBlock(Module):
    """
    LayerNorm → (自適應) MSA → 殘差 → LayerNorm → (自適應) FFN → 殘差

    adapt_global 時 W_q / W_k / W_v 由超網路產生，否則為固定參數；
    adapt_local 時 FFN 的深度卷積核由超網路產生，否則為固定參數。
    產生的參數以 `{name}.w_q`、`{name}.dwc` 等鍵從 `adaptive` 字典取得。
    """

    def __init__(
        self,
        name: str,
        channels: int,
        heads: int,
        rng: np.random.Generator,
        dtype: str = "f32",
        mlp_ratio: int = 2,
        activation: str = "gelu",
        adapt_local: bool = False,
        adapt_global: bool = False,
    ):
        if channels % heads != 0:
            raise ConfigError(f"{name}: 頭數 {heads} 無法整除通道數 {channels}")
        self.name = name
        self.channels = channels
        self.heads = heads
        self.hidden = channels * mlp_ratio
        self.activation = activation
        self.adapt_local = adapt_local
        self.adapt_global = adapt_global

        self.norm1 = LayerNorm(channels, dtype)
        if not adapt_global:
            eye = np.eye(channels)
            self.w_q = Parameter(eye, dtype=dtype)
            self.w_k = Parameter(eye, dtype=dtype)
            self.w_v = Parameter(eye, dtype=dtype)
        self.proj = Linear(channels, channels, rng, dtype)
        self.norm2 = LayerNorm(channels, dtype)
        self.expand = Linear(channels, self.hidden, rng, dtype)
        if not adapt_local:
            self.dwc = Parameter(identity_kernel(self.hidden), dtype=dtype)
        self.contract = Linear(self.hidden, channels, rng, dtype)

    def adaptive_shapes(self) -> dict[str, tuple[int, ...]]:
        """此 block 需要由超網路產生的參數名稱與形狀"""
        shapes: dict[str, tuple[int, ...]] = {}
        if self.adapt_global:
            for key in ("w_q", "w_k", "w_v"):
                shapes[f"{self.name}.{key}"] = (self.channels, self.channels)
        if self.adapt_local:
            shapes[f"{self.name}.dwc"] = (self.hidden, 1, 3, 3)
        return shapes

    def _lookup(self, adaptive: dict[str, Tensor], key: str) -> Tensor:
        full = f"{self.name}.{key}"
        if full not in adaptive:
            raise ConfigError(f"缺少超網路產生的參數 {full}")
        return adaptive[full]

    def forward(self, x: Tensor, hw: tuple[int, int], adaptive: Optional[dict[str, Tensor]] = None) -> Tensor:
        adaptive = adaptive or {}
        if self.adapt_global:
            w_q, w_k, w_v = (self._lookup(adaptive, k) for k in ("w_q", "w_k", "w_v"))
        else:
            w_q, w_k, w_v = self.w_q, self.w_k, self.w_v
        kernel = self._lookup(adaptive, "dwc") if self.adapt_local else self.dwc

        x = F.add(x, self.proj(msa(self.norm1(x), w_q, w_k, w_v, self.heads)))
        x = F.add(x, adaptive_ffn(self.norm2(x), hw, self.expand, kernel, self.contract, self.activation))
        return x


class IntraPatchBlock(Module):
    """
    Intra-patch Transformer block

    每個 patch token 以線性層展開為 r×r 個子區塊嵌入（子區塊數 = r² × patch 數），
    經過一個（自適應）EncoderBlock 後再合併回原 patch，作為細節分支加回主幹。
    """

    def __init__(
        self,
        name: str,
        channels: int,
        heads: int,
        rng: np.random.Generator,
        dtype: str = "f32",
        subpatch: int = 2,
        mlp_ratio: int = 2,
        activation: str = "gelu",
        adapt_local: bool = False,
        adapt_global: bool = False,
    ):
        if subpatch < 2:
            raise ConfigError(f"{name}: 子區塊倍率必須 ≥ 2，實際 {subpatch}")
        self.name = name
        self.r = subpatch
        self.split = Linear(channels, channels * subpatch * subpatch, rng, dtype)
        self.inner = EncoderBlock(
            f"{name}.inner", channels, heads, rng, dtype, mlp_ratio, activation, adapt_local, adapt_global
        )
        self.merge = Linear(channels * subpatch * subpatch, channels, rng, dtype)

    def adaptive_shapes(self) -> dict[str, tuple[int, ...]]:
        return self.inner.adaptive_shapes()

    def subpatch_count(self, n_patches: int) -> int:
        return n_patches * self.r * self.r

    def forward(self, x: Tensor, hw: tuple[int, int], adaptive: Optional[dict[str, Tensor]] = None) -> Tensor:
        h, w = hw
        r = self.r
        sub_map = F.pixel_shuffle(tokens_to_map(self.split(x), hw), r)
        sub_tokens = self.inner(map_to_tokens(sub_map), (h * r, w * r), adaptive)
        merged = map_to_tokens(F.pixel_unshuffle(tokens_to_map(sub_tokens, (h * r, w * r)), r))
        return F.add(x, self.merge(merged))
