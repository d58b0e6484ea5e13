"""超網路自適應 (Hyper-adaptivity)

HyperMLP 把天氣特徵向量 v 映射為主幹網路的參數：深度卷積核、Q/K/V 投影矩陣，
以及 FiLM 的 (γ, β)。HyperMLP 自身的權重屬於 θ_fix，它的輸出才是 θ_adap(v)。
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Union

import numpy as np

from app.core import functional as F
from app.core.exceptions import ConfigError, DimensionError
from app.core.module import Module, Parameter, const_init, uniform_init
from app.core.tensor import Tensor
from app.schemas.weather import FiLMParams, WeatherFeatureVector

if TYPE_CHECKING:
    from app.models.backbone import RestorationBackbone

VectorLike = Union[WeatherFeatureVector, Tensor]


def feature_values(v: VectorLike) -> Tensor:
    return v.values if isinstance(v, WeatherFeatureVector) else v


class HyperMLP(Module):
    """
    兩層投影 MLP：Linear(D→2D) → GELU → Linear(2D→prod(target_shape))

    參數:
        in_dim: 特徵向量維度 D
        target_shape: 產生參數的形狀
        bias_init: 輸出層 bias 的初始值（攤平後長度須等於 prod(target_shape)）
        out_scale: 輸出層權重初始化倍率；0 表示初始輸出恰為 bias_init
    """

    def __init__(
        self,
        in_dim: int,
        target_shape: tuple[int, ...],
        rng: np.random.Generator,
        dtype: str = "f32",
        bias_init: Union[float, np.ndarray] = 0.0,
        out_scale: float = 0.0,
        hidden: int | None = None,
    ):
        self.in_dim = in_dim
        self.target_shape = tuple(int(s) for s in target_shape)
        self.out_dim = int(np.prod(self.target_shape))
        self.hidden = hidden or 2 * in_dim
        self.w1 = uniform_init(rng, (in_dim, self.hidden), in_dim, dtype)
        self.b1 = const_init(0.0, (self.hidden,), dtype)
        self.w2 = uniform_init(rng, (self.hidden, self.out_dim), self.hidden, dtype, out_scale)
        bias = np.asarray(bias_init, dtype=np.float64)
        if bias.ndim and bias.size != self.out_dim:
            raise ConfigError(f"HyperMLP bias 初始值長度 {bias.size} 與輸出長度 {self.out_dim} 不符")
        self.b2 = const_init(bias.reshape(-1) if bias.ndim else bias, (self.out_dim,), dtype)

    def forward(self, v: VectorLike) -> Tensor:
        values = feature_values(v)
        if values.shape != (self.in_dim,):
            raise DimensionError(f"HyperMLP: 特徵向量形狀 {list(values.shape)}，期望 [{self.in_dim}]")
        row = F.reshape(values, (1, self.in_dim))
        hidden = F.gelu(F.add_bias(F.matmul(row, self.w1), self.b1))
        out = F.add_bias(F.matmul(hidden, self.w2), self.b2)
        return F.reshape(out, self.target_shape)


def _check_target(generator: HyperMLP, expected: tuple[int, ...], what: str) -> None:
    if generator.target_shape != expected:
        raise ConfigError(
            f"{what}: 產生器輸出形狀 {list(generator.target_shape)} 與請求的 {list(expected)} 不符"
        )


def gen_dwc_kernel(generator: HyperMLP, v: VectorLike, channels: int) -> Tensor:
    """W_DWC = Reshape(Proj(v))，形狀 [C×1×3×3]"""
    _check_target(generator, (channels, 1, 3, 3), "gen_dwc_kernel")
    return generator(v)


def gen_qkv_proj(
    generators: tuple[HyperMLP, HyperMLP, HyperMLP], v: VectorLike, d_in: int, d_out: int
) -> tuple[Tensor, Tensor, Tensor]:
    """W_i = Reshape(Proj(v))，i = q, k, v，各為 [d_in×d_out]"""
    for g in generators:
        _check_target(g, (d_in, d_out), "gen_qkv_proj")
    w_q, w_k, w_v = (g(v) for g in generators)
    return w_q, w_k, w_v


def gen_film_params(generator: HyperMLP, v: VectorLike, channels: int) -> FiLMParams:
    """產生 2C 個值並切成 (γ, β)"""
    _check_target(generator, (2 * channels,), "gen_film_params")
    out = generator(v)
    return FiLMParams(gamma=out[:channels], beta=out[channels:])


def film(x: Tensor, p: FiLMParams) -> Tensor:
    """X' = γ·X + β（逐通道廣播）"""
    return F.channel_affine(x, p.gamma, p.beta)


def dwc_generator(in_dim: int, channels: int, rng: np.random.Generator, dtype: str, out_scale: float) -> HyperMLP:
    """初始輸出為 delta 核的深度卷積產生器"""
    kern = np.zeros((channels, 1, 3, 3))
    kern[:, 0, 1, 1] = 1.0
    return HyperMLP(in_dim, (channels, 1, 3, 3), rng, dtype, bias_init=kern, out_scale=out_scale)


def proj_generator(in_dim: int, d_in: int, d_out: int, rng: np.random.Generator, dtype: str,
                   out_scale: float) -> HyperMLP:
    """初始輸出為單位矩陣（維度相同時）或零矩陣的投影產生器"""
    bias = np.eye(d_in, d_out) if d_in == d_out else np.zeros((d_in, d_out))
    return HyperMLP(in_dim, (d_in, d_out), rng, dtype, bias_init=bias, out_scale=out_scale)


def film_generator(in_dim: int, channels: int, rng: np.random.Generator, dtype: str, out_scale: float) -> HyperMLP:
    """初始輸出 γ=1、β=0 的 FiLM 產生器"""
    bias = np.concatenate([np.ones(channels), np.zeros(channels)])
    return HyperMLP(in_dim, (2 * channels,), rng, dtype, bias_init=bias, out_scale=out_scale)


class ParameterStore:
    """
    主幹網路的參數登錄表

    - fixed: 實體參數 θ_fix（含 HyperMLP 自身權重）
    - adaptive: 由 v 產生的 θ_adap(v) 參數槽（名稱 → 形狀）
    兩者名稱互斥，且涵蓋主幹網路的全部參數。
    """

    FIXED = "fixed"
    ADAPTIVE = "hyper-generated"

    def __init__(self, model: "RestorationBackbone"):
        self.model = model

    def fixed(self) -> dict[str, Parameter]:
        return dict(self.model.named_parameters())

    def adaptive(self) -> dict[str, tuple[int, ...]]:
        return {name: gen.target_shape for name, gen in self.model.generators().items()}

    def tag(self, name: str) -> str:
        if name in self.model.generators():
            return self.ADAPTIVE
        if name in self.fixed():
            return self.FIXED
        raise KeyError(name)

    def counts(self) -> dict[str, int]:
        return {
            self.FIXED: sum(p.size for p in self.fixed().values()),
            self.ADAPTIVE: sum(int(np.prod(s)) for s in self.adaptive().values()),
        }

    def generate(self, v: VectorLike) -> dict[str, Tensor]:
        """一次產生所有 θ_adap(v)"""
        return {name: gen(v) for name, gen in self.model.generators().items()}
