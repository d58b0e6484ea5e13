"""還原主幹網路 F_res

多尺度編碼器（Transformer block + intra-patch block，可由 v 自適應）
→ 可學習天氣查詢解碼器 → 卷積尾端逐級上取樣並加上跳接特徵 → 全域殘差。
"""

from __future__ import annotations

from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.core import functional as F
from app.core.exceptions import ContractError, DimensionError
from app.core.module import Module, Parameter, uniform_init
from app.core.tensor import Tensor
from app.models.hyper import (
    HyperMLP,
    ParameterStore,
    VectorLike,
    dwc_generator,
    feature_values,
    film,
    film_generator,
    proj_generator,
)
from app.models.layers import (
    MLP,
    Conv2d,
    EncoderBlock,
    IntraPatchBlock,
    LayerNorm,
    Linear,
    adaptive_ffn,
    attention,
    identity_kernel,
    map_to_tokens,
    tokens_to_map,
)
from app.schemas.config import BackboneConfig
from app.schemas.weather import FiLMParams


class EncoderState(BaseModel):
    """編碼器各尺度的輸出（解碼器的特徵金字塔）"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    image: Tensor
    tokens: list[Tensor]
    shapes: list[tuple[int, int]]


class EncoderStage(Module):
    """單一編碼階段：重疊 patch embedding → Transformer blocks → intra-patch blocks → LayerNorm"""

    def __init__(self, name: str, c_in: int, c_out: int, heads: int, stride: int, n_blocks: int, n_intra: int,
                 cfg: BackboneConfig, rng: np.random.Generator):
        self.embed = Conv2d(c_in, c_out, cfg.patch_kernel, rng, cfg.dtype, stride=stride)
        self.blocks = [
            EncoderBlock(f"{name}.blocks.{i}", c_out, heads, rng, cfg.dtype, cfg.mlp_ratio, cfg.activation,
                         cfg.adapt_local, cfg.adapt_global)
            for i in range(n_blocks)
        ]
        self.intra = [
            IntraPatchBlock(f"{name}.intra.{i}", c_out, heads, rng, cfg.dtype, cfg.subpatch, cfg.mlp_ratio,
                            cfg.activation, cfg.adapt_local, cfg.adapt_global)
            for i in range(n_intra)
        ]
        self.norm = LayerNorm(c_out, cfg.dtype)

    def adaptive_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for block in [*self.blocks, *self.intra]:
            shapes.update(block.adaptive_shapes())
        return shapes

    def forward(self, x: Tensor, adaptive: dict[str, Tensor]) -> tuple[Tensor, tuple[int, int]]:
        emb = self.embed(x)
        hw = (emb.shape[1], emb.shape[2])
        tokens = map_to_tokens(emb)
        for block in self.blocks:
            tokens = block(tokens, hw, adaptive)
        for block in self.intra:
            tokens = block(tokens, hw, adaptive)
        return self.norm(tokens), hw


class WeatherQueryDecoder(Module):
    """
    可學習天氣查詢解碼器（參數全部屬於 θ_fix）

    查詢先對最深層特徵做交叉注意力，經 MLP 後再由各 token 反向讀取查詢結果，
    最後接一層 MLP + 深度卷積的 FFN。
    """

    def __init__(self, channels: int, heads: int, n_queries: int, cfg: BackboneConfig, rng: np.random.Generator):
        dtype = cfg.dtype
        self.heads = heads
        self.activation = cfg.activation
        self.queries = uniform_init(rng, (n_queries, channels), channels, dtype)
        self.norm_tokens = LayerNorm(channels, dtype)
        self.read_q = uniform_init(rng, (channels, channels), channels, dtype)
        self.read_k = uniform_init(rng, (channels, channels), channels, dtype)
        self.read_v = uniform_init(rng, (channels, channels), channels, dtype)
        self.read_proj = Linear(channels, channels, rng, dtype)
        self.norm_queries = LayerNorm(channels, dtype)
        self.query_mlp = MLP(channels, channels * cfg.mlp_ratio, channels, rng, dtype, cfg.activation)
        self.norm_write = LayerNorm(channels, dtype)
        self.write_q = uniform_init(rng, (channels, channels), channels, dtype)
        self.write_k = uniform_init(rng, (channels, channels), channels, dtype)
        self.write_v = uniform_init(rng, (channels, channels), channels, dtype)
        self.write_proj = Linear(channels, channels, rng, dtype)
        self.norm_ffn = LayerNorm(channels, dtype)
        hidden = channels * cfg.mlp_ratio
        self.expand = Linear(channels, hidden, rng, dtype)
        self.dwc = Parameter(identity_kernel(hidden), dtype=dtype)
        self.contract = Linear(hidden, channels, rng, dtype)

    def forward(self, tokens: Tensor, hw: tuple[int, int]) -> Tensor:
        normed = self.norm_tokens(tokens)
        read = attention(self.queries, normed, self.read_q, self.read_k, self.read_v, self.heads)
        q = F.add(self.queries, self.read_proj(read))
        q = F.add(q, self.query_mlp(self.norm_queries(q)))

        write = attention(self.norm_write(tokens), q, self.write_q, self.write_k, self.write_v, self.heads)
        tokens = F.add(tokens, self.write_proj(write))
        ffn = adaptive_ffn(self.norm_ffn(tokens), hw, self.expand, self.dwc, self.contract, self.activation)
        return F.add(tokens, ffn)


class RestorationBackbone(Module):
    """
    還原網路 F_res(I; θ_fix, θ_adap(v))

    參數:
        cfg: 主幹網路設定
        feature_dim: 特徵向量 v 的維度 D
    """

    def __init__(self, cfg: BackboneConfig, feature_dim: int):
        self.cfg = cfg
        self.feature_dim = feature_dim
        rng = np.random.default_rng(cfg.init_seed)
        channels = cfg.scaled_channels
        self.channels = channels
        self.film_channels = [3, *channels[:-1]]

        self.stages = [
            EncoderStage(f"stages.{s}", self.film_channels[s], channels[s], cfg.heads[s], cfg.strides[s],
                         cfg.blocks[s], cfg.intra_blocks[s], cfg, rng)
            for s in range(cfg.scales)
        ]

        # 超網路產生器：槽名稱對應固定參數的路徑（例如 stages.0.blocks.1.w_q）
        self.hyper: dict[str, HyperMLP] = {}
        scale = cfg.hyper_out_init_scale
        for s, stage in enumerate(self.stages):
            if cfg.adapt_channel:
                self.hyper[f"stages.{s}.film"] = film_generator(
                    feature_dim, self.film_channels[s], rng, cfg.dtype, scale
                )
            for slot, shape in stage.adaptive_shapes().items():
                if slot.endswith(".dwc"):
                    self.hyper[slot] = dwc_generator(feature_dim, shape[0], rng, cfg.dtype, scale)
                else:
                    self.hyper[slot] = proj_generator(feature_dim, shape[0], shape[1], rng, cfg.dtype, scale)

        self.decoder = WeatherQueryDecoder(channels[-1], cfg.heads[-1], cfg.decoder_queries, cfg, rng)
        self.tails = [
            Conv2d(channels[s], channels[s - 1], 3, rng, cfg.dtype)
            for s in range(cfg.scales - 1, 0, -1)
        ]
        self.head_conv = Conv2d(channels[0], channels[0], 3, rng, cfg.dtype)
        self.out_conv = Conv2d(channels[0], 3, 3, rng, cfg.dtype, init_scale=cfg.tail_init_scale)
        self.act = F.activation(cfg.activation)

    @property
    def is_adaptive(self) -> bool:
        return bool(self.hyper)

    def generators(self) -> dict[str, HyperMLP]:
        return self.hyper

    def store(self) -> ParameterStore:
        return ParameterStore(self)

    def generate(self, v: Optional[VectorLike]) -> dict[str, Tensor]:
        """產生 θ_adap(v)；沒有任何自適應時回傳空字典"""
        if v is not None and feature_values(v).shape != (self.feature_dim,):
            raise DimensionError(
                f"特徵向量形狀 {list(feature_values(v).shape)} 與設定的維度 {self.feature_dim} 不符"
            )
        if not self.hyper:
            return {}
        if v is None:
            raise ContractError("自適應主幹網路需要特徵向量 v")
        return {name: gen(v) for name, gen in self.hyper.items()}

    def check_input(self, image: Tensor) -> None:
        stride = self.cfg.total_stride
        if image.ndim != 3 or image.shape[0] != 3:
            raise DimensionError(f"輸入影像必須是 [3×H×W]，實際 {list(image.shape)}")
        if image.shape[1] % stride or image.shape[2] % stride:
            raise DimensionError(f"影像尺寸 {image.shape[1]}×{image.shape[2]} 無法被累積步幅 {stride} 整除")

    def encode(self, image: Tensor, adaptive: dict[str, Tensor]) -> EncoderState:
        self.check_input(image)
        x = image
        tokens: list[Tensor] = []
        shapes: list[tuple[int, int]] = []
        for s, stage in enumerate(self.stages):
            if self.cfg.adapt_channel:
                raw = adaptive[f"stages.{s}.film"]
                c = self.film_channels[s]
                x = film(x, FiLMParams(gamma=raw[:c], beta=raw[c:]))
            t, hw = stage(x, adaptive)
            tokens.append(t)
            shapes.append(hw)
            x = tokens_to_map(t, hw)
        return EncoderState(image=image, tokens=tokens, shapes=shapes)

    def decode(self, states: EncoderState, clamp: bool = False) -> Tensor:
        """
        解碼為 [3×H×W] 影像

        參數:
            states: 編碼器輸出（必須涵蓋所有尺度）
            clamp: 是否截斷到 [0,1]（僅推論時使用）
        """
        if len(states.tokens) != self.cfg.scales or len(states.shapes) != self.cfg.scales:
            raise ContractError(f"編碼器狀態只有 {len(states.tokens)} 個尺度，期望 {self.cfg.scales}")
        deepest = self.decoder(states.tokens[-1], states.shapes[-1])
        m = tokens_to_map(deepest, states.shapes[-1])
        for conv, s in zip(self.tails, range(self.cfg.scales - 1, 0, -1)):
            skip_hw = states.shapes[s - 1]
            m = F.upsample_bilinear(m, skip_hw)
            m = self.act(F.add(conv(m), tokens_to_map(states.tokens[s - 1], skip_hw)))
        image = states.image
        m = F.upsample_bilinear(m, (image.shape[1], image.shape[2]))
        y = self.out_conv(self.act(self.head_conv(m)))
        if self.cfg.global_residual:
            y = F.add(y, image)
        if clamp:
            y = F.clip(y, 0.0, 1.0)
        return y

    def forward(self, image: Tensor, v: Optional[VectorLike] = None, clamp: bool = False) -> Tensor:
        adaptive = self.generate(v)
        return self.decode(self.encode(image, adaptive), clamp)


def restore(image: Tensor, v: Optional[VectorLike], store: Union[ParameterStore, RestorationBackbone],
            clamp: bool = False) -> Tensor:
    """Y = F_res(I; θ_fix, θ_adap(v))：先一次產生 θ_adap(v)，再編碼、解碼"""
    model = store.model if isinstance(store, ParameterStore) else store
    adaptive = model.generate(v)
    return model.decode(model.encode(image, adaptive), clamp)
