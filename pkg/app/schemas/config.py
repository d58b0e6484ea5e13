"""實驗設定 Schemas（模型、特徵網路、訓練、資料）"""

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator


class BackboneConfig(BaseModel):
    """還原主幹網路設定"""

    model_config = ConfigDict(extra="forbid")

    scales: int = Field(4, ge=1, description="編碼器階段數")
    channels: list[int] = Field([16, 32, 48, 64], description="各階段通道數（寬度倍率 1.0 時）")
    heads: list[int] = Field([1, 2, 3, 4], description="各階段注意力頭數")
    strides: list[int] = Field([2, 2, 2, 2], description="各階段 patch embedding 步幅")
    blocks: list[int] = Field([2, 2, 2, 2], description="各階段 Transformer block 數")
    intra_blocks: list[int] = Field([1, 1, 1, 1], description="各階段 intra-patch block 數")
    patch_kernel: int = Field(3, ge=1, description="重疊 patch embedding 卷積核大小")
    subpatch: int = Field(2, description="intra-patch 的子區塊切分倍率")
    mlp_ratio: int = Field(2, ge=1, description="FFN 擴張倍率")
    decoder_queries: int = Field(8, ge=1, description="解碼器可學習天氣查詢數")
    width: float = Field(1.0, gt=0, description="寬度倍率（S=0.5, M=0.75, L=1.0）")
    activation: Literal["gelu", "relu"] = Field("gelu", description="式中 σ 的非線性")
    global_residual: bool = Field(True, description="輸出是否加上輸入影像")
    adapt_local: bool = Field(True, description="FFN 深度卷積核由超網路產生")
    adapt_global: bool = Field(True, description="注意力 Q/K/V 投影由超網路產生")
    adapt_channel: bool = Field(True, description="patch embedding 前的 FiLM 通道調變")
    hyper_out_init_scale: float = Field(0.0, ge=0, description="HyperMLP 輸出層權重的初始化倍率")
    tail_init_scale: float = Field(0.1, ge=0, description="最後輸出卷積的初始化倍率")
    dtype: Literal["f32", "f64"] = "f32"
    init_seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_layout(self) -> "BackboneConfig":
        for name in ("channels", "heads", "strides", "blocks", "intra_blocks"):
            if len(getattr(self, name)) != self.scales:
                raise ValueError(f"{name} 的長度必須等於 scales={self.scales}")
        if any(b >= a for a, b in zip(self.channels[1:], self.channels[:-1])):
            raise ValueError("channels 必須嚴格遞增")
        if any(s < 1 for s in self.strides) or any(h < 1 for h in self.heads):
            raise ValueError("strides 與 heads 必須 ≥ 1")
        if self.subpatch < 2:
            raise ValueError("subpatch 必須 ≥ 2")
        scaled = self.scaled_channels
        if any(b >= a for a, b in zip(scaled[1:], scaled[:-1])):
            raise ValueError(f"寬度倍率 {self.width} 使通道數 {scaled} 不再嚴格遞增")
        return self

    @property
    def scaled_channels(self) -> list[int]:
        """依寬度倍率縮放，並取為頭數的倍數"""
        out = []
        for c, h in zip(self.channels, self.heads):
            out.append(max(h, int(round(c * self.width / h)) * h))
        return out

    @property
    def total_stride(self) -> int:
        total = 1
        for s in self.strides:
            total *= s
        return total


class FeatureConfig(BaseModel):
    """特徵萃取超網路設定"""

    model_config = ConfigDict(extra="forbid")

    dim: int = Field(64, ge=1, description="特徵向量 v 的維度 D")
    blocks: int = Field(1, ge=1, description="每個編碼階段的 Transformer block 數")
    init_seed: int = Field(1, ge=0, description="特徵網路 τ 的初始化種子")

    @property
    def embed_width(self) -> int:
        """每個尺度的 Gram 嵌入寬度 d_e = min(64, D)"""
        return min(64, self.dim)


class TrainConfig(BaseModel):
    """三階段訓練設定"""

    model_config = ConfigDict(extra="forbid")

    pretrain_steps: int = Field(1000, gt=0, description="第一階段（對比學習）迭代數")
    restore_steps: int = Field(4000, gt=0, description="第二階段（還原網路）迭代數")
    finetune_steps: int = Field(1000, gt=0, description="第三階段（聯合微調）迭代數")
    batch_size: int = Field(8, gt=0)
    lr_pretrain: float = Field(2e-4, gt=0)
    lr_restore: float = Field(2e-4, gt=0)
    finetune_lr_factor: float = Field(0.2, gt=0, description="第三階段學習率 = 第二階段 × 此倍率")
    perceptual_weight: float = Field(0.04, ge=0, description="λ")
    smooth_l1_beta: float = Field(1.0, gt=0)
    margin: float = Field(0.5, gt=0, le=1, description="對比損失的 margin m")
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    val_every: int = Field(200, gt=0)
    val_samples: int = Field(30, gt=0, description="每次驗證最多使用的樣本數")
    proxy_seed: int = Field(1234, ge=0, description="感知代理網路的固定種子")
    seed: int = Field(0, ge=0)


class DataConfig(BaseModel):
    """合成資料集設定"""

    model_config = ConfigDict(extra="forbid")

    counts: list[int] = Field([200, 200, 200], description="每個天氣類別的樣本數")
    height: int = Field(32, ge=16)
    width: int = Field(32, ge=16)
    eval_height: int = Field(64, ge=16)
    eval_width: int = Field(64, ge=16)
    hybrid_count: int = Field(50, ge=0)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_counts(self) -> "DataConfig":
        if any(c <= 0 for c in self.counts):
            raise ValueError("counts 必須全部 > 0")
        return self


class ExperimentConfig(BaseModel):
    """完整實驗設定"""

    model_config = ConfigDict(extra="forbid")

    model: BackboneConfig = Field(default_factory=BackboneConfig)
    feature: FeatureConfig = Field(default_factory=FeatureConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=DataConfig)
