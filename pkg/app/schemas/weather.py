"""天氣相關資料 Schemas"""

from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.tensor import Tensor


class DegradationClass(BaseModel):
    """天氣退化類別"""

    model_config = ConfigDict(frozen=True)

    id: int = Field(..., ge=0, le=7, description="類別 ID（同時是 MWDS bitmask 的位元位置）")
    key: str = Field(..., min_length=1, description="短名稱（設定檔 / CLI 使用）")
    name: str = Field(..., description="顯示名稱")


class WeatherSample(BaseModel):
    """合成資料集中的一筆樣本"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    clean: np.ndarray = Field(..., description="乾淨影像 [3×H×W]，值域 [0,1]")
    degraded: np.ndarray = Field(..., description="退化影像 [3×H×W]，值域 [0,1]")
    classes: list[int] = Field(..., min_length=1, description="退化類別 ID（依套用順序）")
    severity: float = Field(..., gt=0, le=1)
    seed: int = Field(..., ge=0, lt=2 ** 64)
    split: Literal["train", "val", "test"] = "train"

    @model_validator(mode="after")
    def _check_images(self) -> "WeatherSample":
        if self.clean.shape != self.degraded.shape or self.clean.ndim != 3 or self.clean.shape[0] != 3:
            raise ValueError(f"影像形狀不符: clean {self.clean.shape}, degraded {self.degraded.shape}")
        return self

    @property
    def label(self) -> int:
        """單一類別樣本的類別 ID（混合樣本取第一個）"""
        return self.classes[0]

    @property
    def is_hybrid(self) -> bool:
        return len(self.classes) > 1


class WeatherFeatureVector(BaseModel):
    """天氣特徵向量 v"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: Tensor
    source: Literal["computed", "class_average", "user_supplied"] = "computed"

    @model_validator(mode="after")
    def _check_values(self) -> "WeatherFeatureVector":
        if self.values.ndim != 1:
            raise ValueError(f"特徵向量必須是一維，實際形狀 {list(self.values.shape)}")
        return self

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def numpy(self) -> np.ndarray:
        return self.values.numpy()

    @classmethod
    def from_array(cls, array, source: str = "user_supplied", dtype: str = "f32") -> "WeatherFeatureVector":
        return cls(values=Tensor(np.asarray(array), dtype=dtype), source=source)


class FiLMParams(BaseModel):
    """FiLM 調變參數 (γ, β)"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    gamma: Tensor
    beta: Tensor

    @model_validator(mode="after")
    def _check_lengths(self) -> "FiLMParams":
        if self.gamma.ndim != 1 or self.gamma.shape != self.beta.shape:
            raise ValueError(f"γ / β 形狀不符: {list(self.gamma.shape)} vs {list(self.beta.shape)}")
        return self


class WeatherScores(BaseModel):
    """天氣類型辨識分數"""

    classes: list[str] = Field(..., description="類別鍵（與平均向量庫順序一致）")
    similarities: list[float] = Field(..., description="餘弦相似度 d_i")
    scores: list[float] = Field(..., description="softmax 分數 s_i")
    argmax: str = Field(..., description="i* = argmax s_i")

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.classes, self.scores))
