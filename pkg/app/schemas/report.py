"""評估報表 Schemas（PSNR/SSIM、參數量、MACs、消融與變體研究）"""

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


def _mean(values: dict[str, float]) -> float:
    return sum(values.values()) / len(values) if values else 0.0


class ClassMetrics(BaseModel):
    """逐類別 PSNR / SSIM 與其平均（平均值一律由逐類別數值計算）"""

    psnr: dict[str, float] = Field(default_factory=dict, description="類別鍵 → PSNR (dB)")
    ssim: dict[str, float] = Field(default_factory=dict, description="類別鍵 → SSIM")
    average_psnr: float = 0.0
    average_ssim: float = 0.0

    @model_validator(mode="after")
    def _fill_averages(self) -> "ClassMetrics":
        self.average_psnr = _mean(self.psnr)
        self.average_ssim = _mean(self.ssim)
        return self


class EvalReport(ClassMetrics):
    """`eval` 子命令的輸出"""

    mode: Literal["degraded", "full", "fixed"] = Field("full", description="評估的推論模式")
    split: str = "test"
    samples: int = Field(0, ge=0, description="評估的樣本數")
    degraded: Optional[ClassMetrics] = Field(None, description="退化輸入相對乾淨影像的基準值")
    params: dict[str, int] = Field(default_factory=dict, description="fixed / hyper-generated / feature 參數量")
    macs: Optional[int] = Field(None, description="單次前向的 MACs 估計")

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "mode": "full",
                "split": "test",
                "samples": 60,
                "psnr": {"drop": 27.1, "streak": 25.3, "flake": 26.0},
                "ssim": {"drop": 0.91, "streak": 0.88, "flake": 0.9},
                "average_psnr": 26.13,
                "average_ssim": 0.8967,
            }
        }
    )

    @property
    def gain(self) -> Optional[float]:
        """平均 PSNR 相對退化輸入的增益 (dB)"""
        if self.degraded is None:
            return None
        return self.average_psnr - self.degraded.average_psnr


class AblationRow(ClassMetrics):
    """消融表中的一列"""

    name: str = Field(..., description="例如 baseline、+Local、+Fine-Tune")
    adapt_local: bool = False
    adapt_global: bool = False
    adapt_channel: bool = False
    finetuned: bool = False
    seeds: list[int] = Field(default_factory=list)
    below_degraded: bool = Field(False, description="預算不足：驗證 PSNR 低於退化輸入")


class AblationReport(BaseModel):
    """消融研究（每一列都在相同預算與種子下訓練與評估）"""

    classes: list[str]
    degraded: ClassMetrics
    rows: list[AblationRow]

    def csv_lines(self) -> list[str]:
        header = ["row", *(f"psnr_{c}" for c in self.classes), "psnr_avg",
                  *(f"ssim_{c}" for c in self.classes), "ssim_avg", "below_degraded"]
        lines = [",".join(header)]
        for row in [AblationRow(name="degraded-input", **self.degraded.model_dump()), *self.rows]:
            values = [row.name]
            values += [f"{row.psnr.get(c, 0.0):.4f}" for c in self.classes] + [f"{row.average_psnr:.4f}"]
            values += [f"{row.ssim.get(c, 0.0):.4f}" for c in self.classes] + [f"{row.average_ssim:.4f}"]
            values.append(str(int(row.below_degraded)))
            lines.append(",".join(values))
        return lines


class StudyReport(BaseModel):
    """變體研究：固定向量替換矩陣、串接順序比較"""

    kind: Literal["fixed", "cascade"]
    columns: list[str] = Field(..., description="欄位（測試類別或資料集）")
    rows: dict[str, dict[str, float]] = Field(..., description="列名稱 → 欄位 → PSNR (dB)")
    checksum_stable: Optional[bool] = Field(None, description="串接前後參數 checksum 是否一致")

    def csv_lines(self) -> list[str]:
        lines = [",".join(["variant", *self.columns])]
        for name, values in self.rows.items():
            lines.append(",".join([name, *(f"{values.get(c, float('nan')):.4f}" for c in self.columns)]))
        return lines


class ComputeReport(BaseModel):
    """單次前向的參數量與 MACs"""

    width: float = Field(..., description="寬度倍率")
    height: int
    image_width: int
    params: dict[str, int] = Field(..., description="fixed / hyper-generated / feature 參數量")
    macs: int = Field(..., ge=0, description="還原網路加上特徵網路的乘加次數")
    macs_by_op: dict[str, int] = Field(default_factory=dict)
    macs_restore_only: int = Field(0, ge=0, description="固定向量推論（略過特徵網路）的乘加次數")

    @property
    def total_params(self) -> int:
        """實際儲存的參數量（產生的參數槽不計入）"""
        return self.params.get("fixed", 0) + self.params.get("feature", 0)
