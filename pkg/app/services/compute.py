"""運算量統計 (Compute Accounting)

MACs 由實際執行一次前向時，matmul / conv2d / depthwise_conv2d 回報的乘加次數累計而來，
因此永遠與網路實作一致。
"""

from __future__ import annotations

from typing import Optional

from app.config import build_config
from app.core import functional as F
from app.core.exceptions import DimensionError
from app.core.tensor import Tensor, no_grad
from app.models.backbone import RestorationBackbone
from app.models.feature_extractor import FeatureExtractor, extract_features
from app.schemas.config import ExperimentConfig
from app.schemas.report import ComputeReport
from app.services.weather_synth import gen_clean

MODEL_FAMILY = {"S": 0.5, "M": 0.75, "L": 1.0}


def count_compute(config: ExperimentConfig, height: Optional[int] = None, width: Optional[int] = None,
                  seed: int = 0) -> ComputeReport:
    """
    統計一組設定的參數量與單次前向 MACs

    參數:
        config: 實驗設定（寬度倍率等）
        height, width: 輸入尺寸（預設為評估尺寸）
        seed: 量測用合成影像的種子（MACs 與影像內容無關）

    返回:
        ComputeReport
    """
    h = height or config.data.eval_height
    w = width or config.data.eval_width
    stride = config.model.total_stride
    if h % stride or w % stride:
        raise DimensionError(f"影像尺寸 {h}×{w} 無法被累積步幅 {stride} 整除")

    feature = FeatureExtractor(config.feature, config.model)
    backbone = RestorationBackbone(config.model, config.feature.dim)
    image = Tensor(gen_clean(seed, h, w), dtype=config.model.dtype)

    with no_grad():
        with F.count_macs() as feat_counter:
            v = extract_features(image, feature)
        with F.count_macs() as restore_counter:
            backbone(image, v if backbone.is_adaptive else None)

    by_op = dict(restore_counter.by_op)
    for op, n in feat_counter.by_op.items():
        by_op[op] = by_op.get(op, 0) + n

    params = backbone.store().counts()
    params["feature"] = feature.num_parameters()
    return ComputeReport(
        width=config.model.width,
        height=h,
        image_width=w,
        params=params,
        macs=feat_counter.total + restore_counter.total,
        macs_by_op=dict(sorted(by_op.items())),
        macs_restore_only=restore_counter.total,
    )


def model_family(config: ExperimentConfig, height: Optional[int] = None,
                 width: Optional[int] = None) -> dict[str, ComputeReport]:
    """S / M / L 三種寬度倍率的運算量"""
    reports = {}
    for name, multiplier in MODEL_FAMILY.items():
        values = config.model_dump()
        values["model"]["width"] = multiplier
        variant = build_config(values, f"width={multiplier}")
        reports[name] = count_compute(variant, height, width)
    return reports
