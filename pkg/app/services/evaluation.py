"""評估服務 (Evaluation Service)

在測試集上計算逐類別 PSNR / SSIM。模型參數在推論期間唯讀，
因此樣本可分散到多個執行緒，報表依原始樣本順序彙整。
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel
from tqdm import tqdm

from app.config import settings
from app.core.exceptions import ContractError
from app.schemas.report import ClassMetrics, EvalReport
from app.schemas.weather import WeatherSample
from app.services import metrics
from app.services.inference import infer_fixed, infer_full
from app.services.model_store import ModelBundle
from app.services.weather_synth import default_registry

MODES = ("degraded", "full", "fixed")


class SampleScore(BaseModel):
    """單一樣本的評估結果"""

    key: str
    psnr: float
    ssim: float
    degraded_psnr: float
    degraded_ssim: float


def class_metrics(scores: Sequence[SampleScore], degraded: bool = False) -> ClassMetrics:
    """逐類別取平均（類別依出現順序）"""
    grouped: dict[str, list[SampleScore]] = {}
    for s in scores:
        grouped.setdefault(s.key, []).append(s)
    if degraded:
        psnr = {k: float(np.mean([s.degraded_psnr for s in v])) for k, v in grouped.items()}
        ssim = {k: float(np.mean([s.degraded_ssim for s in v])) for k, v in grouped.items()}
    else:
        psnr = {k: float(np.mean([s.psnr for s in v])) for k, v in grouped.items()}
        ssim = {k: float(np.mean([s.ssim for s in v])) for k, v in grouped.items()}
    return ClassMetrics(psnr=psnr, ssim=ssim)


class EvaluationService:
    """
    參數:
        workers: 執行緒數（None 使用 settings.EVAL_WORKERS）
    """

    def __init__(self, workers: Optional[int] = None):
        self.workers = workers

    def _score(self, sample: WeatherSample, bundle: Optional[ModelBundle], mode: str,
               fixed_key: Optional[str]) -> SampleScore:
        key = default_registry.get(sample.label).key
        d_psnr = metrics.psnr(sample.degraded, sample.clean)
        d_ssim = metrics.ssim(sample.degraded, sample.clean)
        if mode == "degraded":
            return SampleScore(key=key, psnr=d_psnr, ssim=d_ssim, degraded_psnr=d_psnr, degraded_ssim=d_ssim)
        if mode == "full":
            y = infer_full(sample.degraded, bundle.feature, bundle.backbone).numpy()
        else:
            y = infer_fixed(sample.degraded, fixed_key or key, bundle.bank, bundle.backbone).numpy()
        return SampleScore(
            key=key,
            psnr=metrics.psnr(y, sample.clean),
            ssim=metrics.ssim(y, sample.clean),
            degraded_psnr=d_psnr,
            degraded_ssim=d_ssim,
        )

    def score_samples(
        self,
        samples: Sequence[WeatherSample],
        bundle: Optional[ModelBundle] = None,
        mode: str = "full",
        fixed_key: Optional[str] = None,
        show_progress: bool = True,
    ) -> list[SampleScore]:
        """
        逐樣本評估（依輸入順序回傳）

        參數:
            mode: degraded（只算退化輸入）、full、fixed
            fixed_key: fixed 模式使用的類別向量（None 表示使用樣本自己的類別）
        """
        if mode not in MODES:
            raise ContractError(f"未知的評估模式 '{mode}'（可用: {', '.join(MODES)}）")
        if mode != "degraded" and bundle is None:
            raise ContractError(f"{mode} 模式需要模型檢查點")
        if mode == "fixed" and bundle.bank is None:
            raise ContractError("fixed 模式需要類別平均向量庫（請先完成預訓練）")
        if not samples:
            raise ContractError("沒有可評估的樣本")

        workers = self.workers or settings.EVAL_WORKERS
        bar = tqdm(total=len(samples), desc=f"評估 ({mode})", disable=not show_progress)

        def run(sample: WeatherSample) -> SampleScore:
            result = self._score(sample, bundle, mode, fixed_key)
            bar.update(1)
            return result

        try:
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    return list(pool.map(run, samples))
            return [run(s) for s in samples]
        finally:
            bar.close()

    def evaluate(
        self,
        samples: Sequence[WeatherSample],
        bundle: Optional[ModelBundle] = None,
        mode: str = "full",
        split: str = "test",
        fixed_key: Optional[str] = None,
        macs: Optional[int] = None,
        show_progress: bool = True,
    ) -> EvalReport:
        """
        產生評估報表

        返回:
            EvalReport（平均值為逐類別數值的平均）
        """
        selected = [s for s in samples if s.split == split and not s.is_hybrid]
        scores = self.score_samples(selected, bundle, mode, fixed_key, show_progress)
        result = class_metrics(scores)
        params: dict[str, int] = {}
        if bundle is not None:
            params = bundle.backbone.store().counts()
            params["feature"] = bundle.feature.num_parameters()
        return EvalReport(
            mode=mode,
            split=split,
            samples=len(selected),
            psnr=result.psnr,
            ssim=result.ssim,
            degraded=class_metrics(scores, degraded=True),
            params=params,
            macs=macs,
        )


# 全域實例
evaluation_service = EvaluationService()
