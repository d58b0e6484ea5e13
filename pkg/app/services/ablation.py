"""消融與變體研究 (Ablation / Variant Studies)

- run_ablation: 逐步開啟 Local → Global → Channel 自適應，再加上聯合微調，
  每一列在相同預算與種子下訓練，並對多個種子取平均
- fixed_vector_study: 每個類別平均向量套用到每個測試類別的 PSNR 矩陣
- cascade_study: 混合天氣上的單階段 / 雙階段串接比較
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from tqdm import tqdm

from app.config import build_config
from app.core.exceptions import ContractError
from app.schemas.config import ExperimentConfig
from app.schemas.report import AblationReport, AblationRow, ClassMetrics, EvalReport, StudyReport
from app.schemas.weather import WeatherSample
from app.services import metrics
from app.services.evaluation import SampleScore, evaluation_service
from app.services.inference import infer_cascade, infer_fixed, infer_full
from app.services.model_store import ModelBundle
from app.services.trainer import Trainer
from app.services.weather_synth import FLAKE, STREAK_HAZE

# (列名稱, local, global, channel)
ABLATION_ROWS = [
    ("baseline", False, False, False),
    ("+Local", True, False, False),
    ("+Local+Global", True, True, False),
    ("+Local+Global+Channel", True, True, True),
]
FINETUNE_ROW = "+Fine-Tune"


def _variant(config: ExperimentConfig, seed: int, local: bool, global_: bool, channel: bool) -> ExperimentConfig:
    values = config.model_dump()
    values["train"]["seed"] = seed
    values["model"]["init_seed"] = seed
    values["model"].update(adapt_local=local, adapt_global=global_, adapt_channel=channel)
    return build_config(values, f"ablation seed={seed}")


def _average(reports: Sequence[ClassMetrics]) -> tuple[dict[str, float], dict[str, float]]:
    keys = list(reports[0].psnr)
    psnr = {k: float(np.mean([r.psnr[k] for r in reports])) for k in keys}
    ssim = {k: float(np.mean([r.ssim[k] for r in reports])) for k in keys}
    return psnr, ssim


def run_ablation(
    samples: Sequence[WeatherSample],
    config: ExperimentConfig,
    seeds: Sequence[int] = (0, 1, 2),
    show_progress: bool = True,
) -> AblationReport:
    """
    消融研究

    參數:
        samples: 單一天氣資料集（含 train / val / test）
        config: 基礎設定（預算取自 train.*）
        seeds: 每個種子重新初始化並訓練所有列

    返回:
        AblationReport（5 列，數值為各種子的平均）
    """
    if not seeds:
        raise ContractError("消融研究至少需要一個種子")

    results: dict[str, list[ClassMetrics]] = {name: [] for name, *_ in ABLATION_ROWS}
    results[FINETUNE_ROW] = []
    flags: dict[str, bool] = {name: False for name in results}
    degraded: Optional[ClassMetrics] = None

    for seed in seeds:
        print(f"🧪 消融種子 {seed}：預訓練共用的特徵網路")
        pre = ModelBundle(_variant(config, seed, True, True, True))
        Trainer(pre, show_progress=show_progress).pretrain_feature_net(samples)
        feature_state = pre.feature.state_dict()

        bundle: Optional[ModelBundle] = None
        for name, local, global_, channel in ABLATION_ROWS:
            bundle = ModelBundle(_variant(config, seed, local, global_, channel))
            bundle.feature.load_state_dict(feature_state)
            bundle.bank = pre.bank
            bundle.phase, bundle.step, bundle.phase_complete = "pretrain", pre.step, True

            trainer = Trainer(bundle, show_progress=show_progress)
            trainer.train_restoration(samples)
            report = evaluation_service.evaluate(samples, bundle, "full", show_progress=False)
            results[name].append(report)
            degraded = degraded or report.degraded
            flags[name] = flags[name] or _below_degraded(trainer, samples, report)
            print(f"   {name}: {report.average_psnr:.2f} dB")

        # 最後一列接續「全部自適應」那一列做聯合微調
        trainer = Trainer(bundle, show_progress=show_progress)
        trainer.joint_finetune(samples)
        report = evaluation_service.evaluate(samples, bundle, "full", show_progress=False)
        results[FINETUNE_ROW].append(report)
        flags[FINETUNE_ROW] = flags[FINETUNE_ROW] or _below_degraded(trainer, samples, report)
        print(f"   {FINETUNE_ROW}: {report.average_psnr:.2f} dB")

    rows = []
    for name, local, global_, channel in [*ABLATION_ROWS, (FINETUNE_ROW, True, True, True)]:
        psnr, ssim = _average(results[name])
        rows.append(AblationRow(
            name=name, psnr=psnr, ssim=ssim,
            adapt_local=local, adapt_global=global_, adapt_channel=channel,
            finetuned=name == FINETUNE_ROW, seeds=list(seeds), below_degraded=flags[name],
        ))
        if flags[name]:
            print(f"⚠️ {name}: 驗證 PSNR 低於退化輸入，訓練預算可能不足")
    return AblationReport(classes=list(degraded.psnr), degraded=degraded, rows=rows)


def _below_degraded(trainer: Trainer, samples: Sequence[WeatherSample], report: EvalReport) -> bool:
    """以驗證集 PSNR 判斷；沒有驗證集時改用測試集"""
    baseline = trainer.degraded_validation(samples)
    if trainer.last_validation is not None and baseline is not None:
        return trainer.last_validation[0] < baseline[0]
    return report.average_psnr < report.degraded.average_psnr


def fixed_vector_study(bundle: ModelBundle, samples: Sequence[WeatherSample], show_progress: bool = True) -> StudyReport:
    """
    固定向量替換研究：列為使用的平均向量（avg_<類別>）與完整自適應（full），
    欄為測試類別，值為 PSNR
    """
    if bundle.bank is None:
        raise ContractError("固定向量研究需要類別平均向量庫")
    test = [s for s in samples if s.split == "test" and not s.is_hybrid]
    if not test:
        raise ContractError("沒有測試樣本")

    rows: dict[str, dict[str, float]] = {}
    for key in bundle.bank.keys():
        scores = evaluation_service.score_samples(test, bundle, "fixed", key, show_progress)
        rows[f"avg_{key}"] = _column_means(scores)
    scores = evaluation_service.score_samples(test, bundle, "full", show_progress=show_progress)
    rows["full"] = _column_means(scores)
    return StudyReport(kind="fixed", columns=list(rows["full"]), rows=rows)


def _column_means(scores: Sequence[SampleScore]) -> dict[str, float]:
    grouped: dict[str, list[float]] = {}
    for s in scores:
        grouped.setdefault(s.key, []).append(s.psnr)
    return {k: float(np.mean(v)) for k, v in grouped.items()}


def cascade_study(bundle: ModelBundle, hybrids: Sequence[WeatherSample], show_progress: bool = True) -> StudyReport:
    """
    串接順序研究（STREAK_HAZE + FLAKE 混合樣本）

    返回:
        StudyReport，欄為 psnr / ssim，並記錄參數 checksum 是否在推論前後一致
    """
    if bundle.bank is None:
        raise ContractError("串接研究需要類別平均向量庫")
    if not hybrids:
        raise ContractError("沒有混合天氣樣本（請以 synth --hybrid 產生）")

    feature, backbone, bank = bundle.feature, bundle.backbone, bundle.bank
    variants = {"single_full": lambda x: infer_full(x, feature, backbone)}
    for key in bank.keys():
        variants[f"single_fixed_{key}"] = lambda x, key=key: infer_fixed(x, key, bank, backbone)
    derain_first = [STREAK_HAZE.key, FLAKE.key]
    variants["two_stage_derain_first"] = lambda x: infer_cascade(x, derain_first, feature, backbone, bank)
    variants["two_stage_snow_first"] = lambda x: infer_cascade(x, derain_first[::-1], feature, backbone, bank)

    before = (backbone.checksum(), feature.checksum())
    rows: dict[str, dict[str, float]] = {
        "degraded_input": {
            "psnr": float(np.mean([metrics.psnr(s.degraded, s.clean) for s in hybrids])),
            "ssim": float(np.mean([metrics.ssim(s.degraded, s.clean) for s in hybrids])),
        }
    }
    for name, fn in tqdm(variants.items(), desc="串接研究", disable=not show_progress):
        outputs = [fn(s.degraded).numpy() for s in hybrids]
        rows[name] = {
            "psnr": float(np.mean([metrics.psnr(y, s.clean) for y, s in zip(outputs, hybrids)])),
            "ssim": float(np.mean([metrics.ssim(y, s.clean) for y, s in zip(outputs, hybrids)])),
        }
    stable = before == (backbone.checksum(), feature.checksum())
    if not stable:
        print("❌ 串接推論前後參數 checksum 不一致")
    return StudyReport(kind="cascade", columns=["psnr", "ssim"], rows=rows, checksum_stable=stable)
