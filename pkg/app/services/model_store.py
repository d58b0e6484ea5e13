"""模型組合與檢查點存取 (Model Bundle)

`ModelBundle` 集合一次實驗的所有可保存狀態：設定、特徵網路 τ、還原網路 θ、
感知代理網路、類別平均向量庫，以及目前訓練階段與優化器狀態（續訓用）。
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from app.config import build_config, dump_config, parse_config_text
from app.core.checkpoint import load_checkpoint, save_checkpoint
from app.core.exceptions import CheckpointError, ConfigError
from app.core.tensor import Tensor
from app.models.backbone import RestorationBackbone
from app.models.feature_extractor import ClassAverageBank, FeatureExtractor
from app.models.perceptual import PerceptualProxy
from app.schemas.config import ExperimentConfig

PHASES = ("init", "pretrain", "restore", "finetune")
FORMAT_TAG = "weatherformer"


class ModelBundle:
    """
    參數:
        config: 實驗設定
        phase: 最近一個（可能尚未完成的）訓練階段
        step: 該階段已完成的步數
        phase_complete: 該階段是否已跑完
    """

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.feature = FeatureExtractor(config.feature, config.model)
        self.backbone = RestorationBackbone(config.model, config.feature.dim)
        self.proxy = PerceptualProxy(config.train.proxy_seed, config.model.dtype)
        self.bank: Optional[ClassAverageBank] = None
        self.phase = "init"
        self.step = 0
        self.phase_complete = True
        self.optimizer_state: dict[str, np.ndarray] = {}
        self.optimizer_meta: dict[str, Any] = {}

    @property
    def dtype(self) -> str:
        return self.config.model.dtype

    def as_tensor(self, image: Union[np.ndarray, Tensor]) -> Tensor:
        """影像轉為模型 dtype 的張量"""
        if isinstance(image, Tensor):
            return image if image.dtype == self.dtype else image.astype(self.dtype)
        return Tensor(np.asarray(image), dtype=self.dtype)

    def has_completed(self, phase: str) -> bool:
        order = PHASES.index(phase)
        current = PHASES.index(self.phase)
        return current > order or (current == order and self.phase_complete)

    # ---------- 檢查點 ----------

    def entries(self) -> dict[str, np.ndarray]:
        entries: dict[str, np.ndarray] = {}
        entries.update(self.feature.state_dict("feature."))
        entries.update(self.backbone.state_dict("backbone."))
        entries.update(self.proxy.state_dict("proxy."))
        if self.bank is not None:
            entries.update(self.bank.state_dict("bank."))
        entries.update(self.optimizer_state)
        return entries

    def meta(self) -> dict[str, Any]:
        return {
            "format": FORMAT_TAG,
            "config": dump_config(self.config),
            "phase": self.phase,
            "phase_complete": self.phase_complete,
            "step": self.step,
            "seed": self.config.train.seed,
            "proxy_seed": self.config.train.proxy_seed,
            "bank_counts": [[k, n] for k, n in self.bank.counts().items()] if self.bank is not None else None,
            "optimizer": self.optimizer_meta or None,
        }

    def save(self, path: Union[str, Path]) -> Path:
        return save_checkpoint(path, self.entries(), self.meta())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ModelBundle":
        """
        讀取檢查點，逐一驗證參數名稱與形狀是否符合其中記錄的設定

        返回:
            ModelBundle
        """
        entries, meta = load_checkpoint(path)
        if meta.get("format") != FORMAT_TAG:
            raise CheckpointError(f"{path} 不是本專案的檢查點（缺少中繼資料）")
        try:
            config = build_config(parse_config_text(meta["config"], f"{path}:config"), f"{path}:config")
        except ConfigError as e:
            raise CheckpointError(f"檢查點內的設定無效: {e}") from e

        bundle = cls(config)
        bundle.feature.load_state_dict(entries, "feature.")
        bundle.backbone.load_state_dict(entries, "backbone.")
        bundle.proxy.load_state_dict(entries, "proxy.")
        if meta.get("bank_counts"):
            bundle.bank = ClassAverageBank.from_state(entries, {k: n for k, n in meta["bank_counts"]}, "bank.")
        bundle.optimizer_state = {k: v for k, v in entries.items() if k.startswith("adam.")}
        bundle.optimizer_meta = meta.get("optimizer") or {}
        if meta.get("phase") not in PHASES:
            raise CheckpointError(f"檢查點的訓練階段無效: {meta.get('phase')}")
        bundle.phase = meta["phase"]
        bundle.step = int(meta.get("step", 0))
        bundle.phase_complete = bool(meta.get("phase_complete", True))
        return bundle
