"""推論模式 (Inference Modes)

- full: v = F_feat(I)，Y = F_res(I; v)
- fixed: 以類別平均向量 v̄ 取代特徵網路
- cascade: 第一階段用 v̄_{order[0]}，之後每一階段在中間結果上重新計算 v（或選用固定向量）
- identify / route: 天氣分數 s_i = softmax(cos(v, v̄_i))，選出 i* 並交給對應的專家模型

所有模式都在 tape 之外執行，參數唯讀，可多執行緒同時推論。
"""

from __future__ import annotations

import shlex
import subprocess
import tempfile
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.core import functional as F
from app.core.exceptions import ContractError, DegenerateEmbeddingError, RoutingError
from app.core.tensor import Tensor, no_grad
from app.models.backbone import RestorationBackbone, restore
from app.models.feature_extractor import ClassAverageBank, FeatureExtractor, extract_features
from app.schemas.weather import WeatherFeatureVector, WeatherScores
from app.services.dataset_store import read_ppm, write_ppm

MAX_CASCADE_DEPTH = 4

ImageLike = Union[np.ndarray, Tensor]
ExpertFn = Callable[[np.ndarray], np.ndarray]


def _as_tensor(image: ImageLike, backbone: RestorationBackbone) -> Tensor:
    dtype = backbone.cfg.dtype
    if isinstance(image, Tensor):
        return image if image.dtype == dtype else image.astype(dtype)
    return Tensor(np.asarray(image), dtype=dtype)


def infer_full(image: ImageLike, feature: FeatureExtractor, backbone: RestorationBackbone) -> Tensor:
    """Y = F_res(I; θ_fix, θ_adap(F_feat(I)))"""
    x = _as_tensor(image, backbone)
    with no_grad():
        v = extract_features(x, feature)
        return restore(x, v, backbone, clamp=True)


def infer_fixed(image: ImageLike, key: str, bank: ClassAverageBank, backbone: RestorationBackbone) -> Tensor:
    """Y = F_res(I; v̄_key)，完全略過特徵網路"""
    v = bank.get(key)
    x = _as_tensor(image, backbone)
    with no_grad():
        return restore(x, v, backbone, clamp=True)


def infer_cascade(
    image: ImageLike,
    order: Sequence[str],
    feature: FeatureExtractor,
    backbone: RestorationBackbone,
    bank: ClassAverageBank,
    fixed_later: bool = False,
) -> Tensor:
    """
    多階段串接推論（所有階段共用同一組權重）

    參數:
        order: 各階段針對的類別鍵，例如 ["streak", "flake"]
        fixed_later: 第二階段起改用 v̄_{order[k]}，而不是在中間結果上重新計算 v

    返回:
        最後一個階段的輸出
    """
    if not order:
        raise ContractError("串接順序至少需要一個類別")
    if len(order) > MAX_CASCADE_DEPTH:
        raise ContractError(f"串接深度 {len(order)} 超過上限 {MAX_CASCADE_DEPTH}")
    for key in order:
        bank.get(key)

    y = infer_fixed(image, order[0], bank, backbone)
    for key in order[1:]:
        if fixed_later:
            y = infer_fixed(y, key, bank, backbone)
        else:
            y = infer_full(y, feature, backbone)
    return y


def _softmax(values: np.ndarray) -> np.ndarray:
    return F.softmax(Tensor(values, dtype="f64"), axis=0).numpy()


def scores_from_vector(v: WeatherFeatureVector, bank: ClassAverageBank) -> WeatherScores:
    """d_i = cos(v, v̄_i)，s = softmax(d)，i* = argmax s"""
    if len(bank) == 0:
        raise ContractError("類別平均向量庫是空的")
    values = np.asarray(v.numpy(), dtype=np.float64)
    if not np.linalg.norm(values) > 0:
        raise DegenerateEmbeddingError("特徵向量範數為零，無法計算天氣分數")
    keys = bank.keys()
    sims = []
    for key in keys:
        ref = np.asarray(bank.get(key).numpy(), dtype=np.float64)
        if not np.linalg.norm(ref) > 0:
            raise DegenerateEmbeddingError(f"類別 '{key}' 的平均向量範數為零")
        sims.append(F.cosine_similarity(Tensor(values, dtype="f64"), Tensor(ref, dtype="f64")).item())
    scores = _softmax(np.asarray(sims))
    best = int(np.argmax(scores))
    return WeatherScores(
        classes=keys,
        similarities=[float(d) for d in sims],
        scores=[float(s) for s in scores],
        argmax=keys[best],
    )


def weather_scores(image: ImageLike, bank: ClassAverageBank, feature: FeatureExtractor,
                   backbone: Optional[RestorationBackbone] = None) -> WeatherScores:
    """對影像計算天氣類型分數"""
    dtype = backbone.cfg.dtype if backbone is not None else feature.fuse.weight.dtype
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image), dtype=dtype)
    with no_grad():
        v = extract_features(x, feature)
    return scores_from_vector(v, bank)


# ==================== 專家路由 ====================

class ExpertRegistry:
    """類別鍵 → 影像到影像的還原函式"""

    def __init__(self):
        self._experts: dict[str, ExpertFn] = {}

    def register(self, key: str, expert: ExpertFn) -> None:
        self._experts[key] = expert

    def keys(self) -> list[str]:
        return list(self._experts)

    def __contains__(self, key: str) -> bool:
        return key in self._experts

    def get(self, key: str) -> ExpertFn:
        if key not in self._experts:
            raise RoutingError(f"沒有類別 '{key}' 的專家模型（已登錄: {', '.join(self._experts) or '無'}）")
        return self._experts[key]

    def check_covers(self, keys: Sequence[str]) -> None:
        missing = [k for k in keys if k not in self._experts]
        if missing:
            raise RoutingError(f"專家登錄表缺少類別: {', '.join(missing)}")


class CommandExpert:
    """
    外部指令專家：影像以 PPM 檔交換

    參數:
        command: 指令樣板，以 {input} / {output} 代表輸入與輸出 PPM 路徑，
            例如 "my_derain --in {input} --out {output}"
        timeout: 逾時秒數
    """

    def __init__(self, command: str, timeout: float = 300.0):
        if "{input}" not in command or "{output}" not in command:
            raise RoutingError(f"專家指令必須包含 {{input}} 與 {{output}}: {command}")
        self.command = command
        self.timeout = timeout

    def __call__(self, image: np.ndarray) -> np.ndarray:
        with tempfile.TemporaryDirectory(prefix="expert_") as tmp:
            src = Path(tmp) / "input.ppm"
            dst = Path(tmp) / "output.ppm"
            write_ppm(src, image)
            args = [part.format(input=src, output=dst) for part in shlex.split(self.command)]
            try:
                subprocess.run(args, check=True, timeout=self.timeout, capture_output=True)
            except (OSError, subprocess.SubprocessError) as e:
                raise RoutingError(f"專家指令執行失敗: {self.command}: {e}") from e
            if not dst.exists():
                raise RoutingError(f"專家指令沒有產生輸出檔: {self.command}")
            return read_ppm(dst)


class RouteResult(BaseModel):
    """路由結果（輸出影像、選擇的類別、稽核用分數）"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    image: np.ndarray
    chosen: str
    scores: WeatherScores


def route_expert(image: ImageLike, registry: ExpertRegistry, bank: ClassAverageBank,
                 feature: FeatureExtractor) -> RouteResult:
    """Y = registry[i*](I)"""
    registry.check_covers(bank.keys())
    scores = weather_scores(image, bank, feature)
    array = image.numpy() if isinstance(image, Tensor) else np.asarray(image)
    out = np.asarray(registry.get(scores.argmax)(array))
    return RouteResult(image=out, chosen=scores.argmax, scores=scores)


def fixed_vector_experts(bank: ClassAverageBank, backbone: RestorationBackbone) -> ExpertRegistry:
    """以每個類別的固定向量推論作為該類別的專家"""
    registry = ExpertRegistry()
    for key in bank.keys():
        registry.register(key, lambda img, key=key: infer_fixed(img, key, bank, backbone).numpy())
    return registry


# ==================== 分數報表 ====================

def score_csv_lines(rows: Sequence[tuple[str, WeatherScores]]) -> list[str]:
    """CSV: image_id,d_<class>…,s_<class>…,argmax"""
    if not rows:
        return []
    keys = rows[0][1].classes
    header = ["image_id", *(f"d_{k}" for k in keys), *(f"s_{k}" for k in keys), "argmax"]
    lines = [",".join(header)]
    for image_id, s in rows:
        values = [image_id, *(f"{d:.6f}" for d in s.similarities), *(f"{p:.6f}" for p in s.scores), s.argmax]
        lines.append(",".join(values))
    return lines
