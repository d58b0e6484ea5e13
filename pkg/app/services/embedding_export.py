"""特徵向量匯出：每張影像的 v 寫成 CSV（dim_0..dim_{D-1},label,split），供 t-SNE 等外部工具使用"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from app.core.exceptions import DatasetIOError
from app.core.tensor import no_grad
from app.models.feature_extractor import extract_features
from app.schemas.weather import WeatherSample
from app.services.model_store import ModelBundle
from app.services.weather_synth import default_registry


def compute_embeddings(samples: Sequence[WeatherSample], bundle: ModelBundle,
                       show_progress: bool = True) -> np.ndarray:
    """返回 [N×D] 的特徵向量矩陣（f64）"""
    rows = []
    with no_grad():
        for s in tqdm(samples, desc="特徵向量", disable=not show_progress):
            rows.append(extract_features(bundle.as_tensor(s.degraded), bundle.feature).numpy())
    return np.asarray(rows, dtype=np.float64).reshape(len(samples), bundle.config.feature.dim)


def label_of(sample: WeatherSample) -> str:
    """單一類別用類別鍵；混合樣本以 + 連接"""
    return "+".join(default_registry.get(c).key for c in sample.classes)


def export_embeddings(path: Union[str, Path], samples: Sequence[WeatherSample], bundle: ModelBundle,
                      split: Optional[str] = None, show_progress: bool = True) -> Path:
    """
    寫出特徵向量 CSV

    參數:
        split: 只匯出指定切分（None 表示全部）

    返回:
        輸出路徑
    """
    selected = [s for s in samples if split is None or s.split == split]
    vectors = compute_embeddings(selected, bundle, show_progress)
    dim = bundle.config.feature.dim
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow([*(f"dim_{i}" for i in range(dim)), "label", "split"])
            for s, v in zip(selected, vectors):
                writer.writerow([*(f"{x:.8g}" for x in v), label_of(s), s.split])
    except OSError as e:
        raise DatasetIOError(f"無法寫入 {path}: {e}") from e
    print(f"✅ 已匯出 {len(selected)} 筆特徵向量 → {path}")
    return path
