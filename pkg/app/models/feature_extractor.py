"""特徵萃取超網路 F_feat

兩個編碼尺度 → 每個尺度的 Gram 矩陣 → 上三角向量 → 各自的投影 MLP →
串接後投影成單一天氣特徵向量 v。以對比損失訓練，並提供類別平均向量庫。
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

from app.core import functional as F
from app.core.exceptions import AbsentClassError, ConfigError, ContractError, DimensionError
from app.core.module import Module
from app.core.tensor import Tensor
from app.models.layers import MLP, Conv2d, EncoderBlock, LayerNorm, Linear, map_to_tokens, tokens_to_map
from app.schemas.config import BackboneConfig, FeatureConfig
from app.schemas.weather import WeatherFeatureVector

FEATURE_SCALES = 2


def gram(f: Tensor) -> Tensor:
    """
    G = M Mᵀ / (H·W)，M 為 F 攤平成 [C×(H·W)]

    參數:
        f: 特徵圖 [C×H×W]

    返回:
        [C×C] 對稱半正定矩陣
    """
    if f.ndim != 3:
        raise DimensionError(f"gram: 需要 [C×H×W]，實際 {list(f.shape)}")
    c, h, w = f.shape
    if h * w < 1:
        raise DimensionError(f"gram: 空間維度為空 ({h}×{w})")
    m = F.reshape(f, (c, h * w))
    return F.mul(F.matmul(m, F.transpose(m, (1, 0))), 1.0 / (h * w))


def upper_tri_vec(g: Tensor) -> Tensor:
    """以列優先順序取出上三角（含對角線），長度 C(C+1)/2"""
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise DimensionError(f"upper_tri_vec: 需要方陣，實際 {list(g.shape)}")
    c = g.shape[0]
    rows, cols = np.triu_indices(c)
    return F.take(g, rows * c + cols)


class FeatureStage(Module):
    """patch embedding + 固定權重的 Transformer block"""

    def __init__(self, name: str, c_in: int, c_out: int, heads: int, stride: int, n_blocks: int,
                 backbone_cfg: BackboneConfig, rng: np.random.Generator):
        dtype = backbone_cfg.dtype
        self.embed = Conv2d(c_in, c_out, backbone_cfg.patch_kernel, rng, dtype, stride=stride)
        self.blocks = [
            EncoderBlock(f"{name}.blocks.{i}", c_out, heads, rng, dtype, backbone_cfg.mlp_ratio,
                         backbone_cfg.activation)
            for i in range(n_blocks)
        ]
        self.norm = LayerNorm(c_out, dtype)

    def forward(self, x: Tensor) -> Tensor:
        emb = self.embed(x)
        hw = (emb.shape[1], emb.shape[2])
        tokens = map_to_tokens(emb)
        for block in self.blocks:
            tokens = block(tokens, hw)
        return tokens_to_map(self.norm(tokens), hw)


class FeatureExtractor(Module):
    """
    v = F_feat(I; τ)

    編碼器通道數取主幹網路前兩個尺度，參數 τ 與主幹網路完全獨立。
    """

    def __init__(self, cfg: FeatureConfig, backbone_cfg: BackboneConfig):
        if backbone_cfg.scales < FEATURE_SCALES:
            raise ConfigError(f"特徵網路需要主幹網路至少 {FEATURE_SCALES} 個尺度，實際 {backbone_cfg.scales}")
        self.cfg = cfg
        self.dim = cfg.dim
        rng = np.random.default_rng(cfg.init_seed)
        channels = backbone_cfg.scaled_channels[:FEATURE_SCALES]
        self.strides = backbone_cfg.strides[:FEATURE_SCALES]
        dtype = backbone_cfg.dtype
        d_e = cfg.embed_width

        c_in = [3, channels[0]]
        self.stages = [
            FeatureStage(f"stages.{s}", c_in[s], channels[s], backbone_cfg.heads[s], self.strides[s],
                         cfg.blocks, backbone_cfg, rng)
            for s in range(FEATURE_SCALES)
        ]
        self.projectors = [
            MLP(c * (c + 1) // 2, 2 * d_e, d_e, rng, dtype, backbone_cfg.activation)
            for c in channels
        ]
        self.fuse = Linear(FEATURE_SCALES * d_e, cfg.dim, rng, dtype)

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    def forward(self, image: Tensor) -> Tensor:
        if image.ndim != 3 or image.shape[0] != 3:
            raise DimensionError(f"特徵網路輸入必須是 [3×H×W]，實際 {list(image.shape)}")
        stride = self.total_stride
        if image.shape[1] % stride or image.shape[2] % stride:
            raise DimensionError(f"影像尺寸 {image.shape[1]}×{image.shape[2]} 無法被特徵網路步幅 {stride} 整除")
        x = image
        embeddings = []
        for stage, projector in zip(self.stages, self.projectors):
            x = stage(x)
            embeddings.append(projector(upper_tri_vec(gram(x))))
        return self.fuse(F.concatenate(embeddings, axis=0))


def extract_features(image: Tensor, net: FeatureExtractor) -> WeatherFeatureVector:
    """對單張影像計算 v（純函式，與批次中其他影像無關）"""
    return WeatherFeatureVector(values=net(image), source="computed")


def _values(v: Union[WeatherFeatureVector, Tensor]) -> Tensor:
    return v.values if isinstance(v, WeatherFeatureVector) else v


def contrastive_loss(
    vectors: Sequence[Union[WeatherFeatureVector, Tensor]],
    labels: Sequence[int],
    margin: float = 0.5,
) -> Tensor:
    """
    批次內所有無序配對的對比損失

    同類別: [m − d(v_a, v_b)]_+；不同類別: d(v_a, v_b)；d 為餘弦相似度

    參數:
        vectors: 特徵向量（至少 2 個）
        labels: 對應的類別 ID
        margin: m，0 < m ≤ 1

    返回:
        純量張量
    """
    if len(vectors) < 2:
        raise ContractError(f"contrastive_loss 至少需要 2 個向量，實際 {len(vectors)}")
    if len(labels) != len(vectors):
        raise ContractError(f"向量數 {len(vectors)} 與標籤數 {len(labels)} 不符")
    if not 0 < margin <= 1:
        raise ContractError(f"margin 必須在 (0, 1]，實際 {margin}")

    values = [_values(v) for v in vectors]
    total: Optional[Tensor] = None
    for a in range(len(values)):
        for b in range(a + 1, len(values)):
            d = F.cosine_similarity(values[a], values[b])
            term = F.relu(F.add(F.neg(d), margin)) if labels[a] == labels[b] else d
            total = term if total is None else F.add(total, term)
    return total


def average_feature(
    vectors: Sequence[Union[WeatherFeatureVector, Tensor, np.ndarray]],
    class_filter: Optional[int] = None,
    labels: Optional[Sequence[int]] = None,
) -> WeatherFeatureVector:
    """
    逐元素算術平均

    參數:
        vectors: 特徵向量
        class_filter: 只平均此類別（需同時提供 labels）
        labels: 各向量的類別 ID
    """
    if class_filter is not None:
        if labels is None or len(labels) != len(vectors):
            raise ContractError("依類別篩選時必須提供等長的 labels")
        vectors = [v for v, label in zip(vectors, labels) if label == class_filter]
    if not vectors:
        raise AbsentClassError(f"類別 {class_filter} 沒有任何特徵向量可平均")
    arrays = [
        v.numpy() if isinstance(v, (WeatherFeatureVector, Tensor)) else np.asarray(v)
        for v in vectors
    ]
    dtype = arrays[0].dtype if arrays[0].dtype in (np.float32, np.float64) else np.float32
    mean = np.mean(np.stack(arrays).astype(np.float64), axis=0).astype(dtype)
    return WeatherFeatureVector(values=Tensor(mean, dtype=dtype), source="class_average")


class ClassAverageBank:
    """
    類別平均向量庫 {類別鍵 → v̄_i}

    凍結後不可再修改；推論時以 `get()` 取出，找不到類別時拋出 AbsentClassError。
    """

    def __init__(self):
        self._vectors: dict[str, np.ndarray] = {}
        self._counts: dict[str, int] = {}
        self._frozen = False

    @classmethod
    def from_vectors(cls, vectors: Sequence[Union[WeatherFeatureVector, Tensor, np.ndarray]],
                     labels: Sequence[int], keys: dict[int, str]) -> "ClassAverageBank":
        """
        以訓練集特徵向量建立並凍結向量庫

        參數:
            vectors: 訓練集每張影像的 v
            labels: 對應的類別 ID
            keys: 類別 ID → 類別鍵（依此順序建立項目）
        """
        bank = cls()
        for class_id, key in keys.items():
            count = sum(1 for label in labels if label == class_id)
            if count == 0:
                continue
            avg = average_feature(vectors, class_filter=class_id, labels=labels)
            bank.set(key, avg.numpy(), count)
        return bank.freeze()

    @property
    def frozen(self) -> bool:
        return self._frozen

    def set(self, key: str, vector: np.ndarray, count: int) -> None:
        if self._frozen:
            raise ContractError("類別平均向量庫已凍結，不可修改")
        vector = np.asarray(vector)
        if vector.ndim != 1:
            raise DimensionError(f"平均向量必須是一維，實際 {list(vector.shape)}")
        if self._vectors:
            dim = next(iter(self._vectors.values())).shape
            if vector.shape != dim:
                raise DimensionError(f"平均向量維度 {list(vector.shape)} 與向量庫 {list(dim)} 不符")
        self._vectors[key] = vector.copy()
        self._counts[key] = int(count)

    def freeze(self) -> "ClassAverageBank":
        self._frozen = True
        return self

    def keys(self) -> list[str]:
        return list(self._vectors)

    def counts(self) -> dict[str, int]:
        return dict(self._counts)

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, key: str) -> bool:
        return key in self._vectors

    def get(self, key: str) -> WeatherFeatureVector:
        if key not in self._vectors:
            raise AbsentClassError(f"類別平均向量庫中沒有類別 '{key}'（可用: {', '.join(self._vectors) or '無'}）")
        return WeatherFeatureVector(values=Tensor(self._vectors[key], dtype=self._vectors[key].dtype), source="class_average")

    def state_dict(self, prefix: str = "bank.") -> dict[str, np.ndarray]:
        return {f"{prefix}{key}": vec for key, vec in self._vectors.items()}

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray], counts: dict[str, int], prefix: str = "bank.") -> "ClassAverageBank":
        """由檢查點項目還原（順序依 counts 的鍵）"""
        bank = cls()
        for key, count in counts.items():
            name = f"{prefix}{key}"
            if name not in state:
                raise AbsentClassError(f"檢查點缺少類別平均向量 {name}")
            bank.set(key, state[name], count)
        return bank.freeze()
