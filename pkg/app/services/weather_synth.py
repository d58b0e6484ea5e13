"""合成天氣資料服務 (Weather Synthesis Service)

以種子決定的程序化乾淨影像，加上三種可參數化的天氣退化：
- DROP: 橢圓區域內局部模糊 + 提亮（雨滴）
- STREAK_HAZE: 斜向亮線 + 全域霧化 (1−t)·I + t，t = 0.3·severity（雨 + 霧）
- FLAKE: 白色近圓形小點（雪）

每個樣本都是 (seed, 設定) 的純函式，資料集只需保存種子即可重建。
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy.ndimage import gaussian_filter, zoom
from tqdm import tqdm

from app.core.exceptions import ConfigError, ContractError
from app.schemas.config import DataConfig
from app.schemas.weather import DegradationClass, WeatherSample

MIN_SIZE = 16
SPLITS = ("train", "val", "test")

# 影像 [3×H×W] float64, severity, rng → 影像
DegradeFn = Callable[[np.ndarray, float, np.random.Generator], np.ndarray]


# ==================== 種子 ====================

def derive_seed(*keys: int) -> int:
    """由多個整數導出一個 u64 種子"""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0])


def stage_seed(seed: int, stage: int) -> int:
    """退化第 stage 個類別時使用的子種子（組合律依賴此函式）"""
    return derive_seed(seed, stage)


def sample_severity(seed: int, low: float = 0.3, high: float = 1.0) -> float:
    """由樣本種子決定的嚴重度，保證 > 0"""
    rng = np.random.default_rng(derive_seed(seed, 0xFFFF))
    return float(np.float32(rng.uniform(low, high)))


# ==================== 乾淨影像 ====================

def gen_clean(seed: int, height: int, width: int) -> np.ndarray:
    """
    程序化場景：平滑色彩漸層背景 + 3–8 個矩形 / 圓盤 + 低振幅 value noise

    返回:
        float32 [3×H×W]，值域 [0,1]
    """
    if height < MIN_SIZE or width < MIN_SIZE:
        raise ConfigError(f"影像尺寸必須 ≥ {MIN_SIZE}×{MIN_SIZE}，實際 {height}×{width}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)

    c0, c1 = rng.uniform(0.15, 0.85, size=(2, 3))
    angle = rng.uniform(0.0, 2.0 * np.pi)
    ramp = np.cos(angle) * xx / width + np.sin(angle) * yy / height
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12)
    img = c0[:, None, None] * (1.0 - ramp) + c1[:, None, None] * ramp

    for _ in range(int(rng.integers(3, 9))):
        color = rng.uniform(0.0, 1.0, size=3)
        if rng.random() < 0.5:
            h = int(rng.integers(3, height // 2 + 1))
            w = int(rng.integers(3, width // 2 + 1))
            y0 = int(rng.integers(0, height - h + 1))
            x0 = int(rng.integers(0, width - w + 1))
            img[:, y0:y0 + h, x0:x0 + w] = color[:, None, None]
        else:
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            r = rng.uniform(2.0, min(height, width) / 4)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            img[:, mask] = color[:, None]

    grid = rng.uniform(-1.0, 1.0, size=(3, height // 8 + 2, width // 8 + 2))
    noise = zoom(grid, (1, height / grid.shape[1], width / grid.shape[2]), order=1, mode="nearest", grid_mode=True)
    img = img + 0.05 * noise[:, :height, :width]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ==================== 退化 ====================

def _drop(img: np.ndarray, severity: float, rng: np.random.Generator) -> np.ndarray:
    _, h, w = img.shape
    scale = min(h, w) / 32.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    bright = np.clip(gaussian_filter(img, sigma=(0, 1.5 * scale, 1.5 * scale)) * 1.1 + 0.1 * severity, 0.0, 1.0)
    mask = np.zeros((h, w))
    for _ in range(int(rng.integers(5, 21))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry = rng.uniform(1.5, 2.0 + 3.0 * severity) * scale
        rx = ry * rng.uniform(0.6, 1.4)
        d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        mask = np.maximum(mask, np.clip(1.2 - d, 0.0, 1.0))
    alpha = (0.5 + 0.5 * severity) * mask
    return img * (1.0 - alpha) + bright * alpha


def _streak_haze(img: np.ndarray, severity: float, rng: np.random.Generator) -> np.ndarray:
    _, h, w = img.shape
    scale = min(h, w) / 32.0
    layer = np.zeros((h, w))
    angle = rng.uniform(-0.5, 0.5)
    n_streaks = int(rng.integers(15, 40) * (h * w) / 1024.0) + 1
    intensity = 0.3 + 0.5 * severity
    for _ in range(n_streaks):
        y0, x0 = rng.uniform(-4 * scale, h), rng.uniform(0, w)
        length = rng.uniform(4.0, 10.0) * scale
        steps = np.linspace(0.0, length, int(length * 2) + 2)
        ys = np.round(y0 + steps * np.cos(angle)).astype(int)
        xs = np.round(x0 + steps * np.sin(angle)).astype(int)
        inside = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        layer[ys[inside], xs[inside]] = intensity
    img = img + layer * (1.0 - img)
    t = 0.3 * severity
    return (1.0 - t) * img + t


def _flake(img: np.ndarray, severity: float, rng: np.random.Generator) -> np.ndarray:
    _, h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = np.zeros((h, w))
    count = int(rng.integers(30, 30 + int(round(120 * severity)) + 1))
    for _ in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(1.0, 3.0)
        mask[(yy - cy) ** 2 + (xx - cx) ** 2 < r * r] = 1.0
    alpha = 0.6 + 0.4 * severity
    return img + alpha * mask * (1.0 - img)


class DegradationRegistry:
    """退化類別登錄表（預設三類，可擴充以測試混合退化）"""

    def __init__(self):
        self._classes: dict[int, DegradationClass] = {}
        self._fns: dict[int, DegradeFn] = {}

    def register(self, cls: DegradationClass, fn: DegradeFn) -> DegradationClass:
        if cls.id in self._classes:
            raise ConfigError(f"退化類別 ID {cls.id} 已被 {self._classes[cls.id].key} 使用")
        if any(c.key == cls.key for c in self._classes.values()):
            raise ConfigError(f"退化類別鍵 '{cls.key}' 重複")
        self._classes[cls.id] = cls
        self._fns[cls.id] = fn
        return cls

    def classes(self) -> list[DegradationClass]:
        return [self._classes[i] for i in sorted(self._classes)]

    def keys(self) -> dict[int, str]:
        return {c.id: c.key for c in self.classes()}

    def get(self, ref: Union[int, str, DegradationClass]) -> DegradationClass:
        if isinstance(ref, DegradationClass):
            ref = ref.id
        for c in self._classes.values():
            if c.id == ref or c.key == ref or c.name == ref:
                return c
        raise ConfigError(f"未知的退化類別: {ref}（可用: {', '.join(c.key for c in self.classes())}）")

    def parse(self, text: str) -> list[DegradationClass]:
        """解析逗號分隔的類別清單，例如 "streak,flake" """
        return [self.get(part.strip()) for part in text.split(",") if part.strip()]

    def apply(self, cls: DegradationClass, img: np.ndarray, severity: float, rng: np.random.Generator) -> np.ndarray:
        return self._fns[cls.id](img, severity, rng)

    def to_mask(self, classes: Iterable[DegradationClass]) -> int:
        mask = 0
        for c in classes:
            mask |= 1 << c.id
        return mask

    def from_mask(self, mask: int) -> list[DegradationClass]:
        """依 ID 遞增順序還原類別清單"""
        found = [c for c in self.classes() if mask & (1 << c.id)]
        if not found or mask >> 8:
            raise ContractError(f"類別 bitmask {mask:#04x} 無效")
        return found

    @classmethod
    def default(cls) -> "DegradationRegistry":
        registry = cls()
        registry.register(DegradationClass(id=0, key="drop", name="DROP"), _drop)
        registry.register(DegradationClass(id=1, key="streak", name="STREAK_HAZE"), _streak_haze)
        registry.register(DegradationClass(id=2, key="flake", name="FLAKE"), _flake)
        return registry


# 全域實例
default_registry = DegradationRegistry.default()
DROP, STREAK_HAZE, FLAKE = default_registry.classes()
HYBRID_ORDER = [STREAK_HAZE, FLAKE]


def degrade(
    clean: np.ndarray,
    classes: Sequence[DegradationClass],
    severity: float,
    seed: int,
    registry: Optional[DegradationRegistry] = None,
    first_stage: int = 0,
) -> np.ndarray:
    """
    依清單順序套用退化，每個類別後截斷到 [0,1]

    參數:
        clean: [3×H×W] 影像
        classes: 退化類別（至少一個）
        severity: (0, 1]
        seed: 樣本種子；第 k 個類別使用 stage_seed(seed, first_stage + k)
        first_stage: 接續先前的退化時使用，使
            degrade(x, [A, B]) == degrade(degrade(x, [A]), [B], first_stage=1)

    返回:
        float32 [3×H×W]
    """
    if not classes:
        raise ContractError("degrade: 類別清單不可為空")
    if not 0.0 < severity <= 1.0:
        raise ContractError(f"degrade: severity 必須在 (0, 1]，實際 {severity}")
    registry = registry or default_registry
    img = np.asarray(clean, dtype=np.float32)
    for k, cls in enumerate(classes):
        rng = np.random.default_rng(stage_seed(seed, first_stage + k))
        out = registry.apply(registry.get(cls), img.astype(np.float64), float(severity), rng)
        img = np.clip(out, 0.0, 1.0).astype(np.float32)
    return img


# ==================== 資料集 ====================

def make_sample(seed: int, classes: Sequence[DegradationClass], height: int, width: int, split: str = "train",
                registry: Optional[DegradationRegistry] = None) -> WeatherSample:
    """由樣本種子重建一筆樣本"""
    severity = sample_severity(seed)
    clean = gen_clean(seed, height, width)
    degraded = degrade(clean, classes, severity, seed, registry)
    return WeatherSample(
        clean=clean,
        degraded=degraded,
        classes=[c.id for c in classes],
        severity=severity,
        seed=seed,
        split=split,
    )


def split_indices(count: int, seed: int) -> list[str]:
    """以種子洗牌決定 80/10/10 的 train/val/test 切分"""
    n_val = int(round(0.1 * count))
    n_test = int(round(0.1 * count))
    n_train = count - n_val - n_test
    order = np.random.default_rng(seed).permutation(count)
    tags = ["train"] * count
    for rank, idx in enumerate(order):
        if rank >= n_train + n_val:
            tags[idx] = "test"
        elif rank >= n_train:
            tags[idx] = "val"
    return tags


def make_dataset(cfg: DataConfig, registry: Optional[DegradationRegistry] = None,
                 height: Optional[int] = None, width: Optional[int] = None,
                 show_progress: bool = True) -> list[WeatherSample]:
    """
    建立各類別樣本數相等（預設）的單一天氣資料集

    參數:
        cfg: 資料設定（counts 依登錄表類別順序對應）
        height, width: 覆寫影像尺寸（例如評估用的 64×64）

    返回:
        依類別排列的樣本清單
    """
    registry = registry or default_registry
    classes = registry.classes()
    if len(cfg.counts) != len(classes):
        raise ConfigError(f"data.counts 有 {len(cfg.counts)} 個值，但登錄表有 {len(classes)} 個類別")
    if any(c <= 0 for c in cfg.counts):
        raise ConfigError("data.counts 必須全部 > 0")
    h = height or cfg.height
    w = width or cfg.width

    samples: list[WeatherSample] = []
    total = sum(cfg.counts)
    with tqdm(total=total, desc="合成資料", disable=not show_progress) as bar:
        for cls, count in zip(classes, cfg.counts):
            tags = split_indices(count, derive_seed(cfg.seed, cls.id, 1))
            for j in range(count):
                seed = derive_seed(cfg.seed, cls.id, 0, j)
                samples.append(make_sample(seed, [cls], h, w, tags[j], registry))
                bar.update(1)
    return samples


def make_hybrid_set(count: int, height: int, width: int, seed: int,
                    order: Optional[Sequence[DegradationClass]] = None,
                    registry: Optional[DegradationRegistry] = None) -> list[WeatherSample]:
    """混合退化樣本（只用於串接推論評估，不參與訓練），全部標為 test"""
    registry = registry or default_registry
    order = list(order or HYBRID_ORDER)
    # 容器以 bitmask 保存類別，重建時依 ID 遞增順序套用
    order = sorted(order, key=lambda c: c.id)
    return [
        make_sample(derive_seed(seed, 0xB1, j), order, height, width, "test", registry)
        for j in range(count)
    ]


def regenerate(sample: WeatherSample, registry: Optional[DegradationRegistry] = None) -> WeatherSample:
    """以樣本保存的種子重建（用於驗證資料集可重現）"""
    registry = registry or default_registry
    classes = [registry.get(c) for c in sample.classes]
    _, h, w = sample.clean.shape
    return make_sample(sample.seed, classes, h, w, sample.split, registry)
