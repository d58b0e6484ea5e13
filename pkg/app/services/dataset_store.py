"""資料集容器服務 (MWDS Dataset Store)

MWDS 格式（little-endian）:
    magic "MWDS" | u32 version=1 | u64 樣本數
    每個樣本: u64 seed | u8 類別 bitmask | f32 severity | u8 split (0=train, 1=val, 2=test)
              | clean 張量 | degraded 張量
    張量: u8 ndim | u64 dims… | f32 資料

另提供 PPM (P6, 8-bit) 匯出 / 匯入，方便肉眼檢查與外部專家模型交換影像。
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Optional, Union

import numpy as np

from app.core.exceptions import DatasetIOError
from app.schemas.weather import WeatherSample
from app.services.weather_synth import DegradationRegistry, default_registry

MAGIC = b"MWDS"
VERSION = 1
SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
CODE_SPLITS = {v: k for k, v in SPLIT_CODES.items()}

_HEADER = struct.Struct("<4sIQ")
_SAMPLE = struct.Struct("<QBfB")
_NDIM = struct.Struct("<B")
_DIM = struct.Struct("<Q")


def _write_tensor(out: BinaryIO, array: np.ndarray) -> None:
    out.write(_NDIM.pack(array.ndim))
    for d in array.shape:
        out.write(_DIM.pack(d))
    out.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def _read_exact(src: BinaryIO, n: int, what: str) -> bytes:
    data = src.read(n)
    if len(data) != n:
        raise DatasetIOError(f"MWDS 檔案在讀取{what}時被截斷")
    return data


def _read_tensor(src: BinaryIO) -> np.ndarray:
    (ndim,) = _NDIM.unpack(_read_exact(src, _NDIM.size, "張量維度"))
    shape = tuple(_DIM.unpack(_read_exact(src, _DIM.size, "張量形狀"))[0] for _ in range(ndim))
    count = int(np.prod(shape, dtype=np.int64))
    data = _read_exact(src, count * 4, "張量資料")
    return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)


class DatasetStore:
    """MWDS 讀寫"""

    def __init__(self, registry: Optional[DegradationRegistry] = None):
        self.registry = registry or default_registry

    def encode(self, samples: list[WeatherSample]) -> bytes:
        buf = io.BytesIO()
        buf.write(_HEADER.pack(MAGIC, VERSION, len(samples)))
        for s in samples:
            mask = self.registry.to_mask(self.registry.get(c) for c in s.classes)
            buf.write(_SAMPLE.pack(s.seed, mask, s.severity, SPLIT_CODES[s.split]))
            _write_tensor(buf, s.clean)
            _write_tensor(buf, s.degraded)
        return buf.getvalue()

    def decode(self, blob: bytes) -> list[WeatherSample]:
        src = io.BytesIO(blob)
        magic, version, count = _HEADER.unpack(_read_exact(src, _HEADER.size, "檔頭"))
        if magic != MAGIC:
            raise DatasetIOError(f"不是 MWDS 資料集（magic={magic!r}）")
        if version != VERSION:
            raise DatasetIOError(f"不支援的 MWDS 版本 {version}")
        samples = []
        for _ in range(count):
            seed, mask, severity, split = _SAMPLE.unpack(_read_exact(src, _SAMPLE.size, "樣本標頭"))
            if split not in CODE_SPLITS:
                raise DatasetIOError(f"無效的 split 代碼 {split}")
            clean = _read_tensor(src)
            degraded = _read_tensor(src)
            try:
                samples.append(WeatherSample(
                    clean=clean,
                    degraded=degraded,
                    classes=[c.id for c in self.registry.from_mask(mask)],
                    severity=float(severity),
                    seed=seed,
                    split=CODE_SPLITS[split],
                ))
            except ValueError as e:
                raise DatasetIOError(f"MWDS 樣本內容無效: {e}") from e
        if src.read(1):
            raise DatasetIOError("MWDS 檔案結尾有多餘資料")
        return samples

    def write(self, path: Union[str, Path], samples: list[WeatherSample]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(self.encode(samples))
        except OSError as e:
            raise DatasetIOError(f"無法寫入資料集 {path}: {e}") from e
        return path

    def read(self, path: Union[str, Path]) -> list[WeatherSample]:
        path = Path(path)
        try:
            blob = path.read_bytes()
        except OSError as e:
            raise DatasetIOError(f"無法讀取資料集 {path}: {e}") from e
        return self.decode(blob)


def write_ppm(path: Union[str, Path], image: np.ndarray) -> Path:
    """[3×H×W] 的 [0,1] 影像 → P6 8-bit PPM"""
    path = Path(path)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DatasetIOError(f"PPM 只支援 [3×H×W] 影像，實際 {list(image.shape)}")
    _, h, w = image.shape
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    except OSError as e:
        raise DatasetIOError(f"無法寫入 PPM {path}: {e}") from e
    return path


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    """P6 8-bit PPM → float32 [3×H×W]"""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DatasetIOError(f"無法讀取 PPM {path}: {e}") from e
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetIOError(f"PPM 檔頭不完整: {path}")
        fields.append(blob[start:pos])
    pos += 1
    if fields[0] != b"P6" or fields[3] != b"255":
        raise DatasetIOError(f"只支援 P6 8-bit PPM: {path}")
    w, h = int(fields[1]), int(fields[2])
    data = blob[pos:pos + w * h * 3]
    if len(data) != w * h * 3:
        raise DatasetIOError(f"PPM 像素資料被截斷: {path}")
    pixels = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return (pixels.astype(np.float32) / 255.0).astype(np.float32)


def filter_split(samples: list[WeatherSample], split: Optional[str]) -> list[WeatherSample]:
    return [s for s in samples if split is None or s.split == split]


# 全域實例
dataset_store = DatasetStore()
