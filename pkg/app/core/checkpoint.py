"""MWFC 檢查點容器

格式（全部 little-endian）:
    magic "MWFC" | u32 version=1 | u32 項目數
    每個項目: u16 名稱長度 | UTF-8 名稱 | u8 dtype (0=f32, 1=f64, 2=u8) | u8 ndim | u64 dims… | 原始資料
    結尾: u32 CRC32（涵蓋之前的所有位元組）

訓練中繼資料（設定、階段、種子、步數…）以 JSON 存成 `__meta__` 的 u8 項目。
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from app.core.exceptions import CheckpointError

MAGIC = b"MWFC"
VERSION = 1
META_KEY = "__meta__"

_HEADER = struct.Struct("<4sII")
_NAME_LEN = struct.Struct("<H")
_ENTRY_INFO = struct.Struct("<BB")
_DIM = struct.Struct("<Q")
_CRC = struct.Struct("<I")

DTYPE_CODES: dict[np.dtype, int] = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("u1"): 2,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


def encode_checkpoint(entries: dict[str, np.ndarray], meta: Optional[dict[str, Any]] = None) -> bytes:
    """
    編碼為 MWFC 位元組

    參數:
        entries: 名稱 → 陣列（依插入順序寫入）
        meta: 可 JSON 序列化的中繼資料
    """
    items = list(entries.items())
    if meta is not None:
        text = json.dumps(meta, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        items.append((META_KEY, np.frombuffer(text.encode("utf-8"), dtype=np.uint8)))

    chunks = [_HEADER.pack(MAGIC, VERSION, len(items))]
    for name, array in items:
        array = np.asarray(array)
        dtype = array.dtype.newbyteorder("<") if array.dtype.kind == "f" else array.dtype
        if dtype not in DTYPE_CODES:
            raise CheckpointError(f"項目 {name} 的 dtype {array.dtype} 不支援（僅 f32 / f64 / u8）")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise CheckpointError(f"項目名稱過長: {name[:40]}…")
        chunks.append(_NAME_LEN.pack(len(raw_name)))
        chunks.append(raw_name)
        chunks.append(_ENTRY_INFO.pack(DTYPE_CODES[dtype], array.ndim))
        chunks.extend(_DIM.pack(d) for d in array.shape)
        chunks.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    payload = b"".join(chunks)
    return payload + _CRC.pack(zlib.crc32(payload))


def decode_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """
    解碼並驗證 CRC

    返回:
        (名稱 → 陣列, 中繼資料)
    """
    if len(blob) < _HEADER.size + _CRC.size:
        raise CheckpointError("檢查點檔案過短")
    payload, (crc,) = blob[:-_CRC.size], _CRC.unpack(blob[-_CRC.size:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("檢查點 CRC32 驗證失敗（檔案損毀或被截斷）")
    magic, version, count = _HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise CheckpointError(f"不是 MWFC 檢查點（magic={magic!r}）")
    if version != VERSION:
        raise CheckpointError(f"不支援的檢查點版本 {version}")

    offset = _HEADER.size
    entries: dict[str, np.ndarray] = {}
    meta: dict[str, Any] = {}
    try:
        for _ in range(count):
            (name_len,) = _NAME_LEN.unpack_from(payload, offset)
            offset += _NAME_LEN.size
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            code, ndim = _ENTRY_INFO.unpack_from(payload, offset)
            offset += _ENTRY_INFO.size
            if code not in CODE_DTYPES:
                raise CheckpointError(f"項目 {name} 的 dtype 代碼 {code} 無效")
            shape = tuple(_DIM.unpack_from(payload, offset + i * _DIM.size)[0] for i in range(ndim))
            offset += ndim * _DIM.size
            dtype = CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if offset + nbytes > len(payload):
                raise CheckpointError(f"項目 {name} 的資料被截斷")
            array = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
            offset += nbytes
            if name == META_KEY:
                meta = json.loads(array.tobytes().decode("utf-8"))
            else:
                entries[name] = array.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"檢查點格式錯誤: {e}") from e
    if offset != len(payload):
        raise CheckpointError(f"檢查點結尾有 {len(payload) - offset} 個多餘位元組")
    return entries, meta


def save_checkpoint(path: Union[str, Path], entries: dict[str, np.ndarray], meta: Optional[dict[str, Any]] = None) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_checkpoint(entries, meta))
    except OSError as e:
        raise CheckpointError(f"無法寫入檢查點 {path}: {e}") from e
    return path


def load_checkpoint(path: Union[str, Path]) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"無法讀取檢查點 {path}: {e}") from e
    return decode_checkpoint(blob)
