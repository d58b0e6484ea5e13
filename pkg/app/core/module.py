"""參數與模組基礎類別 (Parameter & Module)"""

from __future__ import annotations

import zlib
from typing import Iterator, Union

import numpy as np

from app.core.exceptions import CheckpointError
from app.core.tensor import Tensor, resolve_dtype


class Parameter(Tensor):
    """可訓練參數（葉節點，預設 requires_grad=True）"""

    def __init__(self, data, dtype=None, requires_grad: bool = True):
        super().__init__(data, dtype=dtype, requires_grad=requires_grad)

    def assign(self, array: np.ndarray) -> None:
        """以新陣列取代參數值（優化器與載入檢查點使用）"""
        if array.shape != self.data.shape:
            raise CheckpointError(f"參數形狀不符: 期望 {list(self.data.shape)}，實際 {list(array.shape)}")
        self.data = np.array(array, dtype=self.data.dtype, copy=True, order="C")


def uniform_init(
    rng: np.random.Generator,
    shape: tuple[int, ...],
    fan_in: int,
    dtype: Union[str, np.dtype] = "f32",
    scale: float = 1.0,
) -> Parameter:
    """U(−s/√fan_in, s/√fan_in) 初始化"""
    bound = scale / np.sqrt(max(fan_in, 1))
    values = rng.uniform(-bound, bound, size=shape)
    return Parameter(values, dtype=resolve_dtype(dtype))


def const_init(value: Union[float, np.ndarray], shape: tuple[int, ...], dtype: Union[str, np.dtype] = "f32") -> Parameter:
    return Parameter(np.broadcast_to(np.asarray(value, dtype=np.float64), shape), dtype=resolve_dtype(dtype))


class Module:
    """
    網路模組基礎類別

    參數以屬性方式註冊；`named_parameters()` 依屬性建立順序走訪
    Parameter、子模組，以及子模組組成的 list / dict。
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{key}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{key}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def requires_grad_(self, flag: bool) -> "Module":
        """凍結（False）或解凍（True）所有參數"""
        for p in self.parameters():
            p.requires_grad = flag
            p.zero_grad()
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {f"{prefix}{name}": p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "", strict: bool = True) -> None:
        """
        載入參數，逐一驗證名稱與形狀

        參數:
            state: 名稱 → 陣列
            prefix: 名稱前綴（例如 "backbone."）
            strict: 是否要求 state 不含多餘的同前綴項目
        """
        own = dict(self.named_parameters())
        missing = [name for name in own if f"{prefix}{name}" not in state]
        if missing:
            raise CheckpointError(f"檢查點缺少參數: {', '.join(missing[:5])}{' …' if len(missing) > 5 else ''}")
        if strict:
            extra = [k for k in state if k.startswith(prefix) and k[len(prefix):] not in own]
            if extra:
                raise CheckpointError(f"檢查點含有未預期的參數: {', '.join(extra[:5])}")
        for name, param in own.items():
            array = state[f"{prefix}{name}"]
            if tuple(array.shape) != param.shape:
                raise CheckpointError(
                    f"參數 {prefix}{name} 形狀不符: 期望 {list(param.shape)}，檢查點為 {list(array.shape)}"
                )
            param.assign(array)

    def checksum(self) -> str:
        """所有參數位元組的 CRC32（用於驗證推論期間參數未被修改）"""
        crc = 0
        for name, p in self.named_parameters():
            crc = zlib.crc32(name.encode("utf-8"), crc)
            crc = zlib.crc32(p.data.tobytes(), crc)
        return f"{crc:08x}"
