"""張量與反向自動微分 (Tensor & Reverse-mode Autodiff)

`Tensor` 包裝一個 row-major 的 numpy 陣列；在 `Tape` 區塊內執行的運算會依序被記錄，
`Tape.backward()` 以相反順序逐一走訪每個運算一次並累積梯度。
Tape 區塊之外的運算不做任何記錄，推論路徑因此天然不佔用梯度記憶體。

使用方式:
    with Tape() as tape:
        loss = F.sum(x * x)
    tape.backward(loss)
    x.grad  # == 2x
"""

from __future__ import annotations

import threading
from typing import Any, Optional, Sequence, Union

import numpy as np

from app.core.exceptions import AbsentGradError, ContractError, NumericalError

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]

DTYPES: dict[str, np.dtype] = {
    "f32": np.dtype(np.float32),
    "f64": np.dtype(np.float64),
}


def resolve_dtype(dtype: Union[str, np.dtype, type, None]) -> np.dtype:
    """將 "f32" / "f64" / numpy dtype 統一轉為 numpy dtype"""
    if dtype is None:
        return DTYPES["f32"]
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ContractError(f"不支援的 dtype: {dtype}（僅支援 f32, f64）")
        return DTYPES[dtype]
    resolved = np.dtype(dtype)
    if resolved not in DTYPES.values():
        raise ContractError(f"不支援的 dtype: {resolved}（僅支援 float32, float64）")
    return resolved


def dtype_name(dtype: np.dtype) -> str:
    return "f64" if np.dtype(dtype) == np.float64 else "f32"


def check_finite(array: np.ndarray, where: str) -> None:
    """前向運算後檢查數值；NaN/Inf 視為錯誤狀態"""
    if not np.isfinite(array).all():
        raise NumericalError(f"{where} 產生非有限值 (NaN/Inf)，形狀 {list(array.shape)}")


# ==================== Tape ====================

class _TapeStack(threading.local):
    """每個執行緒各自的 tape 堆疊"""

    def __init__(self):
        self.stack: list[Optional[Tape]] = []


_tape_state = _TapeStack()


def active_tape() -> Optional["Tape"]:
    """目前執行緒正在記錄的 tape（沒有則為 None）"""
    if not _tape_state.stack:
        return None
    return _tape_state.stack[-1]


class _Node:
    """Tape 上的一筆記錄：運算本身（含輸入）與其輸出"""

    __slots__ = ("fn", "out")

    def __init__(self, fn: "Function", out: "Tensor"):
        self.fn = fn
        self.out = out


class Tape:
    """依拓撲順序記錄運算的梯度帶"""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise ContractError("此 tape 已執行過 backward，請先呼叫 reset()")
        _tape_state.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, fn: "Function", out: "Tensor") -> None:
        self.nodes.append(_Node(fn, out))

    def reset(self) -> None:
        """清空記錄，tape 可再次使用"""
        self.nodes = []
        self.consumed = False

    def backward(self, loss: "Tensor") -> None:
        """
        由純量 loss 反向傳播，為 tape 上每個 requires_grad 張量填入梯度

        參數:
            loss: 在此 tape 上產生的純量張量
        """
        if self.consumed:
            raise ContractError("重複呼叫 backward：此 tape 已被使用，請先 reset()")
        if loss.ndim != 0:
            raise ContractError(f"loss 必須是純量，實際形狀 {list(loss.shape)}")
        if loss._tape is not self:
            raise ContractError("loss 不在此 tape 上（是否在 Tape 區塊外計算？）")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}

        for node in reversed(self.nodes):
            grad = grads.pop(id(node.out), None)
            if grad is None:
                continue
            node.out._grad = grad
            input_grads = node.fn.backward(grad)
            for inp, g in zip(node.fn.inputs, input_grads):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if inp._tape is None:
                    leaves[key] = inp

        # 葉節點（參數、輸入）累加梯度，與優化器的 zero_grad 搭配
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            leaf._grad = g if leaf._grad is None else leaf._grad + g

        self.nodes = []
        self.consumed = True


class no_grad:
    """暫停記錄（即使外層有 Tape）"""

    def __enter__(self) -> None:
        _tape_state.stack.append(None)

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_state.stack.pop()


def backward(loss: "Tensor") -> None:
    """對 loss 所在的 tape 執行反向傳播"""
    if loss._tape is None:
        raise ContractError("loss 不在任何 tape 上，無法反向傳播")
    loss._tape.backward(loss)


# ==================== Function ====================

class Function:
    """
    可微分運算的基礎類別

    子類別實作 forward（接收 numpy 陣列）與 backward（接收輸出梯度，
    回傳每個輸入的梯度，不需要的位置回傳 None）。
    """

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        fn = cls(*inputs)
        out_data = fn.forward(*(t.data for t in inputs), **kwargs)
        check_finite(out_data, cls.__name__)
        tape = active_tape()
        record = tape is not None and any(t.requires_grad for t in inputs)
        out = Tensor._wrap(out_data, requires_grad=record)
        if record:
            out._tape = tape
            tape.record(fn, out)
        return out


# ==================== Tensor ====================

class Tensor:
    """
    稠密 N 維張量

    參數:
        data: 數值資料（會複製成 row-major 連續陣列）
        dtype: "f32"（預設）或 "f64"；未指定時一律為 f32，僅複製 Tensor 時沿用其 dtype
        requires_grad: 是否在 tape 上追蹤梯度
    """

    def __init__(self, data: ArrayLike, dtype: Union[str, np.dtype, None] = None, requires_grad: bool = False):
        if dtype is None and isinstance(data, Tensor):
            resolved = data.data.dtype
        else:
            resolved = resolve_dtype(dtype)
        raw = data.data if isinstance(data, Tensor) else data
        array = np.array(raw, dtype=resolved, copy=True, order="C")
        check_finite(array, "Tensor 建立")
        self.data = array
        self.requires_grad = requires_grad
        self._grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """內部建構：不複製陣列"""
        obj = cls.__new__(cls)
        obj.data = np.asarray(array, order="C")
        obj.requires_grad = requires_grad
        obj._grad = None
        obj._tape = None
        return obj

    # ---------- 基本屬性 ----------

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> str:
        return dtype_name(self.data.dtype)

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            raise AbsentGradError(
                f"此張量沒有梯度（形狀 {list(self.shape)}，requires_grad={self.requires_grad}）"
            )
        return self._grad

    @property
    def has_grad(self) -> bool:
        return self._grad is not None

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() 只適用於單一元素張量，實際形狀 {list(self.shape)}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """共用資料、脫離 tape 的新張量"""
        return Tensor._wrap(self.data, requires_grad=False)

    def astype(self, dtype: Union[str, np.dtype]) -> "Tensor":
        return Tensor(self.data, dtype=dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # ---------- 運算子（實作在 functional） ----------

    def __add__(self, other):
        from app.core import functional as F
        return F.add(self, other)

    def __radd__(self, other):
        from app.core import functional as F
        return F.add(self, other)

    def __sub__(self, other):
        from app.core import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from app.core import functional as F
        return F.add(F.neg(self), other)

    def __mul__(self, other):
        from app.core import functional as F
        return F.mul(self, other)

    def __rmul__(self, other):
        from app.core import functional as F
        return F.mul(self, other)

    def __truediv__(self, other):
        from app.core import functional as F
        if isinstance(other, Tensor):
            raise ContractError("僅支援除以純量")
        return F.mul(self, 1.0 / float(other))

    def __neg__(self):
        from app.core import functional as F
        return F.neg(self)

    def __matmul__(self, other):
        from app.core import functional as F
        return F.matmul(self, other)

    def __getitem__(self, index):
        from app.core import functional as F
        return F.getitem(self, index)

    def reshape(self, *shape):
        from app.core import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from app.core import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)

    @property
    def T(self):
        from app.core import functional as F
        return F.transpose(self, None)

    def sum(self, axis=None):
        from app.core import functional as F
        return F.sum(self, axis=axis)

    def mean(self, axis=None):
        from app.core import functional as F
        return F.mean(self, axis=axis)


def tensor(data: ArrayLike, dtype: Union[str, np.dtype, None] = None, requires_grad: bool = False) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=requires_grad)


def zeros(shape: Sequence[int], dtype: Union[str, np.dtype, None] = None, requires_grad: bool = False) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape), dtype=resolve_dtype(dtype)), requires_grad=requires_grad)


def ones(shape: Sequence[int], dtype: Union[str, np.dtype, None] = None, requires_grad: bool = False) -> Tensor:
    return Tensor._wrap(np.ones(tuple(shape), dtype=resolve_dtype(dtype)), requires_grad=requires_grad)
