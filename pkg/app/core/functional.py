"""可微分運算 (Differentiable Operations)

所有運算都是 `Function` 子類別加上一個同名的小寫包裝函式。
除了 `add_bias`（列廣播）與 `channel_affine`（FiLM 的逐通道廣播）之外，
二元運算要求形狀完全相同，其他形狀組合一律視為錯誤。
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Iterator, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.core.exceptions import ContractError, DimensionError
from app.core.tensor import Function, Tensor

Scalar = Union[int, float]

COSINE_EPS = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)


# ==================== MACs 計數 ====================

class MacCounter:
    """累計乘加次數（依運算類型分類）"""

    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, macs: int) -> None:
        self.total += macs
        self.by_op[op] = self.by_op.get(op, 0) + macs


_mac_state = threading.local()


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    """
    在區塊內統計 matmul、conv2d、depthwise_conv2d 的乘加次數

    使用方式:
        with count_macs() as counter:
            model(image, v)
        counter.total
    """
    stack = _mac_state.__dict__.setdefault("stack", [])
    counter = MacCounter()
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def _tally(op: str, macs: int) -> None:
    for counter in getattr(_mac_state, "stack", ()):
        counter.add(op, int(macs))


def _same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ContractError(f"{op}: dtype 不一致 ({a.dtype} vs {b.dtype})")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: 形狀不符 {list(a.shape)} vs {list(b.shape)}")
    _same_dtype(a, b, op)


# ==================== 逐元素運算 ====================

class _Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class _Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


class _Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return grad * b.data, grad * a.data


class _AddScalar(Function):
    def forward(self, a, *, value):
        return a + a.dtype.type(value)

    def backward(self, grad):
        return (grad,)


class _MulScalar(Function):
    def forward(self, a, *, value):
        self.value = a.dtype.type(value)
        return a * self.value

    def backward(self, grad):
        return (grad * self.value,)


class _Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return _AddScalar.apply(a, value=float(b))
    _same_shape(a, b, "add")
    return _Add.apply(a, b)


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return _AddScalar.apply(a, value=-float(b))
    _same_shape(a, b, "sub")
    return _Sub.apply(a, b)


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return _MulScalar.apply(a, value=float(b))
    _same_shape(a, b, "mul")
    return _Mul.apply(a, b)


def neg(a: Tensor) -> Tensor:
    return _Neg.apply(a)


class _AddBias(Function):
    def forward(self, x, b):
        return x + b

    def backward(self, grad):
        x, b = self.inputs
        return grad, grad.reshape(-1, b.shape[0]).sum(axis=0)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., n] + b[n]（沿最後一軸的列廣播）"""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: 形狀不符 {list(x.shape)} vs {list(b.shape)}")
    _same_dtype(x, b, "add_bias")
    return _AddBias.apply(x, b)


class _ChannelAffine(Function):
    def forward(self, x, gamma, beta):
        return gamma[:, None, None] * x + beta[:, None, None]

    def backward(self, grad):
        x, gamma, _ = self.inputs
        return (
            grad * gamma.data[:, None, None],
            (grad * x.data).sum(axis=(1, 2)),
            grad.sum(axis=(1, 2)),
        )


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """X'[c,h,w] = γ[c]·X[c,h,w] + β[c]"""
    if x.ndim != 3 or gamma.shape != (x.shape[0],) or beta.shape != (x.shape[0],):
        raise DimensionError(
            f"channel_affine: 通道數不符 X={list(x.shape)} γ={list(gamma.shape)} β={list(beta.shape)}"
        )
    _same_dtype(x, gamma, "channel_affine")
    _same_dtype(x, beta, "channel_affine")
    return _ChannelAffine.apply(x, gamma, beta)


# ==================== 非線性 ====================

class _Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, x.dtype.type(0))

    def backward(self, grad):
        return (grad * self.mask,)


class _Gelu(Function):
    """tanh 近似的 GELU"""

    def forward(self, x):
        inner = _GELU_C * (x + 0.044715 * x ** 3)
        self.t = np.tanh(inner)
        return 0.5 * x * (1.0 + self.t)

    def backward(self, grad):
        (x,) = self.inputs
        x = x.data
        t = self.t
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner
        return ((grad * d).astype(x.dtype),)


class _Clip(Function):
    def forward(self, x, *, lo, hi):
        self.mask = (x >= lo) & (x <= hi)
        return np.clip(x, lo, hi)

    def backward(self, grad):
        return (grad * self.mask,)


def relu(x: Tensor) -> Tensor:
    return _Relu.apply(x)


def gelu(x: Tensor) -> Tensor:
    return _Gelu.apply(x)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    return _Clip.apply(x, lo=lo, hi=hi)


ACTIVATIONS = {"gelu": gelu, "relu": relu}


def activation(name: str):
    if name not in ACTIVATIONS:
        raise ContractError(f"未知的激活函數: {name}（可用: {', '.join(ACTIVATIONS)}）")
    return ACTIVATIONS[name]


# ==================== 線性代數 ====================

class _Matmul(Function):
    def forward(self, a, b):
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.inputs
        return (
            np.matmul(grad, np.swapaxes(b.data, -1, -2)),
            np.matmul(np.swapaxes(a.data, -1, -2), grad),
        )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    矩陣乘法：A[m×k]·B[k×n]，或同批次大小的 A[b×m×k]·B[b×k×n]
    """
    ok = (
        a.ndim == b.ndim
        and a.ndim in (2, 3)
        and a.shape[-1] == b.shape[-2]
        and (a.ndim == 2 or a.shape[0] == b.shape[0])
    )
    if not ok:
        raise DimensionError(f"matmul: 維度不符 A={list(a.shape)} B={list(b.shape)}")
    _same_dtype(a, b, "matmul")
    batch = a.shape[0] if a.ndim == 3 else 1
    _tally("matmul", batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
    return _Matmul.apply(a, b)


# ==================== 形狀運算 ====================

class _Reshape(Function):
    def forward(self, x, *, shape):
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class _Transpose(Function):
    def forward(self, x, *, axes):
        self.axes = axes
        return np.transpose(x, axes)

    def backward(self, grad):
        if self.axes is None:
            return (np.transpose(grad),)
        return (np.transpose(grad, np.argsort(self.axes)),)


class _GetItem(Function):
    def forward(self, x, *, index):
        self.index = index
        return np.array(x[index])

    def backward(self, grad):
        (x,) = self.inputs
        out = np.zeros_like(x.data)
        parts = self.index if isinstance(self.index, tuple) else (self.index,)
        if any(isinstance(p, (list, np.ndarray)) for p in parts):
            np.add.at(out, self.index, grad)
        else:
            # 基本切片不會重複索引
            out[self.index] = grad
        return (out,)


class _Concat(Function):
    def forward(self, *arrays, axis):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class _Take(Function):
    def forward(self, x, *, indices):
        self.indices = indices
        return x.reshape(-1)[indices]

    def backward(self, grad):
        (x,) = self.inputs
        out = np.zeros(x.size, dtype=x.data.dtype)
        np.add.at(out, self.indices, grad)
        return (out.reshape(x.shape),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    known = [s for s in shape if s != -1]
    if shape.count(-1) > 1 or (shape.count(-1) == 0 and int(np.prod(shape)) != x.size) or (
        shape.count(-1) == 1 and (int(np.prod(known)) == 0 or x.size % int(np.prod(known)) != 0)
    ):
        raise DimensionError(f"reshape: 無法將 {list(x.shape)} 重塑為 {list(shape)}")
    return _Reshape.apply(x, shape=shape)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is not None:
        axes = tuple(int(a) for a in axes)
        if sorted(axes) != list(range(x.ndim)):
            raise DimensionError(f"transpose: 軸 {list(axes)} 不是 {x.ndim} 維的排列")
    return _Transpose.apply(x, axes=axes)


def getitem(x: Tensor, index) -> Tensor:
    return _GetItem.apply(x, index=index)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concatenate: 至少需要一個張量")
    first = tensors[0]
    axis = axis % first.ndim
    for t in tensors[1:]:
        _same_dtype(first, t, "concatenate")
        if t.ndim != first.ndim or any(
            t.shape[d] != first.shape[d] for d in range(first.ndim) if d != axis
        ):
            raise DimensionError(
                f"concatenate: 形狀不符 {list(first.shape)} vs {list(t.shape)}（axis={axis}）"
            )
    return _Concat.apply(*tensors, axis=axis)


def take(x: Tensor, indices: np.ndarray) -> Tensor:
    """依攤平後的索引取值"""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= x.size):
        raise DimensionError(f"take: 索引超出範圍（張量大小 {x.size}）")
    return _Take.apply(x, indices=indices)


# ==================== 歸約 ====================

def _normalize_axis(axis, ndim: int) -> Optional[tuple[int, ...]]:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for a in axes:
        if not -ndim <= a < ndim:
            raise DimensionError(f"軸 {a} 超出 {ndim} 維張量範圍")
    return tuple(sorted(a % ndim for a in axes))


class _Sum(Function):
    def forward(self, x, *, axis):
        self.axis = axis
        self.in_shape = x.shape
        return np.asarray(np.sum(x, axis=axis))

    def backward(self, grad):
        if self.axis is None:
            return (np.broadcast_to(grad, self.in_shape).copy(),)
        g = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(g, self.in_shape).copy(),)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    return _Sum.apply(x, axis=_normalize_axis(axis, x.ndim))


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _normalize_axis(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise DimensionError(f"mean: 空的歸約軸，形狀 {list(x.shape)}")
    return mul(_Sum.apply(x, axis=axes), 1.0 / count)


# ==================== softmax / 正規化 ====================

class _Softmax(Function):
    def forward(self, x, *, axis):
        self.axis = axis
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.y = e / np.sum(e, axis=axis, keepdims=True)
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - np.sum(grad * y, axis=self.axis, keepdims=True)),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """沿指定軸的 softmax（先減去最大值以維持數值穩定）"""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: 軸 {axis} 超出 {x.ndim} 維張量範圍")
    if x.shape[axis] == 0:
        raise DimensionError(f"softmax: 軸 {axis} 為空，形狀 {list(x.shape)}")
    return _Softmax.apply(x, axis=axis % x.ndim)


class _LayerNorm(Function):
    def forward(self, x, weight, bias, *, eps):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.rstd
        return self.xhat * weight + bias

    def backward(self, grad):
        _, weight, _ = self.inputs
        c = self.xhat.shape[-1]
        dxhat = grad * weight.data
        dx = self.rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - self.xhat * (dxhat * self.xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = grad.reshape(-1, c)
        return (
            dx.astype(grad.dtype),
            (flat_g * self.xhat.reshape(-1, c)).sum(axis=0),
            flat_g.sum(axis=0),
        )


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """沿最後一軸（通道維）的 LayerNorm"""
    c = x.shape[-1]
    if weight.shape != (c,) or bias.shape != (c,):
        raise DimensionError(
            f"layer_norm: 通道數不符 x={list(x.shape)} weight={list(weight.shape)} bias={list(bias.shape)}"
        )
    _same_dtype(x, weight, "layer_norm")
    return _LayerNorm.apply(x, weight, bias, eps=eps)


# ==================== 卷積 ====================

def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


class _Conv2d(Function):
    def forward(self, x, w, b=None, *, stride, padding):
        c_in, h, wd = x.shape
        c_out, _, k, _ = w.shape
        self.stride, self.padding = stride, padding
        self.x_shape = x.shape
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
        self.xp_shape = xp.shape
        ho, wo = _conv_out(h, k, stride, padding), _conv_out(wd, k, stride, padding)
        windows = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
        # (Ho*Wo, Cin*k*k)
        self.cols = np.ascontiguousarray(windows.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, c_in * k * k)
        self.out_hw = (ho, wo)
        out = (self.cols @ w.reshape(c_out, -1).T).T.reshape(c_out, ho, wo)
        if b is not None:
            out = out + b[:, None, None]
        return out

    def backward(self, grad):
        x, w = self.inputs[0], self.inputs[1]
        c_out, c_in, k, _ = w.shape
        ho, wo = self.out_hw
        s = self.stride
        g2 = grad.reshape(c_out, ho * wo)
        dw = (g2 @ self.cols).reshape(w.shape)
        dcols = (g2.T @ w.data.reshape(c_out, -1)).reshape(ho, wo, c_in, k, k)
        dxp = np.zeros(self.xp_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[:, :, :, i, j].transpose(2, 0, 1)
        p = self.padding
        dx = dxp[:, p:p + self.x_shape[1], p:p + self.x_shape[2]]
        grads = [np.ascontiguousarray(dx), dw]
        if len(self.inputs) == 3:
            grads.append(grad.sum(axis=(1, 2)))
        return tuple(grads)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    一般 2D 卷積 X[Cin×H×W] * W[Cout×Cin×k×k]（零填補）

    參數:
        stride: 步幅
        padding: 四周零填補寬度
    """
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0] or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: 形狀不符 X={list(x.shape)} W={list(w.shape)}")
    k = w.shape[2]
    if _conv_out(x.shape[1], k, stride, padding) < 1 or _conv_out(x.shape[2], k, stride, padding) < 1:
        raise DimensionError(f"conv2d: 輸入 {list(x.shape)} 太小，無法套用 {k}×{k} 卷積")
    _same_dtype(x, w, "conv2d")
    ho, wo = _conv_out(x.shape[1], k, stride, padding), _conv_out(x.shape[2], k, stride, padding)
    _tally("conv2d", ho * wo * w.shape[0] * w.shape[1] * k * k)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise DimensionError(f"conv2d: bias 形狀 {list(b.shape)} 與輸出通道 {w.shape[0]} 不符")
        return _Conv2d.apply(x, w, b, stride=stride, padding=padding)
    return _Conv2d.apply(x, w, stride=stride, padding=padding)


class _DepthwiseConv2d(Function):
    def forward(self, x, w):
        c, h, wd = x.shape
        k = w.shape[-1]
        p = k // 2
        self.xp = np.pad(x, ((0, 0), (p, p), (p, p)))
        kern = w.reshape(c, k, k)
        out = np.zeros_like(x)
        for i in range(k):
            for j in range(k):
                out += kern[:, i, j][:, None, None] * self.xp[:, i:i + h, j:j + wd]
        return out

    def backward(self, grad):
        x, w = self.inputs
        c, h, wd = x.shape
        k = w.shape[-1]
        p = k // 2
        kern = w.data.reshape(c, k, k)
        dxp = np.zeros_like(self.xp)
        dw = np.zeros((c, k, k), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + h, j:j + wd] += kern[:, i, j][:, None, None] * grad
                dw[:, i, j] = (grad * self.xp[:, i:i + h, j:j + wd]).sum(axis=(1, 2))
        return np.ascontiguousarray(dxp[:, p:p + h, p:p + wd]), dw.reshape(w.shape)


def depthwise_conv2d(x: Tensor, w: Tensor) -> Tensor:
    """
    深度卷積：每個通道以自己的 k×k 核獨立卷積，零填補、步幅 1（輸出尺寸不變）

    參數:
        x: [C×H×W]
        w: [C×1×k×k]，k 為奇數
    """
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != 1 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise DimensionError(f"depthwise_conv2d: 形狀不符 X={list(x.shape)} W={list(w.shape)}")
    if w.shape[0] != x.shape[0]:
        raise DimensionError(f"depthwise_conv2d: 通道數不符 X 有 {x.shape[0]} 通道，W 有 {w.shape[0]} 個核")
    _same_dtype(x, w, "depthwise_conv2d")
    _tally("depthwise_conv2d", x.size * w.shape[2] * w.shape[3])
    return _DepthwiseConv2d.apply(x, w)


# ==================== 取樣 ====================

def bilinear_matrix(n_in: int, n_out: int, dtype: np.dtype) -> np.ndarray:
    """half-pixel 對齊的雙線性插值矩陣 [n_out×n_in]"""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m.astype(dtype)


class _Resize(Function):
    def forward(self, x, *, size):
        _, h, w = x.shape
        self.uh = bilinear_matrix(h, size[0], x.dtype)
        self.uw = bilinear_matrix(w, size[1], x.dtype)
        return np.einsum("oh,chw,pw->cop", self.uh, x, self.uw, optimize=True)

    def backward(self, grad):
        return (np.einsum("oh,cop,pw->chw", self.uh, grad, self.uw, optimize=True),)


def upsample_bilinear(x: Tensor, size: Sequence[int]) -> Tensor:
    """雙線性插值到指定 (H, W)"""
    if x.ndim != 3:
        raise DimensionError(f"upsample_bilinear: 需要 [C×H×W]，實際 {list(x.shape)}")
    return _Resize.apply(x, size=(int(size[0]), int(size[1])))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """[C×rh×rw] → [(C·r·r)×h×w]"""
    c, hh, ww = x.shape
    if hh % r or ww % r:
        raise DimensionError(f"pixel_unshuffle: 空間尺寸 {hh}×{ww} 無法被 {r} 整除")
    h, w = hh // r, ww // r
    y = reshape(x, (c, h, r, w, r))
    y = transpose(y, (0, 2, 4, 1, 3))
    return reshape(y, (c * r * r, h, w))


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """[(C·r·r)×h×w] → [C×rh×rw]"""
    cc, h, w = x.shape
    if cc % (r * r):
        raise DimensionError(f"pixel_shuffle: 通道數 {cc} 無法被 {r * r} 整除")
    c = cc // (r * r)
    y = reshape(x, (c, r, r, h, w))
    y = transpose(y, (0, 3, 1, 4, 2))
    return reshape(y, (c, h * r, w * r))


# ==================== 相似度 / 損失原語 ====================

class _CosineSimilarity(Function):
    def forward(self, a, b):
        self.na = float(np.linalg.norm(a))
        self.nb = float(np.linalg.norm(b))
        self.dot = float(np.dot(a, b))
        self.denom = self.na * self.nb + COSINE_EPS
        return np.asarray(self.dot / self.denom, dtype=a.dtype)

    def backward(self, grad):
        a, b = self.inputs
        g = float(grad)
        d2 = self.denom ** 2
        # d(na)/da = a/na；範數為 0 時向量本身為 0，該項亦為 0
        unit_a = a.data / self.na if self.na > 0 else np.zeros_like(a.data)
        unit_b = b.data / self.nb if self.nb > 0 else np.zeros_like(b.data)
        ga = b.data / self.denom - self.dot * self.nb * unit_a / d2
        gb = a.data / self.denom - self.dot * self.na * unit_b / d2
        return (g * ga).astype(a.data.dtype), (g * gb).astype(b.data.dtype)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """a·b / (‖a‖‖b‖ + ε)，ε = 1e-12"""
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine_similarity: 需要同長度向量，實際 {list(a.shape)} vs {list(b.shape)}")
    _same_dtype(a, b, "cosine_similarity")
    return _CosineSimilarity.apply(a, b)


class _SmoothL1(Function):
    def forward(self, y, t, *, beta):
        self.e = y - t
        self.beta = beta
        abs_e = np.abs(self.e)
        self.small = abs_e < beta
        per = np.where(self.small, 0.5 * self.e ** 2 / beta, abs_e - 0.5 * beta)
        return np.asarray(per.mean(), dtype=y.dtype)

    def backward(self, grad):
        n = self.e.size
        d = np.where(self.small, self.e / self.beta, np.sign(self.e)) * (float(grad) / n)
        d = d.astype(self.e.dtype)
        return d, -d


def smooth_l1(y: Tensor, t: Tensor, beta: float = 1.0) -> Tensor:
    """逐元素 smooth-L1 後取平均"""
    _same_shape(y, t, "smooth_l1")
    if beta <= 0:
        raise ContractError(f"smooth_l1: β 必須 > 0，實際 {beta}")
    return _SmoothL1.apply(y, t, beta=float(beta))
