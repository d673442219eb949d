"""
自动微分模块

这个模块提供了整个系统的数值底座，包括：
1. Tensor：带梯度槽的定形数组（numpy 存储）
2. 前向算子：矩阵乘、一维空洞卷积、逐元素加乘、sigmoid、ReLU、softmax、
   层归一化、嵌入查表、末轴拼接、切片、均值/求和、交叉熵、绝对误差、二元交叉熵
3. backward：反向模式自动微分（梯度在叶子上累加）
4. finite_difference_check：中心差分梯度校验
5. ParameterSet / AdamOptimizer：参数集合与带偏差校正的自适应矩估计优化器

约定：
- 训练默认 32 位浮点，梯度校验使用 precision(np.float64)
- 任何前向或反向结果出现 NaN/Inf 立即抛出 NumericalException
- 叶子梯度跨多次 backward 累加，由 ParameterSet.zero_grads() 显式清零

作者：ST-Instruct
版本：0.1.0
"""

import builtins
import contextlib
import logging
import math
import threading
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import (
    ErrorCode,
    NumericalException,
    ShapeMismatchException,
    STInstructException,
)

# ==================== 日志配置 ====================
logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_SUPPORTED_DTYPES = (np.float32, np.float64)


# ==================== 运行模式 ====================

class _GradMode(threading.local):
    enabled = True


_grad_mode = _GradMode()
_default_dtype = np.float32


def set_default_dtype(dtype) -> None:
    """设置新建张量与参数的默认精度（float32 训练 / float64 梯度校验）"""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in _SUPPORTED_DTYPES:
        raise STInstructException(f"不支持的精度: {dtype}", error_code=ErrorCode.INVALID_PARAMETER)
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """临时切换默认精度"""
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """在该上下文内前向计算不记录计算图"""
    previous = _grad_mode.enabled
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def is_grad_enabled() -> bool:
    return _grad_mode.enabled


# ==================== 张量 ====================

class Tensor:
    """
    带梯度槽的定形数组

    Attributes:
        data: numpy 数组，长度等于各维乘积
        grad: 与 data 同形的梯度（未计算时为 None）
        requires_grad: 是否参与求导
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=dtype or get_default_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"

    # ---------- 基本属性 ----------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self):
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label}, requires_grad={self.requires_grad})"

    # ---------- 运算符 ----------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise STInstructException("只支持除以常数", error_code=ErrorCode.INVALID_PARAMETER)
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def backward(self) -> None:
        backward(self)


def tensor(data: ArrayLike, requires_grad: bool = False, dtype=None, name: Optional[str] = None) -> Tensor:
    """创建张量的便捷函数"""
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericalException(f"算子 {op} 产生了非有限值 (NaN/Inf)", operator=op)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    out._op = op
    if _grad_mode.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度求和回原始形状"""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchException(op, a.shape, b.shape, reason="无法广播")


# ==================== 逐元素算子 ====================

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_check("add", a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), _backward, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_check("sub", a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), _backward, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_check("mul", a, b)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), _backward, "mul")


def sigmoid(x: Tensor) -> Tensor:
    """数值稳定的 logistic 函数"""
    z = np.exp(-np.abs(x.data))
    out_data = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)

    def _backward(g):
        return (g * out_data * (1.0 - out_data),)

    return _result(out_data, (x,), _backward, "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def _backward(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), _backward, "relu")


def softmax(x: Tensor) -> Tensor:
    """沿最后一维的 softmax"""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (out_data * (g - (g * out_data).sum(axis=-1, keepdims=True)),)

    return _result(out_data, (x,), _backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """沿最后一维做层归一化"""
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeMismatchException("layer_norm", x.shape, gamma.shape, reason="gamma/beta 需与末维等宽")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data

    def _backward(g):
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _result(out_data, (x, gamma, beta), _backward, "layer_norm")


# ==================== 线性代数与卷积 ====================

def matmul(a, b) -> Tensor:
    """批量矩阵乘，最后两维做乘法，其余维广播"""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchException("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatchException("matmul", a.shape, b.shape, reason="批维无法广播")

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), _backward, "matmul")


def conv1d(x: Tensor, weight: Tensor, dilation: int = 1) -> Tensor:
    """
    一维空洞卷积（valid 模式）

    Args:
        x: (..., T, C_in)
        weight: (K, C_in, C_out)
        dilation: 空洞因子

    Returns:
        Tensor: (..., T - dilation·(K-1), C_out)
    """
    if weight.ndim != 3 or x.ndim < 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeMismatchException("conv1d", x.shape, weight.shape, reason="期望 x(...,T,C_in) 与 w(K,C_in,C_out)")
    kernel, c_in, c_out = weight.shape
    span = dilation * (kernel - 1)
    length = x.shape[-2] - span
    if length < 1:
        raise ShapeMismatchException(
            "conv1d", x.shape, weight.shape,
            reason=f"时间长度不足，感受野需要至少 {span + 1} 步",
            error_code=ErrorCode.RECEPTIVE_FIELD_ERROR,
        )

    taps = [x.data[..., k * dilation:k * dilation + length, :] for k in range(kernel)]
    out_data = builtins.sum(np.matmul(tap, weight.data[k]) for k, tap in enumerate(taps))

    def _backward(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(weight.data)
        g_flat = g.reshape(-1, c_out)
        for k, tap in enumerate(taps):
            gx[..., k * dilation:k * dilation + length, :] += np.matmul(g, weight.data[k].T)
            gw[k] = tap.reshape(-1, c_in).T @ g_flat
        return gx, gw

    return _result(out_data, (x, weight), _backward, "conv1d")


# ==================== 形状算子 ====================

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out_data = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchException("reshape", x.shape, tuple(shape))

    def _backward(g):
        return (g.reshape(x.shape),)

    return _result(out_data, (x,), _backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatchException("transpose", x.shape, axes, reason="轴排列无效")
    inverse = tuple(np.argsort(axes))

    def _backward(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(x.data, axes), (x,), _backward, "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    """切片 / 索引"""
    try:
        out_data = np.array(x.data[index])
    except IndexError as e:
        raise ShapeMismatchException("slice", x.shape, reason=str(e))
    basic = _is_basic_index(index)

    def _backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _result(out_data, (x,), _backward, "slice")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """沿最后一维拼接"""
    if axis != -1:
        raise STInstructException("concat 只支持最后一维", error_code=ErrorCode.INVALID_PARAMETER)
    tensors = list(tensors)
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeMismatchException("concat", tensors[0].shape, t.shape, reason="除末维外形状需一致")
    widths = [t.shape[-1] for t in tensors]
    bounds = np.cumsum([0] + widths)

    def _backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _result(np.concatenate([t.data for t in tensors], axis=-1), tensors, _backward, "concat")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """嵌入查表：weight (V, d)，ids 为整数数组"""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ShapeMismatchException("embedding", weight.shape, ids.shape, reason=f"id 越界 (词表大小 {vocab})")

    def _backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _result(weight.data[ids], (weight,), _backward, "embedding")


# ==================== 归约 ====================

def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def _backward(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), _backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.size // max(out_data.size, 1)

    def _backward(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)) / count,)

    return _result(out_data, (x,), _backward, "mean")


# ==================== 损失 ====================

def cross_entropy(logits: Tensor, targets: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    logits 上的交叉熵，按 mask 加权平均

    Args:
        logits: (..., V)
        targets: (...) 整数目标
        mask: (...) 权重，None 表示全部参与

    Returns:
        Tensor: 标量损失（mask 全零时为 0）
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeMismatchException("cross_entropy", logits.shape, targets.shape)
    weights = np.ones(targets.shape, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype)
    if weights.shape != targets.shape:
        raise ShapeMismatchException("cross_entropy", targets.shape, weights.shape, reason="mask 形状")
    denom = float(weights.sum()) or 1.0

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
    loss = np.asarray(-(picked * weights).sum() / denom, dtype=logits.dtype)

    def _backward(g):
        probs = np.exp(log_probs)
        np.put_along_axis(probs, targets[..., None], np.take_along_axis(probs, targets[..., None], -1) - 1.0, -1)
        return (probs * (weights[..., None] / denom) * g,)

    return _result(loss, (logits,), _backward, "cross_entropy")


def l1_loss(pred: Tensor, target: ArrayLike) -> Tensor:
    """平均绝对误差，target 视为常量"""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeMismatchException("l1_loss", pred.shape, target.shape)
    diff = pred.data - target
    count = max(diff.size, 1)

    def _backward(g):
        return (np.sign(diff) * (g / count),)

    return _result(np.asarray(np.abs(diff).mean(), dtype=pred.dtype), (pred,), _backward, "l1_loss")


def binary_cross_entropy(prob: Tensor, labels: ArrayLike, eps: float = 1e-7) -> Tensor:
    """概率与 {0,1} 标签之间的二元交叉熵，对数参数下限为 eps"""
    labels = np.asarray(labels, dtype=prob.dtype)
    if labels.shape != prob.shape:
        raise ShapeMismatchException("binary_cross_entropy", prob.shape, labels.shape)
    p = prob.data
    pos = np.clip(p, eps, 1.0)
    neg = np.clip(1.0 - p, eps, 1.0)
    count = max(p.size, 1)
    loss = -(labels * np.log(pos) + (1.0 - labels) * np.log(neg)).sum() / count

    def _backward(g):
        d_pos = np.where(p >= eps, labels / pos, 0.0)
        d_neg = np.where(1.0 - p >= eps, (1.0 - labels) / neg, 0.0)
        return ((-(d_pos - d_neg) / count * g).astype(prob.dtype),)

    return _result(np.asarray(loss, dtype=prob.dtype), (prob,), _backward, "binary_cross_entropy")


# ==================== 反向传播 ====================

def _topological_order(root: Tensor) -> List[Tensor]:
    """迭代式后序遍历，只包含需要梯度的节点"""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    从标量 loss 反向传播

    叶子梯度累加到 .grad；中间节点梯度只在本次调用内存在。

    Raises:
        ShapeMismatchException: loss 不是标量
    """
    if loss.size != 1:
        raise ShapeMismatchException("backward", loss.shape, reason="只能对标量调用 backward")
    if not loss.requires_grad:
        return

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            _check_finite(parent_grad, f"{node._op}.backward")
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """
    中心差分梯度校验

    Args:
        f: 以 x 为输入的标量函数（也可通过闭包读取 x）
        x: 需要校验的张量，必须为 64 位
        eps: 扰动步长

    Returns:
        float: max |解析 − 数值| / max(1, |解析|)
    """
    if x.dtype != np.float64:
        raise NumericalException("梯度校验需要 64 位精度", operator="finite_difference_check")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    with no_grad():
        for idx in np.ndindex(*x.shape):
            original = x.data[idx]
            x.data[idx] = original + eps
            plus = f(x).item()
            x.data[idx] = original - eps
            minus = f(x).item()
            x.data[idx] = original
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise NumericalException("扰动后的函数值非有限", operator="finite_difference_check")
            numeric[idx] = (plus - minus) / (2.0 * eps)

    error = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(error.max()) if error.size else 0.0


# ==================== 参数集合 ====================

def uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    """均匀初始化 U(-1/sqrt(fan_in), 1/sqrt(fan_in))"""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=tuple(shape))


class ParameterSet:
    """
    有序命名参数集合

    名称形如 "encoder.layer0.Wk"；顺序即注册顺序，保存/加载保持不变。
    """

    def __init__(self):
        self._entries: Dict[str, Tensor] = {}

    @classmethod
    def from_tensors(cls, tensors: Dict[str, Tensor]) -> "ParameterSet":
        """共享已有张量对象的参数视图（如临时预训练头 + 编码器参数）"""
        view = cls()
        view._entries = dict(tensors)
        return view

    def register(self, name: str, data: ArrayLike) -> Tensor:
        if name in self._entries:
            raise STInstructException(f"参数名重复: {name}", error_code=ErrorCode.INVALID_PARAMETER)
        param = Tensor(data, requires_grad=True, name=name)
        self._entries[name] = param
        return param

    def create(self, name: str, shape: Sequence[int], rng: np.random.Generator,
               fan_in: Optional[int] = None, zeros: bool = False) -> Tensor:
        """按约定初始化并注册：权重均匀初始化，偏置为零"""
        if zeros:
            return self.register(name, np.zeros(tuple(shape)))
        return self.register(name, uniform_init(rng, shape, fan_in if fan_in is not None else shape[0]))

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> List[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def subset(self, prefix: str) -> Dict[str, Tensor]:
        return {k: v for k, v in self._entries.items() if k.startswith(prefix)}

    def zero_grads(self) -> None:
        for param in self._entries.values():
            param.grad = np.zeros_like(param.data)

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self._entries.values()]))

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._entries.items()}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        """按名称加载参数值，名称集合与形状必须一致"""
        if list(arrays) != list(self._entries):
            raise STInstructException(
                "参数名称或顺序不一致",
                error_code=ErrorCode.INVALID_PARAMETER,
                details={"expected": list(self._entries)[:5], "got": list(arrays)[:5]},
            )
        for name, value in arrays.items():
            if tuple(value.shape) != self._entries[name].shape:
                raise ShapeMismatchException(
                    f"load_state_arrays[{name}]", self._entries[name].shape, value.shape, reason="参数形状不一致"
                )
        for name, value in arrays.items():
            param = self._entries[name]
            param.data = np.array(value, dtype=param.dtype)
            param.grad = None


class AdamOptimizer:
    """
    带偏差校正的自适应矩估计优化器

    每次 step 之后清零梯度；可选全局范数梯度裁剪（默认关闭）。
    """

    def __init__(self, params: ParameterSet, lr: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, clip_norm: Optional[float] = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def _moments(self, name: str, param: Tensor) -> Tuple[np.ndarray, np.ndarray]:
        if name not in self.m or self.m[name].shape != param.shape:
            self.m[name] = np.zeros_like(param.data)
            self.v[name] = np.zeros_like(param.data)
        return self.m[name], self.v[name]

    def step(self) -> None:
        missing = [name for name, p in self.params.items() if p.grad is None]
        if missing:
            raise STInstructException(
                f"{len(missing)} 个参数缺少梯度，例如 {missing[0]}",
                error_code=ErrorCode.GRADIENT_ERROR,
                details={"missing": missing[:10]},
            )

        scale = 1.0
        if self.clip_norm is not None:
            total = math.sqrt(float(np.sum([np.sum(p.grad.astype(np.float64) ** 2) for _, p in self.params.items()])))
            if total > self.clip_norm:
                scale = self.clip_norm / (total + 1e-12)

        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, param in self.params.items():
            grad = param.grad * scale
            if self.weight_decay:
                grad = grad + self.weight_decay * param.data
            m, v = self._moments(name, param)
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            update = self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            param.data = (param.data - update).astype(param.dtype)
            _check_finite(param.data, f"adam[{name}]")
        self.params.zero_grads()

    def state_dict(self) -> Dict[str, object]:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: Dict[str, object]) -> None:
        self.t = int(state["t"])
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}
