"""
张量与反向自动微分

在numpy数组之上的最小张量运算集合：每个运算在当前Tape上记录一个节点，
backward 按记录的逆序各调用一次向量-雅可比积。另含MLP、参数初始化、
带动量的SGD以及阶梯式学习率。全部使用float64。
"""
import logging
import threading
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from exceptions import NumericError, ShapeMismatchError, ValidationError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    """行主序float64数组；requires_grad 的张量参与反向传播"""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() needs a single element, got shape {self.shape}",
                                     shapes=(self.shape,))
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, name={self.name})"


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tape:
    """
    运算记录

    用作上下文管理器；同一线程内只有栈顶的Tape接收记录。
    没有活动Tape时运算照常计算但不记录（推理模式）。
    """

    _local = threading.local()

    def __init__(self):
        self.nodes: List[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(Tape._local, "stack", None)
        if stack is None:
            stack = Tape._local.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._local.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    @staticmethod
    def current() -> Optional["Tape"]:
        stack = getattr(Tape._local, "stack", None)
        return stack[-1] if stack else None

    def ops(self) -> List[str]:
        return [n.op for n in self.nodes]


def _record(op: str, inputs: Tuple[Tensor, ...], out_data: np.ndarray, vjp) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite values produced by {op}", op=op)
    tape = Tape.current()
    requires = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    if requires:
        tape.nodes.append(_Node(op, inputs, out, vjp))
    return out


def _check_suffix(a: Tuple[int, ...], b: Tuple[int, ...], op: str):
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeMismatchError(f"{op}: shapes {a} and {b} only broadcast over leading axes",
                                 shapes=(a, b))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把沿前导轴广播的梯度求和回原形状"""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# ---------------------------------------------------------------------------
# 基本运算
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), a.data + b.data, vjp)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", (a, b), a.data * b.data, vjp)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """(..., m, n) @ (..., n, p)，两侧批维必须完全相同"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} @ {b.shape}",
                                 shapes=(a.shape, b.shape))

    def vjp(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _record("matmul", (a, b), a.data @ b.data, vjp)


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", ts, np.concatenate([t.data for t in ts], axis=axis), vjp)


def reshape(x: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        return (g.reshape(x.shape),)

    return _record("reshape", (x,), x.data.reshape(shape), vjp)


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return _record("relu", (x,), np.where(mask, x.data, 0.0), vjp)


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return _record("exp", (x,), out, vjp)


def log(x: ArrayLike, floor: float = 0.0) -> Tensor:
    """log(max(x, floor))；被截断的元素梯度为0"""
    x = as_tensor(x)
    active = x.data > floor
    safe = np.where(active, x.data, 1.0)
    out = np.where(active, np.log(safe), np.log(floor) if floor > 0 else -np.inf)

    def vjp(g):
        return (np.where(active, g / safe, 0.0),)

    return _record("log", (x,), out, vjp)


def sum(x: ArrayLike, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    x = as_tensor(x)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record("sum", (x,), np.sum(x.data, axis=axis), vjp)


def mean(x: ArrayLike, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), x.shape).copy(),)

    return _record("mean", (x,), np.mean(x.data, axis=axis), vjp)


def log_softmax(x: ArrayLike) -> Tensor:
    """最后一维上的log-softmax，用logsumexp保证数值稳定"""
    x = as_tensor(x)
    out = x.data - logsumexp(x.data, axis=-1, keepdims=True)
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * np.sum(g, axis=-1, keepdims=True),)

    return _record("log_softmax", (x,), out, vjp)


def outer_add(a: ArrayLike, b: ArrayLike) -> Tensor:
    """out[i, j] = a[i] + b[j]；a: (N, d), b: (M, d) -> (N, M, d)"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatchError(f"outer_add: incompatible shapes {a.shape} and {b.shape}",
                                 shapes=(a.shape, b.shape))

    def vjp(g):
        return g.sum(axis=1), g.sum(axis=0)

    return _record("outer_add", (a, b), a.data[:, None, :] + b.data[None, :, :], vjp)


def gather_rows(x: ArrayLike, index: np.ndarray) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _record("gather_rows", (x,), x.data[index], vjp)


def scatter_add_rows(x: ArrayLike, index: np.ndarray, n_rows: int) -> Tensor:
    """out[index[e]] += x[e]，按e的顺序累加"""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((n_rows,) + x.shape[1:])
    np.add.at(out, index, x.data)

    def vjp(g):
        return (g[index],)

    return _record("scatter_add_rows", (x,), out, vjp)


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor]) -> List[np.ndarray]:
    """
    反向传播

    Args:
        tape: 记录了前向计算的Tape
        loss: 标量损失
        params: 需要梯度的参数

    Returns:
        与params一一对应的梯度；未参与计算的参数梯度为0
    """
    if loss.data.size != 1:
        raise ShapeMismatchError(f"backward needs a scalar loss, got shape {loss.shape}",
                                 shapes=(loss.shape,))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64)

    return [grads.get(id(p), np.zeros_like(p.data)).reshape(p.shape) for p in params]


# ---------------------------------------------------------------------------
# 损失
# ---------------------------------------------------------------------------

def negative_log_likelihood(log_probs: Tensor, labels: np.ndarray) -> Tensor:
    """有标签行的 -log p[label] 的平均；label 为 -1 的行忽略"""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = log_probs.shape
    if labels.shape != (n,):
        raise ShapeMismatchError(f"labels shape {labels.shape} does not match {n} rows",
                                 shapes=(labels.shape, log_probs.shape))
    if np.any(labels >= k) or np.any(labels < -1):
        raise ValidationError(f"label index out of range [0, {k})", field="labels")
    labeled = labels >= 0
    count = int(np.count_nonzero(labeled))
    if count == 0:
        raise ValidationError("no labeled rows for the loss", field="labels")

    onehot = np.zeros((n, k))
    onehot[np.nonzero(labeled)[0], labels[labeled]] = 1.0
    return mul(sum(mul(log_probs, onehot)), np.array(-1.0 / count))


def softmax_cross_entropy(logits: ArrayLike, labels: np.ndarray) -> Tensor:
    """mean(-log softmax(logits)[label])"""
    labels = np.asarray(labels, dtype=np.int64)
    logits = as_tensor(logits)
    if np.any(labels < 0) or np.any(labels >= logits.shape[-1]):
        raise ValidationError(f"label index out of range [0, {logits.shape[-1]})", field="labels")
    return negative_log_likelihood(log_softmax(logits), labels)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MLPParams:
    """逐层权重 (fan_in, fan_out) 与偏置；隐藏层ReLU，输出层线性"""
    weights: Tuple[Tensor, ...]
    biases: Tuple[Tensor, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatchError("MLP needs one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeMismatchError(f"layer {i}: weight {w.shape} / bias {b.shape}",
                                         shapes=(w.shape, b.shape))
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeMismatchError(f"layer {i}: dims do not chain",
                                         shapes=(self.weights[i - 1].shape, w.shape))

    @property
    def dims(self) -> Tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def parameters(self) -> List[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_values(self, values: Sequence[np.ndarray]) -> "MLPParams":
        tensors = [_param(v) for v in values]
        return MLPParams(tuple(tensors[0::2]), tuple(tensors[1::2]))


def _param(value: np.ndarray) -> Tensor:
    data = np.array(value, dtype=np.float64)
    data.flags.writeable = False
    return Tensor(data, requires_grad=True)


def make_rng(seed) -> np.random.Generator:
    """显式使用PCG64，保证同一种子逐位可复现"""
    return np.random.Generator(np.random.PCG64(seed))


def init_params(seed, layer_dims: Sequence[int]) -> MLPParams:
    """Glorot均匀初始化，偏置为0"""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValidationError(f"invalid layer dims {dims}", field="layer_dims")
    rng = make_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(_param(rng.uniform(-limit, limit, size=(fan_in, fan_out))))
        biases.append(_param(np.zeros(fan_out)))
    return MLPParams(tuple(weights), tuple(biases))


def mlp_apply(p: MLPParams, x: ArrayLike) -> Tensor:
    """沿最后一维应用MLP，前导维视为批"""
    x = as_tensor(x)
    d_in = p.dims[0]
    if x.ndim < 1 or x.shape[-1] != d_in:
        raise ShapeMismatchError(f"mlp input last dim {x.shape[-1:]} != {d_in}",
                                 shapes=(x.shape, (d_in,)))
    lead = x.shape[:-1]
    h = reshape(x, (-1, d_in))
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = add(matmul(h, w), b)
        if i < last:
            h = relu(h)
    return reshape(h, lead + (p.dims[-1],))


def mlp_apply_outer(p: MLPParams, rows: np.ndarray, cols: np.ndarray, cols_first: bool = False) -> Tensor:
    """
    对所有 (r, c) 组合应用MLP，输入为 rows[r] ⊕ cols[c]（cols_first 时为 cols[c] ⊕ rows[r]）

    第一层按输入拆成两块分别相乘再外加，不展开 (N*M, d_in) 的拼接输入。
    返回 (N, M, d_out)，与 mlp_apply 作用在拼接输入上的结果一致。
    """
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    d_in = p.dims[0]
    if rows.ndim != 2 or cols.ndim != 2 or rows.shape[1] + cols.shape[1] != d_in:
        raise ShapeMismatchError(f"mlp inputs {rows.shape} and {cols.shape} do not sum to {d_in}",
                                 shapes=(rows.shape, cols.shape, (d_in,)))
    n, m = rows.shape[0], cols.shape[0]
    d_first = cols.shape[1] if cols_first else rows.shape[1]
    w0 = p.weights[0]
    w_head = gather_rows(w0, np.arange(d_first))
    w_tail = gather_rows(w0, np.arange(d_first, d_in))
    w_rows, w_cols = (w_tail, w_head) if cols_first else (w_head, w_tail)

    h = add(outer_add(matmul(rows, w_rows), matmul(cols, w_cols)), p.biases[0])
    last = len(p.weights) - 1
    if last > 0:
        h = relu(h)
    h = reshape(h, (n * m, h.shape[-1]))
    for i in range(1, last + 1):
        h = add(matmul(h, p.weights[i]), p.biases[i])
        if i < last:
            h = relu(h)
    return reshape(h, (n, m, p.dims[-1]))


# ---------------------------------------------------------------------------
# 优化器
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerState:
    """每个参数的速度张量、动量系数和迭代计数"""
    velocities: Tuple[np.ndarray, ...]
    momentum: float = 0.9
    iteration: int = 0


def init_optimizer_state(params: Sequence[Tensor], momentum: float = 0.9) -> OptimizerState:
    return OptimizerState(tuple(np.zeros_like(p.data) for p in params), momentum, 0)


def sgd_momentum_step(
    params: Sequence[ArrayLike],
    grads: Sequence[np.ndarray],
    state: OptimizerState,
    lr: float,
) -> Tuple[List[np.ndarray], OptimizerState]:
    """v <- mu*v + g;  p <- p - lr*v"""
    if not (len(params) == len(grads) == len(state.velocities)):
        raise ShapeMismatchError("params, grads and velocities differ in count")

    new_params, new_velocities = [], []
    for p, g, v in zip(params, grads, state.velocities):
        p = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
        if not (p.shape == np.shape(g) == v.shape):
            raise ShapeMismatchError("sgd step shape mismatch", shapes=(p.shape, np.shape(g), v.shape))
        v_next = state.momentum * v + g
        new_velocities.append(v_next)
        new_params.append(p - lr * v_next)

    return new_params, OptimizerState(tuple(new_velocities), state.momentum, state.iteration + 1)


def lr_at(iteration: int, base_lr: float = 0.01, decay: float = 0.1, period: int = 5000) -> float:
    """阶梯衰减：base_lr * decay^floor(iter/period)"""
    if iteration < 0:
        raise ValidationError(f"iteration must be >= 0, got {iteration}", field="iteration")
    return base_lr * decay ** (iteration // period)
