"""
Tensor Module
Dense float64 tensors with reverse-mode automatic differentiation

Every primitive records its parents and a local gradient rule when at least one
input requires a gradient. The graph is rebuilt on every forward pass, so the
augmentation graph may change from batch to batch.
"""

import contextlib
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.utils.errors import GradientError, NumericalError, ShapeError

_CHECK_FINITE = False
_GRAD_ENABLED = True

GradRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def set_check_finite(flag: bool) -> None:
    """Enable or disable the finite-value assertion after every primitive"""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(flag)


def is_check_finite() -> bool:
    return _CHECK_FINITE


@contextlib.contextmanager
def check_finite(flag: bool = True) -> Iterator[None]:
    previous = _CHECK_FINITE
    set_check_finite(flag)
    try:
        yield
    finally:
        set_check_finite(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording the graph"""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """Dense N-dimensional float64 array participating in reverse-mode autodiff"""

    # ndarray (op) Tensor dispatches to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple['Tensor', ...] = ()
        self._grad_rule: Optional[GradRule] = None
        self._op = 'leaf'
        self._consumed = False

    @classmethod
    def _wrap(cls, data: np.ndarray) -> 'Tensor':
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._grad_rule = None
        out._op = 'leaf'
        out._consumed = False
        return out

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
    def is_leaf(self) -> bool:
        return self._grad_rule is None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # Operator overloads
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def __pow__(self, exponent: float):
        return pow_scalar(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self) -> 'Tensor':
        return relu(self)

    def sqrt(self) -> 'Tensor':
        return sqrt(self)

    def exp(self) -> 'Tensor':
        return exp(self)

    def log(self) -> 'Tensor':
        return log(self)


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence]


def as_tensor(value: TensorLike) -> Tensor:
    """Wrap constants; tensors pass through untouched"""
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=np.float64))


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], grad_rule: GradRule, op: str) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor._wrap(data)
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_rule = grad_rule
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """Ordered record of the primitives that produced an output, parents first"""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: List[Tensor] = self._topological_order(output)

    @staticmethod
    def _topological_order(output: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack = [(output, False)]
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
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.nodes)

    def backward(self) -> None:
        output = self.output
        if output._consumed:
            raise GradientError("backward called twice on the same graph; run a new forward pass")
        if output.size != 1:
            raise GradientError(f"backward requires a scalar loss, got shape {output.shape}")

        pending = {id(output): np.ones_like(output.data)}
        for node in reversed(self.nodes):
            grad = pending.pop(id(node), None)
            if grad is None or not node.requires_grad:
                continue
            if node.is_leaf:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            node.grad = grad
            for parent, parent_grad in zip(node._parents, node._grad_rule(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

        for node in self.nodes:
            if not node.is_leaf:
                node._consumed = True
                node._grad_rule = None
                node._parents = ()
                node._op = 'consumed'


def backward(loss: Tensor) -> None:
    """Populate .grad of every requires_grad leaf with dLoss/dLeaf"""
    if loss._consumed:
        raise GradientError("backward called twice on the same graph; run a new forward pass")
    Tape(loss).backward()


# Elementwise primitives

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), 'add')


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), 'sub')


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)), 'mul')


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def grad_rule(g):
        return (unbroadcast(g / b.data, a.shape),
                unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), grad_rule, 'div')


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), 'neg')


def pow_scalar(a: TensorLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    out = a.data ** exponent

    def grad_rule(g):
        if exponent == 0.0:
            return (np.zeros_like(a.data),)
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _result(out, (a,), grad_rule, 'pow')


def sqrt(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (0.5 * g / out,), 'sqrt')


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), 'exp')


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), 'log')


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), 'relu')


# Reductions and shape

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tensor_sum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), grad_rule, 'sum')


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def grad_rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(np.asarray(out), (a,), grad_rule, 'mean')


def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from e
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), 'reshape')


def global_avg_pool(x: TensorLike) -> Tensor:
    """[N, C, H, W] -> [N, C]"""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N, C, H, W], got {x.shape}")
    return mean(x, axis=(2, 3))


# Linear algebra

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return _result(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g), 'matmul')


def conv2d(x: TensorLike, k: TensorLike, stride: int = 1, pad: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding; [N,Cin,H,W] * [Cout,Cin,3,3] -> [N,Cout,H,W]"""
    x, k = as_tensor(x), as_tensor(k)
    if stride != 1 or pad != 1:
        raise ValueError("conv2d supports stride=1, pad=1 only")
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {k.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = k.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"conv2d kernel must be 3x3, got {kh}x{kw}")
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(2, 3))
    out = np.einsum('nchwij,ocij->nohw', windows, k.data, optimize=True)

    def grad_rule(g):
        grad_k = np.einsum('nchwij,nohw->ocij', windows, g, optimize=True)
        grad_padded = np.zeros_like(padded)
        for i in range(3):
            for j in range(3):
                grad_padded[:, :, i:i + h, j:j + w] += np.einsum(
                    'nohw,oc->nchw', g, k.data[:, :, i, j], optimize=True)
        return grad_padded[:, :, 1:-1, 1:-1], grad_k

    return _result(np.ascontiguousarray(out), (x, k), grad_rule, 'conv2d')


# Classification heads

def _validate_targets(logits: Tensor, y) -> np.ndarray:
    if logits.ndim != 2:
        raise ShapeError(f"expected logits [N, K], got {logits.shape}")
    n, k = logits.shape
    if n == 0:
        raise ValueError("empty batch")
    y = np.asarray(y)
    if y.shape != (n,):
        raise ShapeError(f"targets shape {y.shape} does not match batch of {n}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("class indices must be integers")
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"class index out of range [0, {k})")
    return y.astype(np.int64)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_softmax(logits: TensorLike) -> Tensor:
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"expected logits [N, K], got {logits.shape}")
    out = _log_softmax(logits.data)
    probs = np.exp(out)
    return _result(out, (logits,),
                   lambda g: (g - probs * g.sum(axis=1, keepdims=True),), 'log_softmax')


def pick(a: TensorLike, index) -> Tensor:
    """Row-wise gather: out[n] = a[n, index[n]]"""
    a = as_tensor(a)
    index = _validate_targets(a, index)
    rows = np.arange(a.shape[0])

    def grad_rule(g):
        grad = np.zeros_like(a.data)
        grad[rows, index] = g
        return (grad,)

    return _result(a.data[rows, index], (a,), grad_rule, 'pick')


def softmax_cross_entropy(logits: TensorLike, y) -> Tensor:
    """Mean negative log-likelihood over the batch, via log-sum-exp"""
    logits = as_tensor(logits)
    y = _validate_targets(logits, y)
    n = logits.shape[0]
    rows = np.arange(n)
    log_probs = _log_softmax(logits.data)
    loss = -log_probs[rows, y].mean()

    def grad_rule(g):
        grad = np.exp(log_probs)
        grad[rows, y] -= 1.0
        return (grad * (g / n),)

    return _result(np.asarray(loss), (logits,), grad_rule, 'softmax_cross_entropy')
