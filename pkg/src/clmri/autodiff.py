"""A small reverse-mode autodiff engine over float64 numpy arrays.

Each op builds its output with a closure mapping the upstream gradient to
one gradient per parent. ``Tensor.backward`` walks the graph in reverse
topological order and accumulates into ``.grad`` of requires-grad leaves
only; intermediate gradients live in a local dict for the duration of the
pass.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "conv2d",
    "relu",
    "leaky_relu",
    "exp",
    "log",
    "abs",
    "sum",
    "mean",
    "square",
    "sqrt",
    "l2_norm",
    "dot",
    "concat_channels",
    "slice_channels",
    "RMSProp",
    "rmsprop_step",
]


class ShapeError(ValueError):
    pass


class Tensor:
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward: Callable | None = None, _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None if self.grad is None else np.zeros_like(self.data)

    def __repr__(self) -> str:
        extra = f", op={self._op!r}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{extra})"

    def backward(self) -> None:
        if self.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, validation)."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


def _make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, _op=op)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a) -> Tensor:
    a = _lift(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = _lift(a)
    return _make(a.data ** 2, (a,), lambda g: (2 * a.data * g,), "square")


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2 * out),), "sqrt")


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _lift(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _lift(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a) -> Tensor:
    a = _lift(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = _lift(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


# -- reductions ---------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def l2_norm(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(np.sum(a.data ** 2))
    return _make(out, (a,), lambda g: (g * a.data / out,), "l2_norm")


def dot(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"dot: expected equal 1-D shapes, got {a.shape} and {b.shape}")
    return _make(np.dot(a.data, b.data), (a, b), lambda g: (g * b.data, g * a.data), "dot")


# -- shape ops -------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _lift(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a) -> Tensor:
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    rest = {(t.shape[0],) + t.shape[2:] for t in tensors}
    if any(t.ndim != 4 for t in tensors) or len(rest) != 1:
        raise ShapeError(f"concat_channels: incompatible shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([t.data for t in tensors], axis=1), tensors, backward, "concat_channels")


def slice_channels(a, start: int, stop: int) -> Tensor:
    a = _lift(a)
    if a.ndim != 4 or not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"slice_channels: bad range [{start}, {stop}) for shape {a.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _make(a.data[:, start:stop], (a,), backward, "slice_channels")


# -- convolution -----------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (C*k*k, N*H*W) patches for stride-1 'same' padding."""
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((c, k, k, n, h, w))
    xp_t = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp_t[:, :, i:i + h, j:j + w]
    return cols.reshape(c * k * k, n * h * w)


def _conv_forward(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, _, h, wd = x.shape
    cout, _, k, _ = w.shape
    cols = _im2col(x, k)
    out = (w.reshape(cout, -1) @ cols).reshape(cout, n, h, wd).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def conv2d(x, weight, bias=None) -> Tensor:
    """Stride-1 cross-correlation with zero 'same' padding.

    x: (N, Cin, H, W); weight: (Cout, Cin, k, k) with odd k; bias: (Cout,).
    """
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {weight.shape}")
    k = weight.shape[2]
    if weight.shape[3] != k or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {weight.shape[2:]}")
    out, cols = _conv_forward(x.data, weight.data)
    parents = [x, weight]
    if bias is not None:
        bias = _lift(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {weight.shape[0]} channels")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        cout = weight.shape[0]
        g_flat = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (g_flat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx, _ = _conv_forward(g, np.ascontiguousarray(flipped))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, backward, "conv2d")


# -- optimizer -------------------------------------------------------------------

class RMSProp:
    """RMSProp: acc <- rho*acc + (1-rho)*g^2; p <- p - lr*g/(sqrt(acc)+eps)."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, rho: float = 0.99, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.rho, self.eps = lr, rho, eps
        self.acc = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        rmsprop_step(self.params, grads, self)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def rmsprop_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: RMSProp) -> None:
    if len(params) != len(grads) or len(params) != len(state.acc):
        raise ValueError("params, grads and accumulators must align")
    for p, g, acc in zip(params, grads, state.acc):
        if g.shape != p.shape:
            raise ShapeError(f"rmsprop: gradient shape {g.shape} does not match parameter {p.shape}")
        acc *= state.rho
        acc += (1 - state.rho) * g * g
        p.data -= state.lr * g / (np.sqrt(acc) + state.eps)
