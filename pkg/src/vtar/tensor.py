"""Dense numpy-backed tensors with reverse-mode differentiation.

Every op records its parents and a closure that maps the output gradient to
one gradient per parent. ``Tensor.backward`` walks the graph once in reverse
topological order, sums gradients for tensors used more than once, and then
drops the graph.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, ShapeError

DEFAULT_DTYPE = np.float32


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._op = ""

    # -- construction helpers -------------------------------------------------
    @classmethod
    def zeros(cls, shape, requires_grad=False, dtype=DEFAULT_DTYPE) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad=False, dtype=DEFAULT_DTYPE) -> "Tensor":
        return cls(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    @classmethod
    def randn(cls, shape, rng: np.random.Generator, std=1.0, requires_grad=False,
              dtype=DEFAULT_DTYPE) -> "Tensor":
        return cls((rng.standard_normal(shape) * std).astype(dtype), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self._op or 'leaf'})"

    # -- autodiff ---------------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            # graphs are single-use
            node._parents = ()
            node._backward = None

    # -- operator sugar -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _topological_order(root: Tensor) -> list:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if type(data) is np.ndarray else np.asarray(data)
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out._op = ""
    for p in parents:
        if p.requires_grad:
            break
    else:
        return out
    out.requires_grad = True
    out._parents = tuple(parents)
    out._backward = backward
    out._op = op
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# -- elementwise ------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _result(a.data / b.data, (a, b), backward, "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), backward, "relu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def backward(g):
        return (g * y,)

    return _result(y, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    def backward(g):
        return (g / x.data,)

    return _result(np.log(x.data), (x,), backward, "log")


# -- shape ops --------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), (x,), backward, "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _result(x.data.transpose(axes), (x,), backward, "permute")


def take(x: Tensor, index) -> Tensor:
    """Numpy-style indexing; repeated indices accumulate in the backward pass."""

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _result(x.data[index], (x,), backward, "take")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    return take(table, ids)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


# -- reductions ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims) * (1.0 / n)).astype(x.dtype, copy=False),
                   (x,), backward, "mean")


# -- linear algebra -------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast as batch axes."""
    a = as_tensor(a)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


# -- fused normalisation / probability ops ----------------------------------------------------

def softmax(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``logits / temperature``."""
    if not temperature > 0:
        raise DomainError(f"softmax temperature must be positive, got {temperature}")
    z = logits.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)) / temperature,)

    return _result(y, (logits,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm gain/bias {gain.shape}/{bias.shape} do not fit input {x.shape}")
    inv_d = 1.0 / x.shape[-1]
    xc = x.data - x.data.sum(axis=-1, keepdims=True) * inv_d
    inv = 1.0 / np.sqrt((xc * xc).sum(axis=-1, keepdims=True) * inv_d + eps)
    xhat = xc * inv

    def backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.sum(axis=-1, keepdims=True) * inv_d
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True) * inv_d)
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, ggain, gbias

    return _result(xhat * gain.data + bias.data, (x, gain, bias), backward, "layer_norm")


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each last-axis slice to unit length; slices with norm below ``eps`` become 0."""
    norm = np.sqrt((v.data * v.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = v.data / denom
    small = norm < eps

    def backward(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        gv = np.where(small, g / eps, (g - y * proj) / denom)
        return (gv,)

    return _result(y, (v,), backward, "l2_normalize")


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    if u.shape != v.shape:
        raise ShapeError(f"cosine_similarity shape mismatch: {u.shape} vs {v.shape}")
    if not np.any(u.data) or not np.any(v.data):
        raise DomainError("cosine_similarity is undefined for a zero vector")
    return tsum(l2_normalize(u) * l2_normalize(v), axis=-1)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_from_logits(logits: Tensor, targets: Iterable[int]) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[target]``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects logits of shape (B, K), got {logits.shape}")
    b, k = logits.shape
    targets = np.asarray(list(targets), dtype=np.int64)
    if targets.shape != (b,):
        raise ShapeError(f"expected {b} targets, got {targets.shape[0]}")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise IndexError(f"target out of range [0, {k}): {targets.tolist()}")
    logp = log_softmax_np(logits.data)
    rows = np.arange(b)
    loss = -logp[rows, targets].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (grad * (g / b),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")
