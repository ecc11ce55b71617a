"""Dense float64 tensors with a reverse-mode differentiation tape.

Operations record themselves on the innermost active :class:`Tape`.  Outside
of a tape they simply compute, which is what inference uses.

    >>> w = Parameter(np.ones(3), name="w")
    >>> with Tape() as tape:
    ...     loss = tsum(w)
    >>> tape.backward(loss)
    >>> w.grad
    array([1., 1., 1.])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float64
DEFAULT_LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape."""


class MissingGradError(RuntimeError):
    """An optimizer step found a parameter without a gradient."""


class Tensor:
    """A dense array that may take part in differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        if self._node is None:
            raise TapeError("tensor was not produced on an active tape")
        self._node.tape.backward(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.shape), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A learnable leaf tensor with its momentum buffer."""

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.velocity = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x, shape=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=DTYPE)
    if shape is not None and arr.shape != shape:
        arr = np.broadcast_to(arr, shape)
    return Tensor(arr)


@dataclass
class _Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    tape: "Tape"


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    A tape can be replayed backward once.  Use it as a context manager so
    operations executed inside the block are recorded.
    """

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("backward called twice on a consumed tape")
        if loss._node is None or loss._node.tape is not self:
            raise TapeError("loss was not produced on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True

        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + gi
                else:
                    grads[id(inp)] = gi


_ACTIVE: list = []


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def _make(op: str, data: np.ndarray, inputs: tuple, backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    tape = active_tape()
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out._node = _Node(op, inputs, out, backward, tape)
        tape.nodes.append(out._node)
    return out


def _check_finite(op: str, *xs: Tensor) -> None:
    for x in xs:
        if not np.all(np.isfinite(x.data)):
            raise FloatingPointError(f"{op} received non-finite input")


# --------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match."""
    a, b = _as_tensor(a), _as_tensor(b)
    if (
        a.ndim < 2
        or a.ndim != b.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (
            g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None,
            np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None,
        )

    return _make("matmul", ad @ bd, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` to every trailing block of ``x`` (bias-style broadcasting)."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"bias shape {b.shape} does not trail {x.shape}")

    def backward(g):
        gb = g.reshape((-1,) + b.shape).sum(axis=0) if b.requires_grad else None
        return g, gb

    return _make("add_bias", x.data + b.data, (x, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _make("scale", x.data * c, (x,), lambda g: (g * c,))


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))
    return _make("transpose", data, (x,), lambda g: (g.transpose(inv),))


def tsum(x: Tensor, axis=None) -> Tensor:
    """Sum over ``axis`` (all axes when None)."""
    x = _as_tensor(x)
    shape = x.shape
    data = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", data, (x,), backward)


def mean_pool(x: Tensor, axes) -> Tensor:
    """Arithmetic mean over ``axes``."""
    x = _as_tensor(x)
    axes = tuple(axes)
    count = 1
    for ax in axes:
        if x.shape[ax] < 1:
            raise ShapeError(f"cannot pool over empty axis {ax} of {x.shape}")
        count *= x.shape[ax]
    shape = x.shape
    data = x.data.sum(axis=axes) / count

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, shape).copy(),)

    return _make("mean_pool", data, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    _check_finite("tanh", x)
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def leaky_relu(x: Tensor, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    x = _as_tensor(x)
    _check_finite("leaky_relu", x)
    mask = x.data >= 0
    out = np.where(mask, x.data, x.data * slope)
    return _make("leaky_relu", out, (x,), lambda g: (np.where(mask, g, g * slope),))


def activation(x: Tensor, kind: str, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    if kind == "tanh":
        return tanh(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    raise ValueError(f"unknown activation {kind!r}")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by max subtraction."""
    x = _as_tensor(x)
    _check_finite("softmax_rows", x)
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make("softmax_rows", s, (x,), backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` applied to the last axis of ``x``."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear dimension mismatch: {x.shape} @ {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear bias {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    wd = w.data
    out = x2 @ wd
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    inputs = (x, w, b) if b is not None else (x, w)
    return _make("linear", out.reshape(lead + (wd.shape[1],)), inputs, backward)


def concat_last(xs: Sequence[Tensor]) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat_last needs at least one tensor")
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise ShapeError(
                f"concat_last leading dims mismatch: {xs[0].shape} vs {x.shape}"
            )
    offsets = np.cumsum([0] + [x.shape[-1] for x in xs])

    def backward(g):
        return tuple(g[..., offsets[i]:offsets[i + 1]] for i in range(len(xs)))

    return _make("concat_last", np.concatenate([x.data for x in xs], axis=-1),
                 tuple(xs), backward)


def split_last(x: Tensor, sizes: Sequence[int]) -> list:
    """Inverse of :func:`concat_last` on plain arrays (not differentiable)."""
    offsets = np.cumsum([0] + list(sizes))
    if offsets[-1] != x.shape[-1]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover {x.shape}")
    return [x.data[..., offsets[i]:offsets[i + 1]].copy() for i in range(len(sizes))]


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects B x K logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    _check_finite("cross_entropy", logits)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((logsum - z[rows, labels]).sum() / n)

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _make("cross_entropy", loss, (logits,), backward)


# --------------------------------------------------------------------------
# initialisation and optimisation


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def sgd_nesterov_step(params, lr: float, momentum: float = 0.9,
                      weight_decay: float = 0.0) -> None:
    """One Nesterov SGD update; clears the gradients afterwards."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise MissingGradError(f"parameter {p.name!r} has no gradient")
    for p in params:
        g = p.grad + weight_decay * p.data
        p.velocity = momentum * p.velocity + g
        p.data = p.data - lr * (g + momentum * p.velocity)
        p.grad = None
