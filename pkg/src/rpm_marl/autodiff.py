"""A small reverse-mode autodiff engine over numpy arrays.

Only what the actor/critic MLPs and the PPO losses need. Every op returns a new
:class:`Tensor` that remembers its parents and a closure mapping the output
gradient to parent gradients; :meth:`Tensor.backward` walks the graph in
reverse topological order. Gradients are stored only on leaves created with
``requires_grad=True``.

Tensors keep the dtype of their data, so the same graph code runs in float32
for training and in float64 ("shadow" mode) for finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonScalarLoss, ShapeMismatch

LOG_EPS = 1e-12


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        dtype=None,
    ) -> None:
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise NonScalarLoss(f"backward() needs a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if any(_needs_grad(p) for p in parents):
        return Tensor(data, parents=parents, backward=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    """Natural log with an epsilon floor on the input."""
    safe = np.maximum(a.data, LOG_EPS)
    return _make(np.log(safe), (a,), lambda g: (np.where(a.data > LOG_EPS, g / safe, 0.0),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient is zero wherever the clip is active."""
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    pick_a = a.data <= b.data
    return _make(
        np.minimum(a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


# ------------------------------------------------------------------ linear alg
def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# ------------------------------------------------------------------ reductions
def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, a.shape) / count).astype(a.dtype),)

    return _make(np.asarray(out), (a,), backward)


# ------------------------------------------------------------------ structure
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward)


def gather(a: Tensor, index: np.ndarray, axis: int = -1) -> Tensor:
    """Pick one entry along ``axis`` per position (numpy take_along_axis)."""
    idx = np.expand_dims(np.asarray(index, dtype=np.int64), axis)
    if idx.ndim != a.data.ndim:
        raise ShapeMismatch(f"gather index shape {np.shape(index)} does not fit {a.shape}")
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(ts), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def index_select(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.asarray(out), (a,), backward)


# ------------------------------------------------------------------ parameters
@dataclass(frozen=True)
class ParamEntry:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParamVector:
    """A flat parameter buffer plus the layout of the named arrays inside it.

    ``views()`` hands out numpy views, so in-place optimizer updates on
    ``flat`` are immediately visible to the network. ``freeze()`` returns an
    independent read-only copy suitable for sharing across threads.
    """

    _next_tag = 0

    def __init__(self, flat: np.ndarray, layout: Sequence[ParamEntry], tag: int | None = None):
        flat = np.ascontiguousarray(flat)
        if flat.ndim != 1:
            raise ShapeMismatch("ParamVector payload must be one-dimensional")
        expected = 0
        for entry in layout:
            if entry.offset != expected:
                raise ShapeMismatch(f"layout gap or overlap at {entry.name}")
            expected += entry.size
        if expected != flat.size:
            raise ShapeMismatch(f"layout covers {expected} values, payload has {flat.size}")
        self.flat = flat
        self.layout = tuple(layout)
        if tag is None:
            ParamVector._next_tag += 1
            tag = ParamVector._next_tag
        self.tag = tag

    @classmethod
    def from_arrays(cls, named: Sequence[tuple[str, np.ndarray]], dtype=np.float32) -> "ParamVector":
        layout, offset = [], 0
        for name, arr in named:
            entry = ParamEntry(name, tuple(np.shape(arr)), offset)
            layout.append(entry)
            offset += entry.size
        flat = np.concatenate([np.asarray(a, dtype=dtype).ravel() for _, a in named]) if named else np.zeros(0, dtype)
        return cls(flat.astype(dtype, copy=False), layout)

    def views(self) -> dict[str, np.ndarray]:
        return {
            e.name: self.flat[e.offset : e.offset + e.size].reshape(e.shape) for e in self.layout
        }

    def unflatten(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.views().items()}

    def flatten_from(self, arrays: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(arrays[e.name], dtype=self.flat.dtype).ravel() for e in self.layout])

    def copy(self) -> "ParamVector":
        return ParamVector(self.flat.copy(), self.layout)

    def freeze(self) -> "ParamVector":
        frozen = ParamVector(self.flat.copy(), self.layout)
        frozen.flat.setflags(write=False)
        return frozen

    @property
    def frozen(self) -> bool:
        return not self.flat.flags.writeable

    def astype(self, dtype) -> "ParamVector":
        return ParamVector(self.flat.astype(dtype), self.layout)

    def assign(self, other: "ParamVector") -> None:
        if other.layout != self.layout:
            raise ShapeMismatch("cannot assign parameters with a different layout")
        self.flat[...] = other.flat

    def __len__(self) -> int:
        return self.flat.size


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ParamVector) -> "AdamState":
        return cls(np.zeros_like(params.flat, dtype=np.float64), np.zeros_like(params.flat, dtype=np.float64))


def clip_grad_norm(grads: np.ndarray, max_norm: float | None) -> tuple[np.ndarray, float]:
    """Scale ``grads`` so the global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(np.sum(np.square(grads, dtype=np.float64))))
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        grads = grads * (max_norm / norm)
    return grads, norm


def adam_step(
    params: ParamVector,
    grads: np.ndarray,
    state: AdamState,
    lr: float = 1e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    max_grad_norm: float | None = 10.0,
) -> float:
    """Clip, then apply one bias-corrected Adam update to ``params`` in place.

    Returns the gradient norm measured before clipping.
    """
    g, norm = clip_grad_norm(np.asarray(grads, dtype=np.float64), max_grad_norm)
    if weight_decay:
        g = g + weight_decay * params.flat
    b1, b2 = betas
    state.t += 1
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    state.v += (1.0 - b2) * g * g
    m_hat = state.m / (1.0 - b1**state.t)
    v_hat = state.v / (1.0 - b2**state.t)
    params.flat -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(params.flat.dtype)
    return norm
