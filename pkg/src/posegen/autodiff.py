"""A small reverse-mode automatic differentiation engine on top of numpy.

Operations executed while a :class:`Tape` is active are recorded in order;
:func:`backward` walks the record in reverse and accumulates vector-Jacobian
products into the ``grad`` of every leaf tensor that requires gradients.

There is deliberately no implicit broadcasting: elementwise operators need
identical shapes (or a Python scalar constant), and anything else goes
through :func:`broadcast`.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

_ACTIVE: list["Tape"] = []


class Tensor:
    """Dense array with an optional gradient slot."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, value, requires_grad: bool = False, dtype=None):
        arr = np.asarray(value, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.value: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._leaf = True

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: mul(self, -1.0)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes may nest, the innermost one records.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value: np.ndarray, inputs: tuple, backward) -> Tensor:
    out = Tensor(value)
    if _ACTIVE and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        _ACTIVE[-1].records.append(_Record(out, inputs, backward))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _binary_operands(op, a, b):
    """Return (a, b) as tensors; a Python scalar stays a scalar constant."""
    if np.isscalar(a):
        b = _as_tensor(b)
        return np.asarray(a, dtype=b.dtype), b
    if np.isscalar(b):
        a = _as_tensor(a)
        return a, np.asarray(b, dtype=a.dtype)
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(op, a, b)
    return a, b


def _val(x):
    return x.value if isinstance(x, Tensor) else x


def _grad_for(g: np.ndarray, operand) -> Optional[np.ndarray]:
    if not isinstance(operand, Tensor):
        return None
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _binary_operands("add", a, b)
    return _result(_val(a) + _val(b), (a, b),
                   lambda g: (_grad_for(g, a), _grad_for(g, b)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands("sub", a, b)
    return _result(_val(a) - _val(b), (a, b),
                   lambda g: (_grad_for(g, a), _grad_for(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands("mul", a, b)
    av, bv = _val(a), _val(b)
    return _result(av * bv, (a, b),
                   lambda g: (_grad_for(g * bv, a), _grad_for(g * av, b)))


def div(a, b) -> Tensor:
    a, b = _binary_operands("div", a, b)
    av, bv = _val(a), _val(b)
    out = av / bv
    return _result(out, (a, b),
                   lambda g: (_grad_for(g / bv, a), _grad_for(-g * out / bv, b)))


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _result(np.where(mask, x.value, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    v = x.value
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def square(x: Tensor) -> Tensor:
    v = x.value
    return _result(v * v, (x,), lambda g: (2.0 * g * v,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.value)
    return _result(out, (x,), lambda g: (g / (2.0 * out),))


# ---------------------------------------------------------------------------
# reductions and normalizations


def _axis(x: Tensor, axis: int) -> int:
    if not -x.value.ndim <= axis < x.value.ndim:
        raise ValueError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.value.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _axis(x, axis)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (x,), back)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
        out = np.asarray(x.value.mean(), dtype=x.dtype)
        return _result(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))
    axis = _axis(x, axis)
    n = x.shape[axis]
    out = x.value.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _result(out, (x,), back)


def sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    if axis is None:
        out = np.asarray(x.value.sum(), dtype=x.dtype)
        return _result(out, (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))
    axis = _axis(x, axis)
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _result(out, (x,), back)


def l2_norm_rows(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis. The gradient at a zero row is 0."""
    n = np.sqrt(np.sum(x.value * x.value, axis=-1))

    def back(g):
        safe = np.where(n > 0, n, 1.0)
        return ((g / safe)[..., None] * x.value * (n > 0)[..., None],)

    return _result(n, (x,), back)


def min_rows(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Minimum over the last axis and its argmin (lowest index on ties).

    The subgradient flows only to the argmin entry of each row.
    """
    idx = np.argmin(x.value, axis=-1)
    out = np.take_along_axis(x.value, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros_like(x.value)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _result(out, (x,), back), idx


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Either both operands share identical leading (batch) dimensions, or one
    of them is a plain 2-D matrix applied to every batch entry.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if av.ndim > 2 and bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        raise ValueError(f"matmul: batch shape mismatch {a.shape} vs {b.shape}")
    out = av @ bv

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bv, -1, -2)
            if av.ndim == 2 and ga.ndim > 2:
                ga = ga.reshape(-1, *av.shape).sum(axis=0)
        if b.requires_grad:
            if bv.ndim == 2 and av.ndim > 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(av, -1, -2) @ g
                if bv.ndim == 2 and gb.ndim > 2:
                    gb = gb.reshape(-1, *bv.shape).sum(axis=0)
        return ga, gb

    return _result(out, (a, b), back)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _result(np.swapaxes(x.value, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    axis = _axis(xs[0], axis)
    for t in xs[1:]:
        if t.value.ndim != xs[0].value.ndim or any(
                s != r for k, (s, r) in enumerate(zip(t.shape, xs[0].shape)) if k != axis):
            raise ValueError(f"concat: shape mismatch {xs[0].shape} vs {t.shape} on axis {axis}")
    out = np.concatenate([t.value for t in xs], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _result(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


def gather_rows(x: Tensor, idx, axis: int = 0) -> Tensor:
    """Select entries along ``axis`` (rows by default); repeats allowed."""
    axis = _axis(x, axis)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.take(x.value, idx, axis=axis)

    def back(g):
        gx = np.zeros_like(x.value)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _result(out, (x,), back)


def broadcast(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast to ``shape``; backward sums the copies."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.value, shape)
    except ValueError as exc:
        raise ValueError(f"broadcast: cannot broadcast {x.shape} to {shape}") from exc
    lead = len(shape) - x.value.ndim
    expanded = tuple(k for k in range(len(shape)) if k >= lead and x.shape[k - lead] == 1
                     and shape[k] != 1)

    def back(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if expanded:
            g = g.sum(axis=tuple(k - lead for k in expanded), keepdims=True)
        return (g,)

    return _result(out, (x,), back)


# ---------------------------------------------------------------------------
# differentiation


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for recorded leaves."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.value)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            if inp._leaf:
                gi = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
    if loss._leaf and loss.requires_grad:
        loss.grad = np.ones_like(loss.value) if loss.grad is None else loss.grad + 1


# ---------------------------------------------------------------------------
# optimization


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8,
              state: Optional[AdamState] = None) -> AdamState:
    """One bias-corrected Adam update, in place. Returns the advanced state."""
    if state is None:
        state = AdamState()
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise RuntimeError(f"adam_step: parameters {missing} have no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


# ---------------------------------------------------------------------------
# checkpoints
#
# Text format, one tensor per two lines:
#
#     tensor <name> <dtype> <d0>,<d1>,...
#     <v0> <v1> ... (17 significant digits, row-major)
#
# preceded by a "# posegen-checkpoint 1" line. Scalars use an empty shape.

_MAGIC = "# posegen-checkpoint 1"


def save_checkpoint(path: str | os.PathLike, tensors: dict) -> None:
    lines = [_MAGIC]
    for name, arr in tensors.items():
        arr = np.asarray(arr.value if isinstance(arr, Tensor) else arr)
        if any(c.isspace() for c in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {arr.dtype.name} {shape}")
        lines.append(" ".join(format(float(v), ".17g") for v in arr.ravel()))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0] != _MAGIC:
        raise ValueError(f"{path}: not a posegen checkpoint")
    out = {}
    i = 1
    while i < len(lines) and lines[i]:
        head = lines[i].split(" ")
        if head[0] != "tensor" or len(head) not in (3, 4):
            raise ValueError(f"{path}:{i + 1}: malformed tensor header")
        name, dtype = head[1], head[2]
        shape = tuple(int(d) for d in head[3].split(",")) if len(head) == 4 and head[3] else ()
        body = lines[i + 1].split() if i + 1 < len(lines) else []
        values = np.array([float(v) for v in body], dtype=np.float64)
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise ValueError(f"{path}: tensor {name!r} has {values.size} values for shape {shape}")
        out[name] = values.astype(dtype).reshape(shape)
        i += 2
    return out
