"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive computes its forward value with numpy and, when a tape is
active and at least one input requires a gradient, appends a record holding
a closure that maps the output gradient back onto the inputs.  A tape is
meant to live for one training step::

    with Tape() as tape:
        loss = model.loss(batch)
    tape.backward(loss)

Outside of an active tape nothing is recorded, which is how evaluation runs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; every one of these goes through a primitive
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def as_tensor(x) -> Tensor:
    return _lift(x)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable  # (out_grad, accumulate) -> None


@dataclass
class Tape:
    """Ordered list of primitive applications that need gradients."""

    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, bwd) -> Tensor:
    tape = _TAPES[-1] if _TAPES else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.records.append(Record(op, inputs, out, bwd))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every grad-requiring tensor.

    Gradients are added to whatever is already stored, so calling twice
    without zeroing doubles them.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.records:
        raise ValueError("backward called on an empty tape")
    end = None
    for i in range(len(tape.records) - 1, -1, -1):
        if tape.records[i].output is loss:
            end = i
            break
    if end is None:
        raise ValueError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}

    def accumulate(t: Tensor, g: np.ndarray, index=None) -> None:
        if not t.requires_grad:
            return
        key = id(t)
        buf = grads.get(key)
        if index is None:
            if buf is None:
                grads[key] = np.array(g, dtype=DTYPE, copy=True).reshape(t.shape)
                seen[key] = t
            else:
                buf += g
        else:
            if buf is None:
                buf = grads[key] = np.zeros(t.shape, dtype=DTYPE)
                seen[key] = t
            buf[index] += g

    for rec in reversed(tape.records[: end + 1]):
        g = grads.get(id(rec.output))
        if g is None:
            continue
        rec.backward(g, accumulate)

    for key, t in seen.items():
        g = grads[key]
        if t.grad is None:
            t.grad = g
        else:
            t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    _broadcast_shape("add", a, b)

    def bwd(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(g, b.shape))

    return _emit("add", (a, b), a.data + b.data, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)

    def bwd(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(-g, b.shape))

    return _emit("sub", (a, b), a.data - b.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    _broadcast_shape("mul", a, b)

    def bwd(g, acc):
        if a.requires_grad:
            acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            acc(b, _unbroadcast(g * a.data, b.shape))

    return _emit("mul", (a, b), a.data * b.data, bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g, acc: acc(a, g * c))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes broadcast like ``numpy.matmul``.

    A 1-d left operand is a row vector; the right operand must be at least
    2-d.  The contracted axes must agree.
    """
    if a.ndim == 1 and b.ndim >= 2 and a.shape[0] == b.shape[-2]:
        row = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(row, row.shape[:-2] + row.shape[-1:])
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform") from None

    def bwd(g, acc):
        if a.requires_grad:
            acc(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight: fold the batch axes into one product
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            acc(b, gb)

    return _emit("matmul", (a, b), out, bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", (a,), out, lambda g, acc: acc(a, g * out * (1.0 - out)))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g, acc: acc(a, g * (1.0 - out * out)))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g, acc: acc(a, g * out))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _emit("log", (a,), np.log(x), lambda g, acc: acc(a, g / x))


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` (max-subtracted)."""
    _check_axis("softmax", a, axis)
    out = _softmax(a.data, axis)

    def bwd(g, acc):
        acc(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _emit("softmax", (a,), out, bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis("log_softmax", a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bwd(g, acc):
        acc(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _emit("log_softmax", (a,), out, bwd)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join tensors along an existing axis; other extents must agree."""
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    nd = tensors[0].ndim
    ax = axis % nd if nd else 0
    for t in tensors[1:]:
        if t.ndim != nd or any(
            i != ax and s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape))
        ):
            raise ShapeError(
                f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}"
            )
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bwd(g, acc):
        idx = [slice(None)] * nd
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx[ax] = slice(int(lo), int(hi))
                acc(t, g[tuple(idx)])

    return _emit("concat", tensors, out, bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join equally shaped tensors along a new axis."""
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("stack: no inputs")
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError(f"stack: shapes {tensors[0].shape} and {t.shape} differ")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def bwd(g, acc):
        for k, t in enumerate(tensors):
            if t.requires_grad:
                acc(t, np.take(g, k, axis=ax))

    return _emit("stack", tensors, out, bwd)


def slice_(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing: ints, slices, Ellipsis, None."""
    if not isinstance(index, tuple):
        index = (index,)
    for part in index:
        if not (isinstance(part, (int, slice, np.integer)) or part is Ellipsis):
            raise ShapeError(f"slice: unsupported index {part!r} for shape {a.shape}")
    try:
        out = a.data[index]
    except IndexError as err:
        raise ShapeError(f"slice: index {index!r} out of range for shape {a.shape}") from err
    return _emit("slice", (a,), out, lambda g, acc: acc(a, g, index))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort([ax % a.ndim for ax in axes]))
    out = np.transpose(a.data, axes)
    return _emit("transpose", (a,), out, lambda g, acc: acc(a, np.transpose(g, inv)))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {tuple(shape)}") from None
    return _emit("reshape", (a,), out, lambda g, acc: acc(a, g.reshape(a.shape)))


def take(table: Tensor, indices) -> Tensor:
    """Gather rows of ``table`` (embedding lookup); output shape is
    ``indices.shape + table.shape[1:]``."""
    idx = np.asarray(indices, dtype=np.intp)
    if table.ndim < 1:
        raise ShapeError("take: table must be at least 1-d")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"take: indices out of range for table of shape {table.shape}")
    out = table.data[idx]

    def bwd(g, acc):
        if not table.requires_grad:
            return
        buf = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(buf, idx.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        acc(table, buf)

    return _emit("take", (table,), out, bwd)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g, acc):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        acc(a, np.broadcast_to(g, a.shape))

    return _emit("sum", (a,), out, bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size // max(out.size, 1)

    def bwd(g, acc):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        acc(a, np.broadcast_to(g / n, a.shape))

    return _emit("mean", (a,), out, bwd)


def _check_axis(op: str, a: Tensor, axis: int) -> None:
    if not -a.ndim <= axis < max(a.ndim, 1):
        raise ShapeError(f"{op}: axis {axis} invalid for shape {a.shape}")


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "concat": concat,
    "stack": stack,
    "slice": slice_,
    "transpose": transpose,
    "reshape": reshape,
    "take": take,
    "sum": sum_,
    "mean": mean,
}


def apply_primitive(op: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    per_input: list[float]
    nonfinite: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps elements whose true gradient is zero from dividing noise by
    noise.  Inputs are perturbed in place and restored.
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    with Tape() as tape:
        out = f(*inputs)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    tape.backward(out)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    per_input = []
    nonfinite = []
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        num = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(*inputs).item()
            flat[i] = orig - step
            lo = f(*inputs).item()
            flat[i] = orig
            num[i] = (hi - lo) / (2.0 * step)
        a = analytic[k].reshape(-1)
        bad = ~(np.isfinite(a) & np.isfinite(num))
        for i in np.flatnonzero(bad):
            nonfinite.append((k, tuple(int(v) for v in np.unravel_index(i, t.shape))))
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        err = np.where(bad, np.inf, np.abs(a - num) / denom)
        per_input.append(float(err.max()) if err.size else 0.0)
    worst = max(per_input) if per_input else 0.0
    return GradCheckReport(worst, tol, bool(worst <= tol and not nonfinite), per_input, nonfinite)


def seeded_uniform(rng: np.random.Generator, shape, bound: float, name=None) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def inv_sqrt(n: int) -> float:
    return 1.0 / math.sqrt(n)
