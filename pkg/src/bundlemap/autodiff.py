"""Small reverse-mode autodiff over float64 numpy arrays.

Operations record themselves on the active :class:`Tape` (if any) when at
least one input requires a gradient. Outside a tape everything runs as
plain numpy, which is what inference uses.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        if self.value.ndim > 3:
            raise ValueError(f"rank {self.value.ndim} tensors are not supported")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.value.reshape(()))

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _tape_stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape.records.append(_Record(out, tuple(inputs), vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _result(
        a.value + b.value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _result(
        a.value - b.value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return _result(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape))
    )


def scale(x, s: float) -> Tensor:
    x = _as_tensor(x)
    s = float(s)
    return _result(x.value * s, (x,), lambda g: (g * s,))


def matmul(a, b) -> Tensor:
    """Matrix product on the last two axes; a leading batch axis broadcasts."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(av @ bv, (a, b), vjp)


def affine(x, W, bias) -> Tensor:
    """``x @ W + bias`` over the last axis of ``x``."""
    x, W, bias = _as_tensor(x), _as_tensor(W), _as_tensor(bias)
    if W.value.ndim != 2 or x.shape[-1] != W.shape[0] or bias.shape[-1] != W.shape[1]:
        raise ValueError(f"affine: shapes x{x.shape} W{W.shape} b{bias.shape}")
    xv, Wv = x.value, W.value

    def vjp(g):
        gx = g @ Wv.T
        gW = xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gW, _unbroadcast(g, bias.shape)

    return _result(xv @ Wv + bias.value, (x, W, bias), vjp)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.value)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    e = np.exp(x.value - np.max(x.value, axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result(y, (x,), vjp)


def mean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        n = x.value.size
        return _result(np.mean(x.value), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))
    n = x.shape[axis]
    if n == 0:
        raise ValueError("mean over an empty axis")

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _result(np.mean(x.value, axis=axis), (x,), vjp)


def sum_(x) -> Tensor:
    x = _as_tensor(x)
    return _result(np.sum(x.value), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([x.value for x in xs], axis=axis), xs, vjp)


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Project onto the unit sphere along ``axis``."""
    x = _as_tensor(x)
    norm = np.linalg.norm(x.value, axis=axis, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("l2_normalize of a zero vector")
    y = x.value / norm

    def vjp(g):
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / norm,)

    return _result(y, (x,), vjp)


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = _as_tensor(x)
    return _result(np.swapaxes(x.value, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    return _result(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def take(x, index, axis: int) -> Tensor:
    """Select ``index`` (int, slice or integer array) along ``axis``."""
    x = _as_tensor(x)
    sl = [slice(None)] * x.value.ndim
    sl[axis] = index
    sl = tuple(sl)

    def vjp(g):
        out = np.zeros_like(x.value)
        np.add.at(out, sl, g)  # repeated indices accumulate
        return (out,)

    return _result(x.value[sl], (x,), vjp)


def mse(pred, target, weight=None) -> Tensor:
    """Mean squared error; with ``weight``, a weighted mean (padding masks)."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse: shapes {pred.shape} and {target.shape}")
    d = pred.value - target.value
    if weight is None:
        w = None
        denom = d.size
        val = np.sum(d * d) / denom
    else:
        w = np.broadcast_to(np.asarray(weight, dtype=np.float64), d.shape)
        denom = float(w.sum())
        val = np.sum(w * d * d) / denom

    def vjp(g):
        gd = 2.0 * g * d / denom if w is None else 2.0 * g * w * d / denom
        return gd, -gd

    return _result(np.asarray(val), (pred, target), vjp)


# --------------------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.value.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    produced = {id(rec.out): k for k, rec in enumerate(tape.records)}
    if id(loss) not in produced:
        raise ValueError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records[: produced[id(loss)] + 1]):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


class ParamSet:
    """Named trainable tensors, kept in insertion order."""

    def __init__(self, tensors: dict[str, np.ndarray] | None = None):
        self._t: dict[str, Tensor] = {}
        for k, v in (tensors or {}).items():
            self.add(k, v)

    def add(self, name: str, value) -> Tensor:
        if name in self._t:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        if not np.all(np.isfinite(t.value)):
            raise ValueError(f"parameter {name!r} holds non-finite values")
        self._t[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __iter__(self):
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def items(self):
        return self._t.items()

    def names(self) -> list[str]:
        return list(self._t)

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.value for k, t in self._t.items()}

    def copy(self) -> "ParamSet":
        return ParamSet({k: t.value.copy() for k, t in self._t.items()})

    def size(self) -> int:
        return sum(t.value.size for t in self._t.values())


# --------------------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    failures: list[tuple[str, tuple[int, ...], float, float]]  # name, index, analytic, numeric

    @property
    def ok(self) -> bool:
        return not self.failures


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(
    fn: Callable[[], Tensor],
    params: ParamSet | Iterable[Tensor],
    eps: float = 1e-5,
    tolerance: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn()`` with central differences.

    ``fn`` must rebuild its graph from the current parameter values on
    every call. With ``max_coords`` set, that many coordinates are drawn at
    random across all tensors instead of checking every one.
    """
    tensors = list(params._t.values()) if isinstance(params, ParamSet) else list(params)
    if not tensors:
        return GradCheckReport(0.0, 0, [])
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = fn()
    backward(tape, loss)
    analytic = [np.zeros_like(t.value) if t.grad is None else t.grad.copy() for t in tensors]

    coords = [(ti, idx) for ti, t in enumerate(tensors) for idx in np.ndindex(t.shape)]
    if max_coords is not None and max_coords < len(coords):
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[k] for k in pick]

    worst, failures = 0.0, []
    for ti, idx in coords:
        t = tensors[ti]
        orig = t.value[idx]
        t.value[idx] = orig + eps
        up = fn().item()
        t.value[idx] = orig - eps
        down = fn().item()
        t.value[idx] = orig
        numeric = (up - down) / (2 * eps)
        a = float(analytic[ti][idx])
        err = relative_error(a, numeric, floor)
        worst = max(worst, err)
        if err > tolerance:
            failures.append((t.name or str(ti), tuple(int(i) for i in idx), a, numeric))
    for t in tensors:
        t.grad = None
    return GradCheckReport(worst, len(coords), failures)


# --------------------------------------------------------------------------- op backends


class _Recorded:
    """Tape-recording primitives; parameters come back as Tensors."""

    affine = staticmethod(affine)
    add = staticmethod(add)
    mul = staticmethod(mul)
    matmul = staticmethod(matmul)
    tanh = staticmethod(tanh)
    softmax = staticmethod(softmax)
    mean = staticmethod(mean)
    concat = staticmethod(concat)
    l2_normalize = staticmethod(l2_normalize)
    scale = staticmethod(scale)
    transpose = staticmethod(transpose)
    reshape = staticmethod(reshape)
    take = staticmethod(take)

    @staticmethod
    def param(params: ParamSet, name: str):
        return params[name]

    @staticmethod
    def value(x):
        return x.value if isinstance(x, Tensor) else np.asarray(x)


class _Raw:
    """Plain numpy twins of the primitives, same arithmetic, nothing recorded."""

    @staticmethod
    def affine(x, W, b):
        return x @ W + b

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def mul(a, b):
        return a * b

    @staticmethod
    def matmul(a, b):
        return a @ b

    tanh = staticmethod(np.tanh)

    @staticmethod
    def softmax(x, axis=-1):
        e = np.exp(x - np.max(x, axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)

    @staticmethod
    def mean(x, axis=None):
        return np.mean(x, axis=axis)

    @staticmethod
    def concat(xs, axis=-1):
        return np.concatenate(xs, axis=axis)

    @staticmethod
    def l2_normalize(x, axis=-1):
        norm = np.linalg.norm(x, axis=axis, keepdims=True)
        if np.any(norm == 0.0):
            raise ValueError("l2_normalize of a zero vector")
        return x / norm

    @staticmethod
    def scale(x, s):
        return x * float(s)

    @staticmethod
    def transpose(x):
        return np.swapaxes(x, -1, -2)

    @staticmethod
    def reshape(x, shape):
        return x.reshape(shape)

    @staticmethod
    def take(x, index, axis):
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        return x[tuple(sl)]

    @staticmethod
    def param(params: ParamSet, name: str):
        return params[name].value

    @staticmethod
    def value(x):
        return x


recorded = _Recorded()
raw = _Raw()
