"""Minimal dense-tensor kernel with tape-based reverse-mode gradients.

Only the operations the MatNet encoder/decoder and the REINFORCE loss need are
provided. Tensors wrap float64 numpy arrays. Operations are recorded on the
innermost active :class:`Tape` whenever one of their inputs requires a
gradient; outside a tape (inference) nothing is recorded.

    with Tape() as tape:
        loss = ...
    grads = backward(tape, loss, params)
"""
from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float32 if os.environ.get("MATNET_FLOAT32") == "1" else np.float64
DEBUG = os.environ.get("MATNET_DEBUG") == "1"

_state = threading.local()


class Tensor:
    """An immutable n-d array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of operations executed while the tape is active."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_record:
    """Context manager that suspends recording (e.g. for evaluation inside training)."""

    def __enter__(self):
        self._saved = list(_tape_stack())
        _tape_stack().clear()

    def __exit__(self, *exc):
        _tape_stack().extend(self._saved)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    if DEBUG and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op} produced non-finite values")
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    res = Tensor(out, requires_grad=track)
    if track:
        tape.nodes.append((res, tuple(inputs), fn))
    return res


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _record("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise FloatingPointError("log: non-positive input")
    return _record("log", np.log(x), (a,), lambda g: (g / x,))


def soft_clip(a: Tensor, bound: float) -> Tensor:
    """bound * tanh(x / bound)."""
    return scale(tanh(scale(a, 1.0 / bound)), bound)


# --------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}") from None
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer perceptron with a ReLU hidden layer and linear output."""
    return linear(relu(linear(x, w1, b1)), w2, b2)


# ------------------------------------------------------------------ structural

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ValueError(f"concat: shape mismatch {shapes}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Batched row gather: x (..., n, d), idx (..., k) -> (..., k, d).

    The batch dimensions of ``idx`` must equal those of ``x``.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if x.shape[:-2] != idx.shape[:-1]:
        raise ValueError(f"take_rows: shape mismatch {x.shape} vs {idx.shape}")
    out = np.take_along_axis(x.data, idx[..., None], axis=-2)
    xshape = x.shape

    def fn(g):
        n, d = xshape[-2:]
        nb = int(np.prod(xshape[:-2], dtype=np.int64))
        flat_idx = idx.reshape(nb, -1) + (np.arange(nb) * n)[:, None]
        gx = np.zeros((nb * n, d), dtype=g.dtype)
        np.add.at(gx, flat_idx.ravel(), g.reshape(-1, d))
        return (gx.reshape(xshape),)

    return _record("take_rows", out, (x,), fn)


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Embedding lookup: table (n, d), idx of any shape -> idx.shape + (d,)."""
    idx = np.asarray(idx, dtype=np.int64)
    tshape = table.shape

    def fn(g):
        gt = np.zeros(tshape, dtype=g.dtype)
        np.add.at(gt, idx.ravel(), g.reshape(-1, tshape[-1]))
        return (gt,)

    return _record("gather_rows", table.data[idx], (table,), fn)


def pick(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select one entry per row along the last axis: x (..., n), idx (...) -> (...)."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.shape[:-1] != idx.shape:
        raise ValueError(f"pick: shape mismatch {x.shape} vs {idx.shape}")
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]
    xshape = x.shape

    def fn(g):
        gx = np.zeros(xshape, dtype=g.dtype)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _record("pick", out, (x,), fn)


# ------------------------------------------------------------------ reductions

def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / max(a.data.size, 1))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    shape = a.shape
    return _record("sum_axis", a.data.sum(axis=axis), (a,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape),))


# ------------------------------------------------------------- normalizations

def masked_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` holds 0 or -inf and broadcasts against x."""
    z = x.data if mask is None else x.data + mask
    zmax = z.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(zmax)):
        raise ValueError("masked_softmax: a row has every entry masked")
    e = np.exp(z - zmax)
    p = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("masked_softmax", p, (x,), fn)


INSTANCE_NORM_EPS = 1e-5


def instance_normalize(x: Tensor, axis: int = -2, eps: float = INSTANCE_NORM_EPS) -> Tensor:
    """Zero-mean unit-variance normalization along ``axis`` (the node axis).

    The variance is floored at ``eps``: a constant input maps to zeros and any
    input with variance above the floor comes out with variance exactly 1.
    """
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    floored = var < eps
    std = np.sqrt(np.where(floored, eps, var))
    xhat = xc / std

    def fn(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxh = (g * xhat).mean(axis=axis, keepdims=True)
        return ((g - gm - np.where(floored, 0.0, xhat * gxh)) / std,)

    return _record("instance_normalize", xhat, (x,), fn)


# -------------------------------------------------------------------- backward

def backward(tape: Tape, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Reverse sweep over ``tape`` from scalar ``loss``.

    Returns a gradient for every entry of ``params``; parameters the loss does
    not reach get zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return {name: grads.get(id(p), np.zeros_like(p.data)) for name, p in params.items()}


def merge_grads(maps: Iterable[Mapping[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Sum gradient maps in sorted parameter-name order."""
    maps = list(maps)
    names = sorted(set().union(*[m.keys() for m in maps])) if maps else []
    out = {}
    for name in names:
        acc = None
        for m in maps:
            if name in m:
                acc = m[name].copy() if acc is None else acc + m[name]
        out[name] = acc
    return out


# ------------------------------------------------------------------------ Adam

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
    """One bias-corrected Adam update; parameters get fresh data arrays."""
    for name in params:
        if name not in grads:
            raise KeyError(f"adam_step: missing gradient for parameter {name!r}")
        if not np.all(np.isfinite(grads[name])):
            raise FloatingPointError(f"adam_step: non-finite gradient for {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
