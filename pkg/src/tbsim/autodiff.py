"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy buffers. Operations executed while a Tape is
active append one node each, in execution order, so the tape itself is a
valid topological order and backward() is a single reverse sweep that visits
every node at most once. Gradients accumulate by summation, which makes
shared subexpressions come out right.

Shape discipline is deliberately strict: binary elementwise ops require equal
shapes or a scalar operand; anything else goes through the explicit
``expand`` op (leading-batch expansion). This keeps every gradient rule
auditable against finite differences.

Precision: float32 by default; tests switch to float64 via
``set_default_dtype`` for finite-difference checks.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if np.dtype(dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError("default dtype must be float32 or float64")
    _DEFAULT_DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class TapeNode:
    """One recorded operation: output, parents, and the local backward rule."""

    __slots__ = ("out", "parents", "backward_fn", "name")

    def __init__(self, out: "Tensor", parents: Sequence["Tensor"], backward_fn: Callable, name: str):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name


class Tape:
    """Ordered record of operations for one execution context."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def append(self, node: TapeNode) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE_TAPE: Tape | None = None
_GRAD_ENABLED: bool = True


@contextlib.contextmanager
def tape_context(tape: Tape):
    """Make `tape` the active recording target within the block."""
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = tape
    try:
        yield tape
    finally:
        _ACTIVE_TAPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED and _ACTIVE_TAPE is not None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_index")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_index: int | None = None  # position on the active tape, if recorded

    # -- inspection ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def _tracked(self) -> bool:
        return self.requires_grad or self.node_index is not None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse sweep from this (scalar) tensor over the active tape."""
        backward(self)

    # -- operator sugar ---------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *perm):
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return transpose(self, perm)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _record(out: Tensor, parents: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    """Put `out` on the active tape if recording is on and any parent is tracked."""
    if _GRAD_ENABLED and _ACTIVE_TAPE is not None and any(p._tracked() for p in parents):
        out.node_index = _ACTIVE_TAPE.append(TapeNode(out, tuple(parents), backward_fn, name))
    return out


def backward(loss: Tensor) -> None:
    if _ACTIVE_TAPE is None:
        raise RuntimeError("backward() requires an active tape (use tape_context)")
    if loss.data.size != 1:
        raise ValueError("backward() expects a scalar loss")
    tape = _ACTIVE_TAPE
    loss.grad = np.ones_like(loss.data)
    stop = loss.node_index if loss.node_index is not None else -1
    for i in range(stop, -1, -1):
        node = tape.nodes[i]
        g = node.out.grad
        if g is None:
            continue
        node.backward_fn(g)


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops
# ---------------------------------------------------------------------------


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape or a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (use expand for batching)")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape` (scalar operand case)."""
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape) if shape == () else np.sum(g, axis=0).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    out = Tensor(a.data + b.data)

    def back(g):
        if a._tracked():
            a.accumulate_grad(_reduce_to(g, a.shape))
        if b._tracked():
            b.accumulate_grad(_reduce_to(g, b.shape))

    return _record(out, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    out = Tensor(a.data - b.data)

    def back(g):
        if a._tracked():
            a.accumulate_grad(_reduce_to(g, a.shape))
        if b._tracked():
            b.accumulate_grad(_reduce_to(-g, b.shape))

    return _record(out, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    out = Tensor(a.data * b.data)

    def back(g):
        if a._tracked():
            a.accumulate_grad(_reduce_to(g * b.data, a.shape))
        if b._tracked():
            b.accumulate_grad(_reduce_to(g * a.data, b.shape))

    return _record(out, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    out = Tensor(a.data / b.data)

    def back(g):
        if a._tracked():
            a.accumulate_grad(_reduce_to(g / b.data, a.shape))
        if b._tracked():
            b.accumulate_grad(_reduce_to(-g * a.data / (b.data * b.data), b.shape))

    return _record(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)

    def back(g):
        if a._tracked():
            a.accumulate_grad(-g)

    return _record(out, (a,), back, "neg")


def _unary(a, fn, dfn, name) -> Tensor:
    a = as_tensor(a)
    out = Tensor(fn(a.data))

    def back(g):
        if a._tracked():
            a.accumulate_grad(g * dfn(a.data, out.data))

    return _record(out, (a,), back, name)


def relu(a) -> Tensor:
    return _unary(a, lambda x: np.maximum(x, 0), lambda x, y: (x > 0).astype(x.dtype), "relu")


def tanh(a) -> Tensor:
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y, "tanh")


def sigmoid(a) -> Tensor:
    return _unary(a, lambda x: 1.0 / (1.0 + np.exp(-x)), lambda x, y: y * (1.0 - y), "sigmoid")


def sin(a) -> Tensor:
    return _unary(a, np.sin, lambda x, y: np.cos(x), "sin")


def cos(a) -> Tensor:
    return _unary(a, np.cos, lambda x, y: -np.sin(x), "cos")


def exp(a) -> Tensor:
    return _unary(a, np.exp, lambda x, y: y, "exp")


def log(a) -> Tensor:
    return _unary(a, np.log, lambda x, y: 1.0 / x, "log")


def sqrt(a) -> Tensor:
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y, "sqrt")


def abs_(a) -> Tensor:
    return _unary(a, np.abs, lambda x, y: np.sign(x), "abs")


def square(a) -> Tensor:
    return _unary(a, np.square, lambda x, y: 2.0 * x, "square")


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient passes only through the interior."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))

    def back(g):
        if a._tracked():
            inside = np.ones_like(a.data)
            if lo is not None:
                inside = inside * (a.data > lo)
            if hi is not None:
                inside = inside * (a.data < hi)
            a.accumulate_grad(g * inside)

    return _record(out, (a,), back, "clamp")


def stop_gradient(a) -> Tensor:
    """Forward identity that contributes zero gradient to its input."""
    a = as_tensor(a)
    return Tensor(a.data.copy())


def wrap_angle_op(a) -> Tensor:
    """Wrap to (-pi, pi]; the wrap is a piecewise constant shift, gradient 1."""
    a = as_tensor(a)
    out = Tensor(np.pi - np.mod(np.pi - a.data, 2.0 * np.pi))

    def back(g):
        if a._tracked():
            a.accumulate_grad(g)

    return _record(out, (a,), back, "wrap_angle")


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product: (..., n, k) @ (..., k, m).

    Leading dims must match exactly, or one operand may be 2-D (shared across
    the other's batch).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dims differ, {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)

    def back(g):
        if a._tracked():
            ga = g @ np.swapaxes(b.data, -1, -2)
            if ga.ndim > a.ndim:
                ga = ga.sum(axis=tuple(range(ga.ndim - a.ndim)))
            a.accumulate_grad(ga)
        if b._tracked():
            gb = np.swapaxes(a.data, -1, -2) @ g
            if gb.ndim > b.ndim:
                gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
            b.accumulate_grad(gb)

    return _record(out, (a, b), back, "matmul")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    ax = axis if axis >= 0 else out.ndim + axis
    sizes = [t.shape[ax] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t._tracked():
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _record(out, tuple(ts), back, "concat")


def slice_(a, idx) -> Tensor:
    """Basic indexing (ints/slices/ellipsis); gradient scatters into zeros."""
    a = as_tensor(a)
    out = Tensor(a.data[idx].copy())

    def back(g):
        if a._tracked():
            buf = np.zeros_like(a.data)
            buf[idx] = g
            a.accumulate_grad(buf)

    return _record(out, (a,), back, "slice")


def index_select(a, indices, axis: int = 0) -> Tensor:
    """Gather rows along `axis`; gradient scatter-adds (handles repeats)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=int)
    out = Tensor(np.take(a.data, indices, axis=axis))

    def back(g):
        if a._tracked():
            buf = np.zeros_like(a.data)
            np.add.at(buf, (slice(None),) * axis + (indices,), g)
            a.accumulate_grad(buf)

    return _record(out, (a,), back, "index_select")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def back(g):
        if a._tracked():
            a.accumulate_grad(g.reshape(a.shape))

    return _record(out, (a,), back, "reshape")


def transpose(a, perm) -> Tensor:
    a = as_tensor(a)
    perm = tuple(perm)
    out = Tensor(np.transpose(a.data, perm))
    inv = np.argsort(perm)

    def back(g):
        if a._tracked():
            a.accumulate_grad(np.transpose(g, inv))

    return _record(out, (a,), back, "transpose")


def expand(a, batch_shape) -> Tensor:
    """Prepend `batch_shape` dims by repetition; gradient sums them away."""
    a = as_tensor(a)
    batch_shape = tuple(batch_shape)
    out = Tensor(np.broadcast_to(a.data, batch_shape + a.shape).copy())
    n_lead = len(batch_shape)

    def back(g):
        if a._tracked():
            a.accumulate_grad(g.sum(axis=tuple(range(n_lead))))

    return _record(out, (a,), back, "expand")


# ---------------------------------------------------------------------------
# reductions / normalization
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if a._tracked():
            if axis is None:
                a.accumulate_grad(np.broadcast_to(g, a.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a.accumulate_grad(np.broadcast_to(gg, a.shape).copy())

    return _record(out, (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.data.size if axis is None else a.shape[axis]

    def back(g):
        if a._tracked():
            if axis is None:
                a.accumulate_grad(np.broadcast_to(g / n, a.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a.accumulate_grad(np.broadcast_to(gg / n, a.shape).copy())

    return _record(out, (a,), back, "mean")


def max_(a, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; gradient routes to the first argmax per slice."""
    a = as_tensor(a)
    out_data = a.data.max(axis=axis, keepdims=keepdims)
    out = Tensor(out_data)
    amax = np.argmax(a.data, axis=axis)

    def back(g):
        if a._tracked():
            gg = g if keepdims else np.expand_dims(g, axis)
            buf = np.zeros_like(a.data)
            np.put_along_axis(buf, np.expand_dims(amax, axis), gg, axis=axis)
            a.accumulate_grad(buf)

    return _record(out, (a,), back, "max")


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Numerically stable log-sum-exp; gradient is the softmax."""
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    val = np.log(s) + m
    out = Tensor(val if keepdims else np.squeeze(val, axis=axis))
    soft = e / s

    def back(g):
        if a._tracked():
            gg = g if keepdims else np.expand_dims(g, axis)
            a.accumulate_grad(gg * soft)

    return _record(out, (a,), back, "logsumexp")


def take_along_last(a, indices) -> Tensor:
    """out[..., j] = a[..., j, indices[..., j]] — select one entry per row of
    the last axis; gradient scatters back."""
    a = as_tensor(a)
    idx = np.expand_dims(np.asarray(indices, dtype=int), -1)
    out = Tensor(np.take_along_axis(a.data, idx, axis=-1).squeeze(-1))

    def back(g):
        if a._tracked():
            buf = np.zeros_like(a.data)
            np.put_along_axis(buf, idx, np.expand_dims(g, -1), axis=-1)
            a.accumulate_grad(buf)

    return _record(out, (a,), back, "take_along_last")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def back(g):
        if a._tracked():
            dot = np.sum(g * y, axis=axis, keepdims=True)
            a.accumulate_grad(y * (g - dot))

    return _record(out, (a,), back, "softmax")


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv
    out = Tensor(y)
    d = a.shape[-1]

    def back(g):
        if a._tracked():
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            a.accumulate_grad(inv * (g - gm - y * gy))

    _ = d
    return _record(out, (a,), back, "layer_norm")


def dropout(a, p: float, train: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    a = as_tensor(a)
    if not train or p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    out = Tensor(a.data * keep)

    def back(g):
        if a._tracked():
            a.accumulate_grad(g * keep)

    return _record(out, (a,), back, "dropout")


def masked_fill(a, mask, value: float) -> Tensor:
    """Set entries where `mask` (bool array, broadcastable) is True to `value`."""
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = Tensor(np.where(mask, value, a.data))

    def back(g):
        if a._tracked():
            a.accumulate_grad(np.where(mask, 0.0, g))

    return _record(out, (a,), back, "masked_fill")


def where_mask(mask, a, b) -> Tensor:
    """Select a where mask else b; mask is a constant boolean array."""
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "where_mask")
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), np.broadcast_shapes(a.shape, b.shape))
    out = Tensor(np.where(mask, a.data, b.data))

    def back(g):
        if a._tracked():
            a.accumulate_grad(_reduce_to(np.where(mask, g, 0.0), a.shape))
        if b._tracked():
            b.accumulate_grad(_reduce_to(np.where(mask, 0.0, g), b.shape))

    return _record(out, (a, b), back, "where_mask")


def attention(q, k, v, key_mask=None, return_fallback: bool = False):
    """Scaled dot-product attention with key masking.

    q: [..., n_q, d], k/v: [..., n_k, d]. `key_mask` is a boolean array over
    keys, shape [..., n_k] or [..., n_q, n_k]; False keys are excluded. Query
    rows with zero valid keys produce zeros (the flagged fallback).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ValueError(f"attention: q/k width differ, {q.shape} vs {k.shape}")
    scores = mul(matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))),
                 Tensor(1.0 / np.sqrt(d)))
    n_q, n_k = scores.shape[-2], scores.shape[-1]
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape[-1] != n_k:
            raise ValueError("attention: key_mask last dim must equal n_k")
        if key_mask.ndim == scores.ndim - 1:
            key_mask = np.expand_dims(key_mask, -2)
        drop = np.broadcast_to(~key_mask, scores.shape)
        scores = masked_fill(scores, drop, -1e9)
        fallback = np.all(drop, axis=-1)  # [..., n_q]
    else:
        fallback = np.zeros(scores.shape[:-1], dtype=bool)
    w = softmax(scores, axis=-1)
    if fallback.any():
        w = masked_fill(w, np.expand_dims(fallback, -1), 0.0)
    out = matmul(w, v)
    _ = n_q
    if return_fallback:
        return out, fallback
    return out


__all__ = [
    "Tensor", "Tape", "TapeNode", "tape_context", "no_grad", "grad_enabled",
    "set_default_dtype", "get_default_dtype", "default_dtype", "as_tensor",
    "backward", "add", "sub", "mul", "div", "neg", "relu", "tanh", "sigmoid",
    "sin", "cos", "exp", "log", "sqrt", "abs_", "square", "clamp",
    "stop_gradient", "wrap_angle_op", "matmul", "concat", "slice_",
    "index_select", "reshape", "transpose", "expand", "sum_", "mean", "max_",
    "softmax", "layer_norm", "dropout", "masked_fill", "where_mask",
    "attention", "logsumexp", "take_along_last",
]
