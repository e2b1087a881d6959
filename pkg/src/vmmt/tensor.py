"""Dense float64 tensors with taped reverse-mode differentiation.

Operations executed while a :class:`Tape` is active (``with Tape() as tape``)
are recorded in execution order, which is already a topological order, so
``tape.backward(loss)`` simply walks the record in reverse.  Outside a tape
every primitive computes its forward value only, which is what decoding and
finite-difference evaluation use.

Broadcasting is deliberately absent: binary primitives require identical
shapes, with the single exception of a Python scalar operand.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "Tensor", "Tape", "ShapeError", "active_tape", "constant", "parameter",
    "kernel_set", "frozen_stop_gradients",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


_local = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_tape", "_node", "grad")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        # extended precision passes through (finite-difference oracle); all else is float64
        if arr.dtype != np.float64 and arr.dtype != np.longdouble:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None
        self._node = None
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def node_id(self) -> int | None:
        return self._node

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Tape:
    """Ordered record of operations for one forward/backward pass.

    A tape is confined to the thread that entered it.
    """

    def __init__(self):
        self.ops: list[tuple[tuple, tuple, Callable]] = []
        self._n = 0
        self._leaf_nodes: dict[int, int] = {}
        self.leaves: dict[int, Tensor] = {}
        self.grads: list | None = None
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False

    def _new_node(self) -> int:
        self._n += 1
        return self._n - 1

    def node_of(self, t) -> int | None:
        if not isinstance(t, Tensor):
            return None
        if t._tape is self:
            return t._node
        if t.requires_grad and t._tape is None:
            key = id(t)
            n = self._leaf_nodes.get(key)
            if n is None:
                n = self._new_node()
                self._leaf_nodes[key] = n
                self.leaves[n] = t
            return n
        return None

    def record(self, inputs: Sequence, outputs: Sequence[Tensor], backward: Callable) -> None:
        in_nodes = tuple(self.node_of(t) for t in inputs)
        if all(n is None for n in in_nodes):
            return
        out_nodes = []
        for out in outputs:
            out._tape = self
            out._node = self._new_node()
            out.requires_grad = True
            out_nodes.append(out._node)
        self.ops.append((in_nodes, tuple(out_nodes), backward))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Back-propagate from a scalar ``loss``; returns ``{node_id: grad}``.

        Leaf tensors also receive ``.grad`` (zeros when unreachable).
        """
        if loss.data.size != 1 or loss.data.ndim > 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if not self.ops or loss._tape is not self:
            raise RuntimeError("backward: loss was not produced on this tape")
        grads: list = [None] * self._n
        grads[loss._node] = np.ones_like(loss.data)
        for in_nodes, out_nodes, rule in reversed(self.ops):
            gouts = [grads[n] for n in out_nodes]
            if all(g is None for g in gouts):
                continue
            gins = rule(gouts)
            for n, g in zip(in_nodes, gins):
                if n is None or g is None:
                    continue
                if grads[n] is None:
                    grads[n] = g
                else:
                    grads[n] = grads[n] + g
        self.grads = grads
        for n, leaf in self.leaves.items():
            g = grads[n]
            leaf.grad = np.zeros_like(leaf.data) if g is None else g
        return {i: g for i, g in enumerate(grads) if g is not None}

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward pass w.r.t. ``t`` (zeros if unreachable)."""
        n = t._node if t._tape is self else self._leaf_nodes.get(id(t))
        if n is None or self.grads is None or self.grads[n] is None:
            return np.zeros_like(t.data)
        return self.grads[n]


def _out(data, inputs, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.name = None
    out._tape = None
    out._node = None
    out.grad = None
    tape = active_tape()
    if tape is not None:
        tape.record(inputs, (out,), lambda g: backward(g[0]))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        s = float(b)
        return _out(a.data + s, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _same_shape("add", a, b)
    return _out(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)
        return _out(a.data - s, (a,), lambda g: (g,))
    _same_shape("sub", a, b)
    return _out(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _out(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _out(a.data * s, (a,), lambda g: (g * s,))
    if not isinstance(a, Tensor):
        return mul(b, a)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _out(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    return _out(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _out(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _out(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _out(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _out(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _out(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    pos = ad > 0
    # np.maximum propagates NaN
    return _out(np.maximum(ad, 0.0), (a,), lambda g: (g * pos,))


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    y = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))
    return _out(y, (a,), lambda g: (g * _sigmoid(ad),))


def maximum_scalar(a: Tensor, floor: float) -> Tensor:
    """``max(a, floor)`` elementwise; the floor wins ties (zero gradient)."""
    ad = a.data
    keep = ad > floor
    return _out(np.maximum(ad, floor), (a,), lambda g: (g * keep,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    return maximum_scalar(a, floor)


# ---------------------------------------------------------------------------
# reductions and shape manipulation

def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.data.shape
    if axis is None:
        return _out(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.data.ndim

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _out(a.data.sum(axis=ax), (a,), back)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.data.shape
    return _out(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got {a.shape}")
    return _out(a.data.T, (a,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    nd = parts[0].data.ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.data.ndim != nd or any(
            p.data.shape[d] != parts[0].data.shape[d] for d in range(nd) if d != ax
        ):
            raise ShapeError(f"concat: shape mismatch {parts[0].shape} vs {p.shape}")
    sizes = [p.data.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        idx = [slice(None)] * nd
        res = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            res.append(g[tuple(idx)])
        return tuple(res)

    return _out(np.concatenate([p.data for p in parts], axis=ax), parts, back)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    shape0 = parts[0].data.shape
    for p in parts[1:]:
        if p.data.shape != shape0:
            raise ShapeError(f"stack: shape mismatch {shape0} vs {p.shape}")
    ax = axis % (len(shape0) + 1)

    def back(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(parts)))

    return _out(np.stack([p.data for p in parts], axis=ax), parts, back)


def slice_(a: Tensor, idx) -> Tensor:
    shape = a.data.shape

    def back(g):
        full = np.zeros(shape)
        if _has_array_index(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _out(a.data[idx], (a,), back)


def _has_array_index(idx) -> bool:
    if isinstance(idx, tuple):
        return any(isinstance(i, (list, np.ndarray)) for i in idx)
    return isinstance(idx, (list, np.ndarray))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``a`` of rank >= 1 and ``b`` of rank 2."""
    ad, bd = a.data, b.data
    if bd.ndim != 2 or ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def back(g):
        ga = g @ bd.T
        a2 = ad.reshape(-1, ad.shape[-1])
        gb = a2.T @ g.reshape(-1, bd.shape[1])
        return ga, gb

    return _out(ad @ bd, (a, b), back)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` where ``b`` (shape ``[out]``) is added to every row."""
    xd, wd, bd = x.data, w.data, b.data
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[0] or bd.shape != (wd.shape[1],):
        raise ShapeError(f"affine: shape mismatch x{x.shape} W{w.shape} b{b.shape}")

    def back(g):
        g2 = g.reshape(-1, wd.shape[1])
        return g @ wd.T, xd.reshape(-1, wd.shape[0]).T @ g2, g2.sum(axis=0)

    return _out(xd @ wd + bd, (x, w, b), back)


def batched_dot(q: Tensor, keys: Tensor) -> Tensor:
    """Scores ``out[b, t] = q[b] . keys[b, t]`` for ``q`` [B, D], ``keys`` [B, T, D]."""
    qd, kd = q.data, keys.data
    if kd.ndim != 3 or qd.shape != (kd.shape[0], kd.shape[2]):
        raise ShapeError(f"batched_dot: shape mismatch {q.shape} vs {keys.shape}")

    def back(g):
        return np.einsum("bt,btd->bd", g, kd), g[:, :, None] * qd[:, None, :]

    return _out(np.einsum("bd,btd->bt", qd, kd), (q, keys), back)


def weighted_sum(w: Tensor, values: Tensor) -> Tensor:
    """``out[b] = sum_t w[b, t] * values[b, t]`` for ``w`` [B, T], ``values`` [B, T, D]."""
    wd, vd = w.data, values.data
    if vd.ndim != 3 or wd.shape != vd.shape[:2]:
        raise ShapeError(f"weighted_sum: shape mismatch {w.shape} vs {values.shape}")

    def back(g):
        return np.einsum("bd,btd->bt", g, vd), wd[:, :, None] * g[:, None, :]

    return _out(np.einsum("bt,btd->bd", wd, vd), (w, values), back)


# ---------------------------------------------------------------------------
# normalisers and likelihood helpers

def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    ad = a.data
    e = np.exp(ad - ad.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _out(y, (a,), back)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    ad = a.data
    shifted = ad - ad.max(axis=-1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def back(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _out(y, (a,), back)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    td = table.data
    if ids.size and (ids.min() < 0 or ids.max() >= td.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {td.shape[0]})")

    def back(g):
        full = np.zeros_like(td)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, td.shape[1]))
        return (full,)

    return _out(td[ids], (table,), back)


def pick(logp: Tensor, ids) -> Tensor:
    """``out[..., ] = logp[..., ids]`` along the last axis (one id per row)."""
    ids = np.asarray(ids, dtype=np.int64)
    ld = logp.data
    if ids.shape != ld.shape[:-1]:
        raise ShapeError(f"pick: ids shape {ids.shape} vs rows {ld.shape[:-1]}")
    if ids.size and (ids.min() < 0 or ids.max() >= ld.shape[-1]):
        raise IndexError(f"pick: id out of range [0, {ld.shape[-1]})")
    flat = ld.reshape(-1, ld.shape[-1])
    rows = np.arange(flat.shape[0])
    fids = ids.reshape(-1)

    def back(g):
        full = np.zeros_like(flat)
        full[rows, fids] = g.reshape(-1)
        return (full.reshape(ld.shape),)

    return _out(flat[rows, fids].reshape(ids.shape), (logp,), back)


def squared_error(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise ``sum((a - b)**2)`` over the last axis."""
    _same_shape("squared_error", a, b)
    diff = a.data - b.data

    def back(g):
        ga = 2.0 * g[..., None] * diff
        return ga, -ga

    return _out((diff * diff).sum(axis=-1), (a, b), back)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, train: bool = True) -> Tensor:
    """Inverted dropout; the identity when not training or ``p == 0``."""
    if not train or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout: training mode requires an rng")
    keep = 1.0 - p
    mask = (rng.random(a.data.shape) < keep) / keep
    return _out(a.data * mask, (a,), lambda g: (g * mask,))


_freeze = threading.local()


class _Freezer:
    def __init__(self):
        self.values: list[np.ndarray] = []
        self.pos = 0
        self.recording = True

    def rewind(self) -> None:
        """Switch from recording to replaying from the first recorded value."""
        self.recording = False
        self.pos = 0


@contextmanager
def frozen_stop_gradients():
    """Replay the values seen by :func:`stop_gradient` on the first pass.

    Used by finite-difference checks: a detached quantity is a constant
    w.r.t. the parameters, so perturbed evaluations must see the value
    recorded at the unperturbed point.  Call ``rewind()`` on the yielded
    object before every replayed evaluation.
    """
    freezer = _Freezer()
    prev = getattr(_freeze, "state", None)
    _freeze.state = freezer
    try:
        yield freezer
    finally:
        _freeze.state = prev


def stop_gradient(a: Tensor) -> Tensor:
    """Forward the value, block all gradient (a fresh constant)."""
    freezer = getattr(_freeze, "state", None)
    if freezer is None:
        return Tensor(a.data)
    if freezer.recording:
        freezer.values.append(a.data.copy())
        return Tensor(a.data)
    val = freezer.values[freezer.pos]
    freezer.pos += 1
    return Tensor(val)


# ---------------------------------------------------------------------------
# fused recurrent kernel

def lstm_pointwise(gates: Tensor, c_prev: Tensor, h_prev: Tensor, mask: np.ndarray):
    """Fused LSTM nonlinearity with masked state carry.

    ``gates`` is ``[B, 4H]`` pre-activations ordered (i, f, g, o).  Rows with
    ``mask == 0`` copy ``(h_prev, c_prev)`` through unchanged.
    Returns ``(h, c)``.
    """
    gd, cd, hd = gates.data, c_prev.data, h_prev.data
    B, H4 = gd.shape
    if H4 % 4 or cd.shape != (B, H4 // 4) or hd.shape != cd.shape:
        raise ShapeError(f"lstm_pointwise: shape mismatch gates{gates.shape} c{c_prev.shape} h{h_prev.shape}")
    m = np.ascontiguousarray(mask, dtype=np.float64).reshape(B)
    backend = kernels if gd.dtype == np.float64 and cd.dtype == np.float64 else kernels.fallback
    h, c, cache = backend.lstm_forward(gd, cd, hd, m)
    h_t = _out_multi(h)
    c_t = _out_multi(c)
    tape = active_tape()
    if tape is not None:
        def back(gouts):
            dh, dc = gouts
            if dh is None:
                dh = np.zeros_like(h)
            if dc is None:
                dc = np.zeros_like(c)
            return backend.lstm_backward(cache, cd, m, dh, dc)

        tape.record((gates, c_prev, h_prev), (h_t, c_t), back)
    return h_t, c_t


def _out_multi(data) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.name = None
    out._tape = None
    out._node = None
    out.grad = None
    return out


def kernel_set() -> dict[str, Callable]:
    """Catalogue of differentiable primitives by name."""
    return {
        "matmul": matmul, "affine": affine, "add": add, "sub": sub, "neg": neg,
        "mul": mul, "div": div, "square": square, "concat": concat, "stack": stack,
        "slice": slice_, "reshape": reshape, "transpose": transpose,
        "mean": mean, "sum": sum_, "exp": exp, "log": log, "tanh": tanh,
        "sigmoid": sigmoid, "relu": relu, "softplus": softplus,
        "clamp_min": clamp_min, "softmax": softmax, "log_softmax": log_softmax,
        "embedding": embedding, "pick": pick, "squared_error": squared_error,
        "dropout": dropout, "stop_gradient": stop_gradient,
        "batched_dot": batched_dot, "weighted_sum": weighted_sum,
        "lstm_pointwise": lstm_pointwise,
    }


def parameters_nonfinite(params: Iterable[Tensor]) -> list[str]:
    return [p.name or "?" for p in params if not np.all(np.isfinite(p.data))]
