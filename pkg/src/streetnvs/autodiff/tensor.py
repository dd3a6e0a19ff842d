"""Minimal dense-tensor engine with reverse-mode differentiation.

Values live in numpy arrays (float32 by default, float64 in test mode) and
operations record onto an explicit per-forward-pass Tape.  The operator set is
deliberately small: exactly what the networks, renderer and losses below need.
Gradient accumulation follows tape creation order, so results are bitwise
reproducible for a fixed seed.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_LOG_DIV_CLAMP = 1e-12


class EngineState:
    """Global numeric mode: dtype, strict domain errors, finite checks."""

    def __init__(self):
        self.dtype = np.float32
        self.strict = False
        self.check_finite = False


_STATE = EngineState()
_ACTIVE_TAPE: "Tape | None" = None
_GRAD_ENABLED = True


def default_dtype():
    return _STATE.dtype


@contextmanager
def test_mode():
    """Float64 arithmetic with NaN/Inf and domain checks after every op."""
    old = (_STATE.dtype, _STATE.strict, _STATE.check_finite)
    _STATE.dtype, _STATE.strict, _STATE.check_finite = np.float64, True, True
    try:
        yield
    finally:
        _STATE.dtype, _STATE.strict, _STATE.check_finite = old


@contextmanager
def no_grad():
    """Suspend tape recording; ops inside produce constant tensors."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Node:
    """One recorded op: output, differentiable inputs, and the pullback."""

    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out, inputs, bwd):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


class Tape:
    """Ordered op records for one forward pass; freed after backward."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss: "Tensor", params: "Iterable[Tensor] | None" = None):
        """Reverse sweep from a scalar loss.

        Sets ``.grad`` on every reached leaf and returns a map from tensor to
        gradient array.  If ``params`` is given, every listed tensor appears in
        the map (zeros when unused by the graph).  A tape can be walked once.
        """
        if self.consumed:
            raise RuntimeError("backward called twice on the same tape")
        if loss.data.size != 1:
            raise ValueError("backward target must be scalar")
        if not loss.requires_grad or loss.node is None:
            raise ValueError("backward target does not require gradients")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            owners.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.bwd(g)):
                if gi is None or not t.requires_grad:
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = gi if acc is None else acc + gi
                owners[id(t)] = t

        result: dict[Tensor, np.ndarray] = {}
        for tid, g in grads.items():
            leaf = owners[tid]
            leaf.grad = g
            result[leaf] = g
        if params is not None:
            for p in params:
                if p not in result:
                    p.grad = np.zeros_like(p.data)
                    result[p] = p.grad
        self.nodes.clear()
        return result


def backward(loss: "Tensor", params: "Iterable[Tensor] | None" = None):
    """Convenience wrapper: run backward on the currently active tape."""
    if _ACTIVE_TAPE is None:
        raise RuntimeError("no active tape")
    return _ACTIVE_TAPE.backward(loss, params)


class Tensor:
    """N-dimensional real array, optionally attached to the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_STATE.dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    # -- basics ---------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{rg})"

    # -- arithmetic -------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        data = self.data[key]
        shape = self.data.shape

        def bwd(g):
            z = np.zeros(shape, dtype=g.dtype)
            z[key] = g
            return (z,)

        return _make(data, (self,), bwd)

    # -- unary ops --------------------------------------------------------
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def softplus(self):
        return softplus(self)

    def sigmoid(self):
        return sigmoid(self)

    def sin(self):
        return sin(self)

    def cos(self):
        return cos(self)

    def clampmin(self, bound: float):
        return clampmin(self, bound)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def cumsum(self, axis=-1):
        return cumsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_STATE.dtype))


def _check(data: np.ndarray):
    if _STATE.check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by forward op")
    return data


def _make(data, inputs: tuple, bwd: Callable) -> Tensor:
    """Wrap an op result, recording a tape node when gradients are wanted."""
    _check(data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    if (
        _GRAD_ENABLED
        and _ACTIVE_TAPE is not None
        and any(t.requires_grad for t in inputs)
    ):
        out.requires_grad = True
        node = Node(out, inputs, bwd)
        out.node = node
        _ACTIVE_TAPE.nodes.append(node)
    else:
        out.requires_grad = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- binary elementwise ----------------------------------------------------

def add(a, b):
    if isinstance(b, Tensor) and isinstance(a, Tensor):
        sa, sb = a.data.shape, b.data.shape

        def bwd(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)

        return _make(a.data + b.data, (a, b), bwd)
    if not isinstance(a, Tensor):
        a, b = b, a
    c = np.asarray(b, dtype=a.data.dtype)
    sa = a.data.shape
    return _make(a.data + c, (a,), lambda g: (_unbroadcast(g, sa),))


def sub(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        sa, sb = a.data.shape, b.data.shape

        def bwd(g):
            return _unbroadcast(g, sa), _unbroadcast(-g, sb)

        return _make(a.data - b.data, (a, b), bwd)
    if isinstance(a, Tensor):
        sa = a.data.shape
        return _make(a.data - np.asarray(b, dtype=a.data.dtype), (a,),
                     lambda g: (_unbroadcast(g, sa),))
    sb = b.data.shape
    return _make(np.asarray(a, dtype=b.data.dtype) - b.data, (b,),
                 lambda g: (_unbroadcast(-g, sb),))


def mul(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        da, db = a.data, b.data

        def bwd(g):
            return _unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)

        return _make(da * db, (a, b), bwd)
    if not isinstance(a, Tensor):
        a, b = b, a
    c = np.asarray(b, dtype=a.data.dtype)
    sa = a.data.shape
    return _make(a.data * c, (a,), lambda g: (_unbroadcast(g * c, sa),))


def _safe_denominator(d: np.ndarray) -> np.ndarray:
    if _STATE.strict:
        if np.any(d == 0):
            raise ZeroDivisionError("division by exact zero in strict mode")
        return d
    small = np.abs(d) < _LOG_DIV_CLAMP
    if not np.any(small):
        return d
    return np.where(small, np.where(d < 0, -_LOG_DIV_CLAMP, _LOG_DIV_CLAMP), d)


def div(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        db = _safe_denominator(b.data)
        da = a.data
        out = da / db

        def bwd(g):
            ga = _unbroadcast(g / db, da.shape)
            gb = _unbroadcast(-g * out / db, b.data.shape)
            return ga, gb

        return _make(out, (a, b), bwd)
    if isinstance(a, Tensor):
        db = _safe_denominator(np.asarray(b, dtype=a.data.dtype))
        sa = a.data.shape
        return _make(a.data / db, (a,), lambda g: (_unbroadcast(g / db, sa),))
    db = _safe_denominator(b.data)
    out = np.asarray(a, dtype=b.data.dtype) / db
    sb = b.data.shape

    def bwd(g):
        return (_unbroadcast(-g * out / db, sb),)

    return _make(out, (b,), bwd)


# -- unary elementwise -------------------------------------------------------

def exp(x: Tensor):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor):
    d = x.data
    if _STATE.strict:
        if np.any(d <= 0):
            raise ValueError("log of non-positive value in strict mode")
        safe = d
    else:
        safe = np.maximum(d, _LOG_DIV_CLAMP)
    return _make(np.log(safe), (x,), lambda g: (g / safe,))


def relu(x: Tensor):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def softplus(x: Tensor):
    d = x.data
    out = np.logaddexp(0, d)
    return _make(out, (x,), lambda g: (g / (1 + np.exp(-d)),))


def sigmoid(x: Tensor):
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1 / (1 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1 + e)
    return _make(out, (x,), lambda g: (g * out * (1 - out),))


def sin(x: Tensor):
    d = x.data
    return _make(np.sin(d), (x,), lambda g: (g * np.cos(d),))


def cos(x: Tensor):
    d = x.data
    return _make(np.cos(d), (x,), lambda g: (g * -np.sin(d),))


def clampmin(x: Tensor, bound: float):
    mask = x.data > bound
    return _make(np.where(mask, x.data, bound), (x,), lambda g: (g * mask,))


def clamp(x: Tensor, lo: float, hi: float):
    """Two-sided clamp composed from the clampmin primitive."""
    return 1.0 - clampmin(1.0 - clampmin(x, lo), 1.0 - hi)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor):
    da, db = a.data, b.data
    if da.ndim != 2 or db.ndim != 2:
        raise ValueError("matmul expects rank-2 tensors")
    if da.shape[1] != db.shape[0]:
        raise ValueError(f"matmul inner dims differ: {da.shape} vs {db.shape}")

    def bwd(g):
        return g @ db.T, da.T @ g

    return _make(da @ db, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor):
    """Fused x @ w + b for [N, in] batches; one tape node."""
    dx, dw = x.data, w.data
    if dx.shape[1] != dw.shape[0]:
        raise ValueError(f"linear dims differ: {dx.shape} vs {dw.shape}")
    out = dx @ dw
    out += b.data

    def bwd(g):
        return g @ dw.T, dx.T @ g, g.sum(axis=0)

    return _make(out, (x, w, b), bwd)


# -- reductions & shape ------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False):
    d = x.data
    out = d.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, d.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, d.shape).copy(),)

    return _make(np.asarray(out), (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims=False):
    d = x.data
    n = d.size if axis is None else (
        np.prod([d.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis, keepdims) * (1.0 / float(n))


def cumsum(x: Tensor, axis=-1):
    d = x.data

    def bwd(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(d, axis=axis), (x,), bwd)


def reshape(x: Tensor, shape):
    old = x.data.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis=-1):
    tensors = [astensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(np.concatenate(datas, axis=axis), tuple(tensors), bwd)


def put_rows(values: Tensor, idx: np.ndarray, n_rows: int):
    """Scatter rows into a zero array of n_rows; idx must be unique."""
    shape = (n_rows,) + values.data.shape[1:]
    out = np.zeros(shape, dtype=values.data.dtype)
    out[idx] = values.data
    return _make(out, (values,), lambda g: (g[idx],))


def gather_rows(x: Tensor, idx: np.ndarray):
    shape = x.data.shape

    def bwd(g):
        z = np.zeros(shape, dtype=g.dtype)
        np.add.at(z, idx, g)
        return (z,)

    return _make(x.data[idx], (x,), bwd)


def broadcast_rows(x: Tensor, n: int):
    """[D] or [1, D] -> [n, D]; gradient sums over the replicated rows."""
    row = x.data.reshape(1, -1)
    shape = x.data.shape

    def bwd(g):
        return (g.sum(axis=0).reshape(shape),)

    return _make(np.broadcast_to(row, (n, row.shape[1])).copy(), (x,), bwd)
