"""Dense tensors with tape-based reverse-mode differentiation.

Only the handful of operations a small transformer needs are provided.
Every differentiable op appends its output node to a per-thread
:class:`ComputationRecord`; :func:`backward` sweeps that record once in
reverse execution order and then clears it.

Values are plain row-major ``numpy`` arrays. The default precision is
32-bit; gradient checks switch to 64-bit with :func:`default_dtype`.
"""

from __future__ import annotations

import contextlib
import math
import os
import threading
from typing import Iterator, Sequence

import numpy as np

# sqrt(2/pi) and the cubic coefficient of the tanh GELU approximation.
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

# Check every op output for NaN/Inf, not just losses and gradients.
DEBUG = os.environ.get("LENCAP_DEBUG", "") not in ("", "0")


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a forward value or a gradient."""


class EmptyLossError(ValueError):
    """Raised when a masked loss has no position to average over."""


_state = threading.local()


def _thread_state():
    if not hasattr(_state, "record"):
        _state.record = ComputationRecord()
        _state.grad_enabled = True
        _state.dtype = np.float32
    return _state


def get_default_dtype():
    return _thread_state().dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors on this thread."""
    st = _thread_state()
    old = st.dtype
    st.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        st.dtype = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording; used for inference."""
    st = _thread_state()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


class ComputationRecord:
    """Ordered list of executed differentiable ops for one thread."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def append(self, node: "Tensor") -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node._backward = None
            node._parents = ()
            node.grad = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def current_record() -> ComputationRecord:
    return _thread_state().record


class Tensor:
    """A value array plus an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else get_default_dtype()
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._backward = None
        self._parents: tuple = ()
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # operator sugar used by tests and the model
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return add(self, scale(_lift(other, self), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only squaring is supported")
        return mul(self, self)


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or get_default_dtype()), requires_grad=requires_grad, name=name)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if DEBUG:
        _check_finite(data, "forward value")
    st = _thread_state()
    if st.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        st.record.append(out)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    out_data = a.data * a.dtype.type(s)

    def backward(g):
        _accum(a, g * g.dtype.type(s))

    return _make(out_data, (a,), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    xd = x.data
    dt = xd.dtype.type
    c, a = dt(GELU_C), dt(GELU_A)
    x2 = xd * xd
    th = np.tanh(c * xd * (dt(1) + a * x2))
    half_1p = dt(0.5) * (dt(1) + th)
    out_data = xd * half_1p

    def backward(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) c (1 + 3 a x^2)
        d = dt(1) - th * th
        d *= dt(0.5) * c * xd
        d *= dt(1) + dt(3) * a * x2
        d += half_1p
        d *= g
        _accum(x, d)

    return _make(out_data, (x,), backward)


# --------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape

    def backward(g):
        _accum(x, g.reshape(old))

    return _make(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, np.ascontiguousarray(g.transpose(inv)))

    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    out_data = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def backward(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, np.ascontiguousarray(g[tuple(idx)]))

    return _make(out_data, tuple(xs), backward)


def slice_axis(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        _accum(x, full)

    return _make(np.ascontiguousarray(x.data[idx]), (x,), backward)


def embedding(table: Tensor, indices) -> Tensor:
    """Gather rows of ``table``; output shape is ``indices.shape + (d,)``."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, full)

    return _make(table.data[idx], (table,), backward)


# --------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        _accum(x, np.broadcast_to(g.reshape(()), x.shape).astype(x.dtype))

    return _make(np.asarray([x.data.sum()], dtype=x.dtype), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be a 2-D weight shared across the leading axes of ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            _accum(b, gb)

    return _make(out_data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``x`` flattened to 2-D for the product."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear dimension mismatch: {x.shape} @ {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ weight.data
    if bias is not None:
        y += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        if x.requires_grad:
            _accum(x, (g2 @ weight.data.T).reshape(x.shape))
        if weight.requires_grad:
            _accum(weight, x2.T @ g2)
        if bias is not None and bias.requires_grad:
            _accum(bias, g2.sum(axis=0))

    return _make(y.reshape(lead + (weight.shape[1],)), parents, backward)


# --------------------------------------------------------------------------
# normalisation / probabilities


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        _accum(x, p * (g - dot))

    return _make(p, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine.

    ``gain`` and ``bias`` may be ``None`` for the parameter-free variant.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = tuple(t for t in (x, gain, bias) if t is not None)

    def backward(g):
        gx = g if gain is None else g * gain.data
        if x.requires_grad:
            d = xd.shape[-1]
            s1 = gx.sum(axis=-1, keepdims=True)
            s2 = (gx * xhat).sum(axis=-1, keepdims=True)
            _accum(x, (rstd / d) * (d * gx - s1 - xhat * s2))
        if gain is not None and gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.reshape(-1, xd.shape[-1]).sum(axis=0))

    return _make(out, parents, backward)


def cross_entropy(logits: Tensor, targets, mask=None, label_smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed negative log-likelihood over flagged rows.

    ``logits`` is ``[n, V]``. Rows whose ``mask`` flag is unset are dropped
    before any arithmetic, so their logits and targets cannot influence the
    result. The smoothed target puts ``1 - eps`` on the gold class and
    ``eps / V`` on every class.
    """
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects [n, V] logits, got {logits.shape}")
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError("label_smoothing must lie in [0, 1)")
    n, V = logits.shape
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != n:
        raise ValueError("targets length does not match logits rows")
    if mask is None:
        rows = np.arange(n)
    else:
        rows = np.flatnonzero(np.asarray(mask, dtype=bool).reshape(-1))
    if rows.size == 0:
        raise EmptyLossError("no flagged position contributes to the loss")
    tgt = targets[rows]
    if tgt.min() < 0 or tgt.max() >= V:
        raise IndexError("target index out of range")

    z = logits.data[rows]
    dt = z.dtype.type
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logp = zs - lse
    nll = -logp[np.arange(rows.size), tgt]
    eps = dt(label_smoothing)
    per_row = (dt(1) - eps) * nll + eps * (-logp.mean(axis=1))
    loss = per_row.mean(dtype=z.dtype)
    out_data = np.asarray([loss], dtype=z.dtype)

    def backward(g):
        p = np.exp(logp)
        target_dist = np.full_like(p, eps / V)
        target_dist[np.arange(rows.size), tgt] += dt(1) - eps
        grows = (p - target_dist) * (g.reshape(()) / rows.size)
        full = np.zeros_like(logits.data)
        full[rows] = grows
        _accum(logits, full)

    return _make(out_data, (logits,), backward)


# --------------------------------------------------------------------------
# reverse sweep


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it, then clear the record."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    _check_finite(loss.data, "loss")
    record = current_record()
    if not loss.requires_grad:
        record.clear()
        return
    loss.grad = np.ones_like(loss.data)
    try:
        for node in reversed(record.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)
            if DEBUG:
                _check_finite(node.grad, "gradient")
    finally:
        record.clear()


def check_grads_finite(params: Sequence[Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            _check_finite(p.grad, f"gradient of {p.name or 'tensor'}")
