"""Dense tensors with reverse-mode automatic differentiation.

Arrays are stored as contiguous numpy buffers in a single floating width,
selected process-wide with :func:`set_default_dtype` (float32 by default,
float64 for gradient-check runs). Operations record onto the innermost
active :class:`Tape`; with no tape active, everything is plain evaluation
and no graph is kept, which is how sampling and metric passes stay cheap.

Gradient semantics: ``backward`` accumulates into ``.grad`` until the
buffers are explicitly zeroed, so micro-batch accumulation is just
repeated backward calls.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteInputError, ShapeError, VocabularyError

_DTYPE = np.float32

# Additive mask value for disallowed attention positions. Large enough to
# zero out under softmax at either float width, finite so buffers never
# hold Inf.
NEG_MASK = -1e9


def set_default_dtype(name: str) -> None:
    """Select the floating width for newly created tensors ("float32" or "float64")."""
    global _DTYPE
    if name not in ("float32", "float64"):
        raise ValueError(f"unsupported dtype {name!r}")
    _DTYPE = np.float32 if name == "float32" else np.float64


def default_dtype() -> np.dtype:
    return np.dtype(_DTYPE)


class Tensor:
    """n-dimensional value, optionally participating in gradient computation.

    ``grad`` is allocated lazily on first accumulation and has the same
    shape as ``data``. Data written by an op is never mutated afterwards
    within a training step.
    """

    __slots__ = ("data", "grad", "requires_grad", "_in_graph")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=_DTYPE))
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._in_graph = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of operations for one backward pass.

    Appending happens in construction order, so entries are already
    topologically sorted: an operation's inputs always precede it. Use as
    a context manager; tapes nest, and only the innermost records.
    """

    __slots__ = ("_ops",)

    def __init__(self):
        # entries: (out, inputs, vjp) where vjp maps d(loss)/d(out) to
        # per-input gradients aligned with `inputs`.
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def __len__(self) -> int:
        return len(self._ops)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    """Create an op output, recording it if a tape is active and any input
    is connected to a gradient source."""
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad or t._in_graph for t in inputs):
        out._in_graph = True
        tape._ops.append((out, inputs, vjp))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every requires_grad tensor reachable from ``loss``.

    Walks the tape in reverse creation order; repeated calls accumulate.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        loss._accumulate(grads[id(loss)])
    for out, inputs, vjp in reversed(tape._ops):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if gi is None:
                continue
            if t.requires_grad:
                t._accumulate(gi)
            if t._in_graph:
                acc = grads.get(id(t))
                if acc is None:
                    grads[id(t)] = gi.copy() if gi.base is not None or gi is g else gi
                else:
                    acc += gi


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _make(out, (a,), vjp)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _make(out, (a,), vjp)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), vjp)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        # one-sided: subgradient 0 at exactly 0
        return (g * (a.data > 0.0),)

    return _make(out, (a,), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(a) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_K * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return (g * d,)

    return _make(out, (a,), vjp)


def clip_max(a, hi: float) -> Tensor:
    """min(a, hi) elementwise; derivative 0 where clipped."""
    a = _as_tensor(a)
    out = np.minimum(a.data, hi)

    def vjp(g):
        return (g * (a.data < hi),)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# shape and reduction


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), vjp)


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make(out, (a,), vjp)


def slice_axis0(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    out = a.data[start:stop]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return (ga,)

    return _make(out, (a,), vjp)


def sum_(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True),)
        ge = np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.shape).astype(a.data.dtype, copy=True),)

    return _make(out, (a,), vjp)


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / n)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: table[V, d] indexed by integer ids -> [*ids.shape, d]."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise VocabularyError(
            f"index out of range [0, {table.data.shape[0]}) in embedding lookup"
        )
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(out, (table,), vjp)


# ---------------------------------------------------------------------------
# probability ops


def log_softmax(logits) -> Tensor:
    """Log of softmax along the last axis, max-subtraction stabilized.

    Rows exponentiate and sum to 1 within 1e-6 for inputs up to |1e4|.
    """
    t = _as_tensor(logits)
    x = t.data
    if x.ndim == 0 or x.shape[-1] < 2:
        raise ShapeError("log_softmax needs a last dimension of size >= 2")
    if not np.isfinite(x).all():
        idx = np.argwhere(~np.isfinite(x))[0]
        raise NonFiniteInputError(f"non-finite logit at index {tuple(int(i) for i in idx)}")
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (t,), vjp)


def softmax(logits) -> Tensor:
    t = _as_tensor(logits)
    x = t.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (t,), vjp)


def cross_entropy(logprobs: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of `targets` under row-normalized logprobs.

    `targets` may be a TokenSeq-like object (with .tokens) or a plain int
    sequence. Mean reduction over rows; one convention everywhere.
    """
    tokens = getattr(targets, "tokens", targets)
    ids = np.asarray(tokens, dtype=np.int64)
    lp = _as_tensor(logprobs)
    if lp.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [L, V] logprobs, got {lp.shape}")
    n, v = lp.data.shape
    if ids.shape != (n,):
        raise ShapeError(f"{n} logprob rows but {ids.shape} targets")
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise VocabularyError(f"target outside vocabulary [0, {v})")
    rows = np.arange(n)
    out = -lp.data[rows, ids].mean()

    def vjp(g):
        gl = np.zeros_like(lp.data)
        gl[rows, ids] = -g / n
        return (gl,)

    return _make(np.asarray(out, dtype=lp.data.dtype), (lp,), vjp)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """Root-mean-square normalization over the last axis, with learned gain."""
    xv, gv = x.data, gain.data
    n = xv.shape[-1]
    ms = (xv * xv).mean(axis=-1, keepdims=True) + eps
    s = ms**-0.5
    unit = xv * s
    out = unit * gv

    def vjp(g):
        u = g * gv
        gx = s * (u - xv * (s * s / n) * (u * xv).sum(axis=-1, keepdims=True))
        ggain = (g * unit).reshape(-1, n).sum(axis=0)
        return gx, ggain

    return _make(out, (x, gain), vjp)


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs f under a fresh tape for the analytic gradient, then perturbs each
    element of x (no tape) for the numeric one. Relative error per element
    is |analytic - numeric| / (|analytic| + 1e-8). Reports, never raises
    on magnitude.
    """
    saved_grad = x.grad
    saved_rg = x.requires_grad
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
        backward(y, tape)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = saved_grad
    x.requires_grad = saved_rg

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * eps)
    numeric = numeric.reshape(x.data.shape)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)
    return float(rel.max()) if rel.size else 0.0
