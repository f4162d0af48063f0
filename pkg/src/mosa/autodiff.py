"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op builds its output eagerly with numpy and, when any input requires a
gradient, attaches a backward closure to the output.  ``Tensor.backward()``
walks the tape in reverse topological order and accumulates gradients into
every participating tensor with ``requires_grad=True``.  All storage is dense
float64; sparsity elsewhere in the toolkit is expressed by multiplying with
0/1 mask constants, which also zeroes the corresponding gradient entries
structurally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, IndexRangeError, NumericError, ShapeError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar output, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # Operator sugar; the module-level functions are the primary API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _require_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite input")


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = _make(a.data @ b.data, (a, b), None)

    def _bw():
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data + b.data, (a, b), None)

    def _bw():
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    out._backward = _bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data - b.data, (a, b), None)

    def _bw():
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data * b.data, (a, b), None)

    def _bw():
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = _bw
    return out


def scale(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    out = _make(a.data * s, (a,), None)

    def _bw():
        if a.requires_grad:
            _accumulate(a, out.grad * s)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    _require_finite("relu", a.data)
    out = _make(np.maximum(a.data, 0.0), (a,), None)

    def _bw():
        if a.requires_grad:
            _accumulate(a, out.grad * (a.data > 0.0))

    out._backward = _bw
    return out


def gelu(a: Tensor) -> Tensor:
    """tanh-form GELU: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    a = as_tensor(a)
    _require_finite("gelu", a.data)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * (x2 * x)))
    half_x = 0.5 * x
    out = _make(half_x + half_x * t, (a,), None)

    def _bw():
        if a.requires_grad:
            d = 0.5 + 0.5 * t + half_x * (1.0 - t * t) * (_GELU_C + (3.0 * _GELU_A * _GELU_C) * x2)
            _accumulate(a, out.grad * d)

    out._backward = _bw
    return out


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    _require_finite("exp", a.data)
    e = np.exp(a.data)
    out = _make(e, (a,), None)

    def _bw():
        if a.requires_grad:
            _accumulate(a, out.grad * e)

    out._backward = _bw
    return out


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    _require_finite("log", a.data)
    if np.any(a.data <= 0.0):
        raise NumericError("log: input must be strictly positive")
    out = _make(np.log(a.data), (a,), None)

    def _bw():
        if a.requires_grad:
            _accumulate(a, out.grad / a.data)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# row-wise ops (last axis)


def softmax(a: Tensor) -> Tensor:
    a = as_tensor(a)
    _require_finite("softmax", a.data)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _make(y, (a,), None)

    def _bw():
        if a.requires_grad:
            g = out.grad
            _accumulate(a, (g - (g * y).sum(axis=-1, keepdims=True)) * y)

    out._backward = _bw
    return out


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row (last axis) to zero mean, unit variance."""
    a = as_tensor(a)
    _require_finite("layer_norm", a.data)
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv
    out = _make(y, (a,), None)

    def _bw():
        if a.requires_grad:
            g = out.grad
            gm = g.mean(axis=-1, keepdims=True)
            gym = (g * y).mean(axis=-1, keepdims=True)
            _accumulate(a, inv * (g - gm - y * gym))

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = _make(np.asarray(a.data.sum()), (a,), None)

    def _bw():
        if a.requires_grad:
            _accumulate(a, np.broadcast_to(out.grad, a.data.shape).copy())

    out._backward = _bw
    return out


def mean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = _make(np.asarray(a.data.mean()), (a,), None)

    def _bw():
        if a.requires_grad:
            _accumulate(a, np.broadcast_to(out.grad / a.data.size, a.data.shape).copy())

    out._backward = _bw
    return out


def mean_axis(a: Tensor, axis: int) -> Tensor:
    a = as_tensor(a)
    n = a.data.shape[axis]
    out = _make(a.data.mean(axis=axis), (a,), None)

    def _bw():
        if a.requires_grad:
            g = np.expand_dims(out.grad / n, axis)
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out = _make(a.data.reshape(shape), (a,), None)

    def _bw():
        if a.requires_grad:
            _accumulate(a, out.grad.reshape(a.data.shape))

    out._backward = _bw
    return out


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    inverse = tuple(np.argsort(axes))
    out = _make(a.data.transpose(axes), (a,), None)

    def _bw():
        if a.requires_grad:
            _accumulate(a, out.grad.transpose(inverse))

    out._backward = _bw
    return out


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), None)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bw():
        g = out.grad
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    out._backward = _bw
    return out


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out = _make(np.broadcast_to(a.data, shape).copy(), (a,), None)

    def _bw():
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad, a.data.shape))

    out._backward = _bw
    return out


def take(a: Tensor, index: int, axis: int = 1) -> Tensor:
    """Select one slice along ``axis`` (e.g. the class-token row)."""
    a = as_tensor(a)
    out = _make(np.take(a.data, index, axis=axis), (a,), None)

    def _bw():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            idx = [slice(None)] * a.data.ndim
            idx[axis] = index
            g[tuple(idx)] = out.grad
            _accumulate(a, g)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    _require_finite("cross_entropy", logits.data)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects B x C logits, got {logits.shape}")
    y = np.asarray(labels, dtype=np.int64)
    bsz, ncls = logits.data.shape
    if y.shape != (bsz,):
        raise ShapeError(f"labels shape {y.shape} does not match batch {bsz}")
    if np.any(y < 0) or np.any(y >= ncls):
        bad = int(y[(y < 0) | (y >= ncls)][0])
        raise IndexRangeError(f"label {bad} outside [0, {ncls})")
    m = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    lse = m[:, 0] + np.log(e.sum(axis=-1))
    picked = logits.data[np.arange(bsz), y]
    out = _make(np.asarray(np.mean(lse - picked)), (logits,), None)
    probs = e / e.sum(axis=-1, keepdims=True)

    def _bw():
        if logits.requires_grad:
            d = probs.copy()
            d[np.arange(bsz), y] -= 1.0
            _accumulate(logits, d * (out.grad / bsz))

    out._backward = _bw
    return out


def kl_div(p: Tensor, q: Tensor) -> Tensor:
    """Mean over the batch of sum_c p log(p/q); 0 log(0/q) counts as 0."""
    p, q = as_tensor(p), as_tensor(q)
    if p.data.shape != q.data.shape:
        raise ShapeError(f"kl_div shapes differ: {p.shape} vs {q.shape}")
    _require_finite("kl_div", p.data)
    _require_finite("kl_div", q.data)
    if np.any(p.data < 0.0) or np.any(q.data < 0.0):
        raise NumericError("kl_div: negative probability entry")
    row_p = p.data.sum(axis=-1)
    row_q = q.data.sum(axis=-1)
    if np.any(np.abs(row_p - 1.0) > 1e-9) or np.any(np.abs(row_q - 1.0) > 1e-9):
        raise NumericError("kl_div: rows must sum to 1 within 1e-9")
    support = p.data > 0.0
    if np.any(support & (q.data == 0.0)):
        raise NumericError("kl_div: q is zero where p is positive")
    bsz = p.data.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        logratio = np.where(support, np.log(p.data) - np.log(q.data), 0.0)
    out = _make(np.asarray((p.data * logratio).sum() / bsz), (p, q), None)

    def _bw():
        g = float(out.grad) / bsz
        if p.requires_grad:
            # subgradient 0 at p == 0 (the value is constant there)
            _accumulate(p, np.where(support, logratio + 1.0, 0.0) * g)
        if q.requires_grad:
            with np.errstate(divide="ignore", invalid="ignore"):
                dq = np.where(support, -p.data / q.data, 0.0)
            _accumulate(q, dq * g)

    out._backward = _bw
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference over all entries."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = _make(np.asarray(np.mean(diff * diff)), (a, b), None)

    def _bw():
        g = out.grad * (2.0 / diff.size)
        if a.requires_grad:
            _accumulate(a, g * diff)
        if b.requires_grad:
            _accumulate(b, -g * diff)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    entries_checked: int
    passed: bool
    worst: str = ""


def grad_check(f, params: list[Tensor], eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    ``f`` must be deterministic given ``params`` and rebuild its graph on each
    call.  Relative error per entry is |a - n| / max(|a|, |n|, 1e-6).  The
    report never raises; callers assert on ``passed``.
    """
    for p in params:
        if not p.requires_grad:
            raise ConfigError("grad_check params must require gradients")
        p.grad = None
    out = f()
    out.backward()
    analytic = [np.array(p.grad) if p.grad is not None else np.zeros_like(p.data) for p in params]

    max_rel = 0.0
    worst = ""
    checked = 0
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        an = analytic[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(an[i] - numeric) / max(abs(an[i]), abs(numeric), 1e-6)
            checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = f"param {k} entry {i}: analytic {an[i]:.6g} numeric {numeric:.6g}"
    return GradCheckReport(max_rel_err=max_rel, tol=tol, entries_checked=checked,
                           passed=max_rel <= tol, worst=worst)
