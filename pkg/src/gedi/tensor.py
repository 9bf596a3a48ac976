"""Dense float64 tensors with tape-based reverse-mode differentiation.

Design notes:
- All math is 64-bit. Ops record themselves on the innermost active Tape
  when any input requires a gradient; with no active tape the same ops run
  in pure inference mode.
- backward() walks the tape in reverse execution order, which is a valid
  reverse topological order for a sequential program, so gradient
  accumulation order is fixed and runs are bit-reproducible.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, NumericError, UsageError

LN_EPS = 1e-5  # layer-norm variance epsilon


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_tape", "_pos")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._tape = None
        self._pos = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed primitives; context manager."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        # break tensor<->tape reference cycles eagerly; otherwise the large
        # per-epoch intermediate arrays pile up until the cyclic GC runs
        for t in self.nodes:
            t._backward = None
            t._tape = None
        self.nodes.clear()
        return False


class _StopTaping:
    """Disables recording inside the context (cheap inference scope)."""

    def __enter__(self):
        _TAPES.append(None)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


def stop_taping() -> _StopTaping:
    return _StopTaping()


_TAPES: list = []


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _accum(p: Tensor, g: np.ndarray):
    if not p.requires_grad:
        return
    if p.grad is None:
        p.grad = np.zeros_like(p.data)
    p.grad += g


def _make(out_data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._backward = backward_fn
        out._tape = tape
        out._pos = len(tape.nodes)
        tape.nodes.append(out)
    return out


def _check_finite(name: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} produced non-finite values")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor):
    """Populate .grad of every requires_grad tensor feeding `loss`."""
    if loss.data.size != 1:
        raise UsageError("backward expects a scalar loss")
    tape = loss._tape
    if tape is None or tape is not _active_tape():
        raise UsageError("backward on a tensor not recorded on the active tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes[: loss._pos + 1]):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    _check_finite("div", out)

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, -g)

    return _make(-a.data, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul expects operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul contraction mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(out, (a, b), bw)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bw(g):
        _accum(a, g * (a.data > 0.0))

    return _make(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    _check_finite("exp", out)

    def bw(g):
        _accum(a, g * out)

    return _make(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    _check_finite("log", out)

    def bw(g):
        _accum(a, g / a.data)

    return _make(out, (a,), bw)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data ** p
    _check_finite("pow", out)

    def bw(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), bw)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        _accum(a, g * s)

    return _make(out, (a,), bw)


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Softmax over the last axis restricted to positions where mask != 0.

    Masked positions get probability exactly 0; an all-masked row yields an
    all-zero row instead of NaN. The mask is a constant (no gradient).
    """
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), logits.shape)
    active = m != 0.0
    neg = np.where(active, logits.data, -np.inf)
    mx = neg.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(logits.data - mx) * active
    s = e.sum(axis=-1, keepdims=True)
    out = e / np.where(s == 0.0, 1.0, s)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accum(logits, out * (g - dot))

    return _make(out, (logits,), bw)


def log_softmax(logits: Tensor) -> Tensor:
    x = logits.data
    mx = x.max(axis=-1, keepdims=True)
    z = x - mx
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        sm = np.exp(out)
        _accum(logits, g - sm * g.sum(axis=-1, keepdims=True))

    return _make(out, (logits,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis with population variance, then scale + shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    std = np.sqrt(var + eps)
    xhat = (x.data - mu) / std
    out = xhat * gain.data + bias.data

    def bw(g):
        _accum(gain, _unbroadcast(g * xhat, gain.shape))
        _accum(bias, _unbroadcast(g, bias.shape))
        dxhat = g * gain.data
        n = x.shape[-1]
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) / std
        _accum(x, dx)
        del n

    return _make(out, (x, gain, bias), bw)


def masked_mean_pool(x: Tensor, mask) -> Tensor:
    """Mean of x (..., k, d) over axis -2 restricted to mask (..., k) == 1.

    Rows with no active positions pool to the zero vector.
    """
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.shape[:-1]:
        raise DimensionError(f"pool mask shape {m.shape} vs input {x.shape}")
    c = m.sum(axis=-1, keepdims=True)  # (..., 1)
    denom = np.where(c == 0.0, 1.0, c)
    out = (x.data * m[..., None]).sum(axis=-2) / denom

    def bw(g):
        _accum(x, g[..., None, :] * (m / denom)[..., None])

    return _make(out, (x,), bw)


def concat(tensors: list, axis: int = -1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(out, tuple(tensors), bw)


def l2norm_rows(x: Tensor) -> Tensor:
    """Row-wise L2 norm over the last axis, keepdims."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))

    def bw(g):
        safe = np.where(n == 0.0, 1.0, n)
        _accum(x, g * x.data / safe)

    return _make(n, (x,), bw)


def transpose(x: Tensor, a1: int = -1, a2: int = -2) -> Tensor:
    out = np.swapaxes(x.data, a1, a2)

    def bw(g):
        _accum(x, np.swapaxes(g, a1, a2))

    return _make(out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _make(out, (x,), bw)


def gather_rows(table: Tensor, idx) -> Tensor:
    """Embedding lookup: rows of `table` selected by integer index array."""
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        _accum(table, gt)

    return _make(out, (table,), bw)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(gg, x.shape).copy())

    return _make(out, (x,), bw)


def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        count = x.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accum(x, np.broadcast_to(g / count, x.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(gg / count, x.shape).copy())

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def _eval_scalar(f) -> float:
    with stop_taping():
        v = f()
    v = float(v.data if isinstance(v, Tensor) else v)
    if not math.isfinite(v):
        raise NumericError("function value non-finite during gradient check")
    return v


def grad_check(f, params: list, step: float = 1e-5) -> float:
    """Max over parameter tensors of the relative error between analytic
    gradients of f() and central finite differences.

    Relative error per parameter is norm-based:
    ||analytic - central|| / max(||analytic||, ||central||, 1e-5).
    The floor keeps near-zero gradients (e.g. parameters the loss is exactly
    invariant to) from amplifying finite-difference round-off into spurious
    relative error.
    """
    if step <= 0:
        raise UsageError("grad_check step must be positive")
    for p in params:
        p.zero_grad()
    with Tape():
        loss = f()
        backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p in params:
        p.zero_grad()
    worst = 0.0
    for p, ga in zip(params, analytic):
        gc = np.zeros_like(p.data)
        flat = p.data.ravel()
        gflat = gc.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = _eval_scalar(f)
            flat[i] = orig - step
            fm = _eval_scalar(f)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        na = np.linalg.norm(ga)
        nc = np.linalg.norm(gc)
        err = np.linalg.norm(ga - gc) / max(na, nc, 1e-5)
        worst = max(worst, err)
    return worst
