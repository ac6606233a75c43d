"""Minimal dense-tensor autodiff core.

Row-major numpy arrays (float32 by default) wrapped in `Tensor` nodes. Every
op records its parents and a backward closure on the produced node; the
resulting parent-link graph is the tape, and `backward()` replays it in
reverse topological order, accumulating gradients additively into `.grad`.

No broadcasting except where an op explicitly documents it (bias rows,
constant masks); shape mismatches raise ShapeError so call sites stay
auditable.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


class NumericalError(ValueError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[Tensor], None]) -> Tensor:
    """Wrap an op result. Records the tape entry only when some parent needs it."""
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = lambda: backward(out)
    return out


def backward(loss: Tensor):
    """Reverse pass from a scalar loss over the recorded tape."""
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward()


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise / linear ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a + b; b may also be a 1-D bias added to the last axis."""
    bias_row = b.data.ndim == 1 and a.data.ndim >= 2 and a.data.shape[-1] == b.data.shape[0]
    if not bias_row:
        _same_shape(a, b, "add")
    data = a.data + b.data

    def back(out: Tensor):
        if a.requires_grad:
            a.accumulate(out.grad)
        if b.requires_grad:
            g = out.grad
            if bias_row:
                g = g.reshape(-1, b.data.shape[0]).sum(axis=0)
            b.accumulate(g)

    return _result(data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    data = a.data - b.data

    def back(out: Tensor):
        if a.requires_grad:
            a.accumulate(out.grad)
        if b.requires_grad:
            b.accumulate(-out.grad)

    return _result(data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    data = a.data * b.data

    def back(out: Tensor):
        if a.requires_grad:
            a.accumulate(out.grad * b.data)
        if b.requires_grad:
            b.accumulate(out.grad * a.data)

    return _result(data, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    data = a.data * a.data.dtype.type(c)

    def back(out: Tensor):
        a.accumulate(out.grad * a.data.dtype.type(c))

    return _result(data, (a,), back)


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a non-differentiable constant; c must broadcast without growing a."""
    c = np.asarray(c, dtype=a.data.dtype)
    data = a.data * c
    if data.shape != a.data.shape:
        raise ShapeError(f"mul_const: constant {c.shape} grows input {a.data.shape}")

    def back(out: Tensor):
        a.accumulate(out.grad * c)

    return _result(data, (a,), back)


def add_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Add a non-differentiable constant; c must broadcast without growing a."""
    c = np.asarray(c, dtype=a.data.dtype)
    data = a.data + c
    if data.shape != a.data.shape:
        raise ShapeError(f"add_const: constant {c.shape} grows input {a.data.shape}")

    def back(out: Tensor):
        a.accumulate(out.grad)

    return _result(data, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b for 2-D operands, or stacked (..., n, k) @ (..., k, m) with equal leading dims."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {ad.shape} @ {bd.shape}")
    if ad.ndim != bd.ndim or (ad.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]):
        raise ShapeError(f"matmul: leading dims differ: {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ: {ad.shape} @ {bd.shape}")
    data = ad @ bd

    def back(out: Tensor):
        if a.requires_grad:
            a.accumulate(out.grad @ bd.swapaxes(-1, -2))
        if b.requires_grad:
            b.accumulate(ad.swapaxes(-1, -2) @ out.grad)

    return _result(data, (a, b), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]

    def back(out: Tensor):
        splits = np.cumsum(sizes)[:-1]
        grads = np.split(out.grad, splits, axis=axis)
        for t, g in zip(tensors, grads):
            if t.requires_grad:
                t.accumulate(g)

    return _result(data, tuple(tensors), back)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def back(out: Tensor):
        a.accumulate(out.grad.reshape(a.data.shape))

    return _result(data, (a,), back)


def transpose(a: Tensor, axes) -> Tensor:
    data = np.ascontiguousarray(a.data.transpose(axes))
    inv = np.argsort(axes)

    def back(out: Tensor):
        a.accumulate(out.grad.transpose(inv))

    return _result(data, (a,), back)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def back(out: Tensor):
        a.accumulate(out.grad * (a.data > 0))

    return _result(data, (a,), back)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def back(out: Tensor):
        a.accumulate(out.grad * (1.0 - data * data))

    return _result(data, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid_np(a.data)

    def back(out: Tensor):
        a.accumulate(out.grad * data * (1.0 - data))

    return _result(data, (a,), back)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def back(out: Tensor):
        g = out.grad
        dot = (g * data).sum(axis=-1, keepdims=True)
        a.accumulate(data * (g - dot))

    return _result(data, (a,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm: affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def back(out: Tensor):
        g = out.grad
        if gain.requires_grad:
            gain.accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x.accumulate(inv * (gx - m1 - xhat * m2))

    return _result(data, (x, gain, bias), back)


# ---------------------------------------------------------------------------
# reductions / indexing
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    data = a.data.sum(axis=axis) if axis is not None else np.asarray(a.data.sum(), dtype=a.data.dtype)

    def back(out: Tensor):
        g = out.grad
        if axis is not None:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.data.shape).astype(a.data.dtype))

    return _result(np.asarray(data, dtype=a.data.dtype), (a,), back)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows: expected 2-D input, got {a.data.shape}")
    data = a.data[idx]

    def back(out: Tensor):
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        a.accumulate(g)

    return _result(data, (a,), back)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    return gather_rows(table, ids)


def segment_sum(a: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of a into num_segments buckets keyed by `segments`."""
    segments = np.asarray(segments, dtype=np.int64)
    if a.data.ndim != 2 or segments.shape != (a.data.shape[0],):
        raise ShapeError(f"segment_sum: rows {a.data.shape} vs segments {segments.shape}")
    data = np.zeros((num_segments, a.data.shape[1]), dtype=a.data.dtype)
    np.add.at(data, segments, a.data)

    def back(out: Tensor):
        a.accumulate(out.grad[segments])

    return _result(data, (a,), back)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d_head) + mask) v over stacked (..., S, d_head) operands.

    mask is an additive constant (0 keeps, large negative drops); full
    non-causal attention otherwise.
    """
    dh = q.data.shape[-1]
    scores = scale(matmul(q, transpose(k, tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2))),
                   1.0 / float(np.sqrt(dh)))
    if mask is not None:
        scores = add_const(scores, mask)
    return matmul(softmax(scores), v)


# ---------------------------------------------------------------------------
# loss / optimizer / gradient checking
# ---------------------------------------------------------------------------

BCE_EPS = 1e-7


def bce_loss(pred: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over mask=1 entries; zero (with zero grad) if none.

    Predictions are log-clamped to [BCE_EPS, 1-BCE_EPS]; values outside [0, 1]
    or non-finite raise NumericalError.
    """
    y = np.asarray(labels, dtype=pred.data.dtype)
    m = np.asarray(mask, dtype=pred.data.dtype)
    if y.shape != pred.data.shape or m.shape != pred.data.shape:
        raise ShapeError(f"bce_loss: pred {pred.data.shape}, labels {y.shape}, mask {m.shape}")
    p = pred.data
    if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
        raise NumericalError("bce_loss: predictions outside [0, 1]")
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    per = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    msum = float(m.sum())
    denom = msum if msum > 0 else 1.0
    data = np.asarray((per * m).sum() / denom, dtype=pred.data.dtype)

    def back(out: Tensor):
        inside = (p >= BCE_EPS) & (p <= 1.0 - BCE_EPS)
        dp = (pc - y) / (pc * (1.0 - pc)) * m * inside / denom
        pred.accumulate(out.grad * dp)

    return _result(data, (pred,), back)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: dict,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update with bias correction, in place on params' data."""
    t = state.get("t", 0) + 1
    state["t"] = t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.data.shape} for {name}")
        slot = state.setdefault(name, [np.zeros_like(p.data), np.zeros_like(p.data)])
        m, v = slot
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)


class GradCheckReport:
    def __init__(self, max_rel_err: float, worst_param: str, tol: float):
        self.max_rel_err = max_rel_err
        self.worst_param = worst_param
        self.tol = tol
        self.passed = max_rel_err < tol

    def __repr__(self):
        return (f"GradCheckReport(max_rel_err={self.max_rel_err:.3e}, "
                f"worst={self.worst_param!r}, passed={self.passed})")


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor],
               eps: float = 1e-3, tol: float = 1e-3, floor: float = 1e-2) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar f() against central finite differences.

    Relative error uses max(|analytic|, |numeric|, floor) as denominator so
    near-zero components are judged at floor scale rather than blowing up.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    worst = 0.0
    worst_name = ""
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i].copy()
            h = eps * max(1.0, abs(float(orig)))
            flat[i] = orig + h
            with no_grad():
                fp = float(f().data)
            flat[i] = orig - h
            with no_grad():
                fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            ana = float(analytic[name].reshape(-1)[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            if rel > worst:
                worst = rel
                worst_name = f"{name}[{i}]"
    return GradCheckReport(worst, worst_name, tol)


# ---------------------------------------------------------------------------
# parameter helpers
# ---------------------------------------------------------------------------

def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=DEFAULT_DTYPE), requires_grad=True)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    lim = float(np.sqrt(6.0 / (fan_in + fan_out)))
    shape = shape or (fan_in, fan_out)
    return rng.uniform(-lim, lim, size=shape).astype(DEFAULT_DTYPE)


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.zero_grad()
