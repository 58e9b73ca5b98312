"""Dense-tensor engine with reverse-mode differentiation.

Just enough machinery for a small transformer, an adaptive-norm MLP sampler
and the pairwise-distance losses: numpy holds the raw arrays, this module
owns the graph. Ops record a backward closure on their output; ``backward``
runs the closures once each in reverse topological order, accumulating into
``.grad`` additively so fan-out works.

Conventions:
  * row-major float32 by default, float64 for gradient-check work;
  * shapes are validated at op boundaries (ShapeError);
  * intermediate results are never mutated after creation, only grad
    buffers are written, and only by a single backward traversal.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / eval paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """n-d array plus optional gradient buffer and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_children", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._children = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # operator sugar; the heavy lifting lives in module functions below
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, other)
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -other)
        return add(self, mul_scalar(_lift(other), -1.0))

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, other)
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, key):
        return getitem(self, key)

    def backward(self):
        backward(self)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data, children, backward_fn):
    """Wrap an op result, recording the edge only when a grad path exists."""
    out = Tensor(data)
    if _grad_enabled:
        tracked = tuple(c for c in children if c.requires_grad or c._children)
        if tracked:
            out.requires_grad = True
            out._children = tracked
            out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum a broadcasted gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    data = a.data + b.data

    def _bw(out):
        g = out.grad
        if a.requires_grad or a._children:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad or b._children:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), _bw)


def mul(a, b):
    data = a.data * b.data

    def _bw(out):
        g = out.grad
        if a.requires_grad or a._children:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad or b._children:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), _bw)


def mul_scalar(a, s):
    s = float(s)

    def _bw(out):
        a._accumulate(s * out.grad)

    return _make(a.data * s, (a,), _bw)


def add_scalar(a, s):
    def _bw(out):
        a._accumulate(out.grad)

    return _make(a.data + float(s), (a,), _bw)


def pow_scalar(a, p):
    p = float(p)
    data = a.data ** p

    def _bw(out):
        a._accumulate(out.grad * p * a.data ** (p - 1.0))

    return _make(data, (a,), _bw)


def exp(a):
    data = np.exp(a.data)

    def _bw(out):
        a._accumulate(out.grad * data)

    return _make(data, (a,), _bw)


def log(a):
    data = np.log(a.data)

    def _bw(out):
        a._accumulate(out.grad / a.data)

    return _make(data, (a,), _bw)


def sigmoid(a):
    data = 1.0 / (1.0 + np.exp(-a.data))

    def _bw(out):
        a._accumulate(out.grad * data * (1.0 - data))

    return _make(data, (a,), _bw)


def silu(a):
    """x * sigmoid(x)."""
    sig = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * sig

    def _bw(out):
        a._accumulate(out.grad * sig * (1.0 + a.data * (1.0 - sig)))

    return _make(data, (a,), _bw)


def abs_(a):
    data = np.abs(a.data)

    def _bw(out):
        a._accumulate(out.grad * np.sign(a.data))

    return _make(data, (a,), _bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_(a):
    def _bw(out):
        a._accumulate(np.full(a.shape, out.grad, dtype=a.dtype))

    return _make(a.data.sum(), (a,), _bw)


def mean(a):
    n = a.data.size

    def _bw(out):
        a._accumulate(np.full(a.shape, out.grad / n, dtype=a.dtype))

    return _make(a.data.mean(), (a,), _bw)


def alpha_norm_pow(v, alpha):
    """Row-wise |v|^alpha over the last axis: (sum v_i^2)^(alpha/2).

    Backward uses alpha * |v|^(alpha-2) * v. At |v| = 0 the map is
    subdifferentiable only for alpha >= 1, where 0 is a valid choice; for
    alpha < 1 the directional derivatives are unbounded, so the backward
    emits NaN there instead of inventing a finite value. Rows merely near
    zero produce the honest |v|^(alpha-1) magnitudes either way.
    """
    alpha = float(alpha)
    sq = np.sum(v.data * v.data, axis=-1)
    data = sq ** (alpha / 2.0)
    at_zero = 0.0 if alpha >= 1.0 else np.nan

    def _bw(out):
        with np.errstate(divide="ignore", invalid="ignore"):
            coeff = alpha * sq ** (alpha / 2.0 - 1.0)
            coeff = np.where(sq == 0.0, at_zero, coeff)
            v._accumulate(out.grad[..., None] * coeff[..., None] * v.data)

    return _make(data, (v,), _bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product, optionally batched; batch dims must match exactly."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def _bw(out):
        g = out.grad
        if a.requires_grad or a._children:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad or b._children:
            b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(data, (a, b), _bw)


def linear(x, w, b=None):
    """x @ w (+ b) where x is [..., k], w is [k, n], b is [n]."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: {x.shape} @ {w.shape}")
    data = x.data @ w.data
    if b is not None:
        data = data + b.data

    def _bw(out):
        g = out.grad
        if x.requires_grad or x._children:
            x._accumulate(g @ w.data.T)
        if w.requires_grad or w._children:
            w._accumulate(x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
        if b is not None and (b.requires_grad or b._children):
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    children = (x, w) if b is None else (x, w, b)
    return _make(data, children, _bw)


def layer_norm(x, gamma=None, beta=None, eps=1e-6):
    """Normalize over the last axis, then an optional affine map.

    gamma/beta may be None (plain normalization, as in the adaptive-norm
    sampler blocks where modulation supplies the affine part).
    """
    if eps <= 0:
        raise ShapeError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gamma is not None and gamma.shape != (d,):
        raise ShapeError(f"layer_norm: gamma shape {gamma.shape} vs feature dim {d}")
    if beta is not None and beta.shape != (d,):
        raise ShapeError(f"layer_norm: beta shape {beta.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat
    if gamma is not None:
        data = data * gamma.data
    if beta is not None:
        data = data + beta.data

    def _bw(out):
        g = out.grad
        gx = g * gamma.data if gamma is not None else g
        if x.requires_grad or x._children:
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((gx - m1 - xhat * m2) * inv)
        if gamma is not None and (gamma.requires_grad or gamma._children):
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta is not None and (beta.requires_grad or beta._children):
            beta._accumulate(g.reshape(-1, d).sum(axis=0))

    children = [x]
    if gamma is not None:
        children.append(gamma)
    if beta is not None:
        children.append(beta)
    return _make(data, tuple(children), _bw)


def softmax_lastaxis(x):
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def _bw(out):
        g = out.grad
        dot = (g * data).sum(axis=-1, keepdims=True)
        x._accumulate((g - dot) * data)

    return _make(data, (x,), _bw)


def logsumexp_lastaxis(x):
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    data = (m + np.log(s)).squeeze(-1)

    def _bw(out):
        x._accumulate(out.grad[..., None] * (e / s))

    return _make(data, (x,), _bw)


# ---------------------------------------------------------------------------
# shape manipulation / indexing
# ---------------------------------------------------------------------------

def reshape(a, shape):
    orig = a.shape

    def _bw(out):
        a._accumulate(out.grad.reshape(orig))

    return _make(a.data.reshape(shape), (a,), _bw)


def swapaxes(a, ax1, ax2):
    def _bw(out):
        a._accumulate(np.swapaxes(out.grad, ax1, ax2))

    return _make(np.swapaxes(a.data, ax1, ax2), (a,), _bw)


def getitem(a, key):
    data = a.data[key]

    def _bw(out):
        g = np.zeros_like(a.data)
        np.add.at(g, key, out.grad)
        a._accumulate(g)

    return _make(data, (a,), _bw)


def concat(tensors, axis):
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bw(out):
        g = out.grad
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._children:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(data, tuple(tensors), _bw)


def embedding(table, idx):
    """Row lookup table[idx]; scatter-add on the way back."""
    idx = np.asarray(idx)
    data = table.data[idx]

    def _bw(out):
        g = np.zeros_like(table.data)
        np.add.at(g, idx, out.grad)
        table._accumulate(g)

    return _make(data, (table,), _bw)


def gather_rows(x, mask):
    """Select rows of a [B, T, d] tensor where a boolean [B, T] mask is set."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:2]:
        raise ShapeError(f"gather_rows: mask {mask.shape} vs tensor {x.shape}")
    data = x.data[mask]

    def _bw(out):
        g = np.zeros_like(x.data)
        g[mask] = out.grad
        x._accumulate(g)

    return _make(data, (x,), _bw)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def attention(q, k, v, n_heads, mode="bidirectional"):
    """Multi-head scaled dot-product attention over [T, d] or [B, T, d].

    causal mode adds a large negative bias above the diagonal so position i
    never sees j > i; bidirectional applies no mask.
    """
    if mode not in ("causal", "bidirectional"):
        raise ShapeError(f"attention: unknown mode {mode!r}")
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention: q/k/v shapes differ: {q.shape} {k.shape} {v.shape}")
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (reshape(t, (1,) + t.shape) for t in (q, k, v))
    B, T, d = q.shape
    if d % n_heads != 0:
        raise ShapeError(f"attention: width {d} not divisible by {n_heads} heads")
    dh = d // n_heads

    def split(t):
        return swapaxes(reshape(t, (B, T, n_heads, dh)), 1, 2)  # [B, H, T, dh]

    qh, kh, vh = split(q), split(k), split(v)
    scores = mul_scalar(matmul(qh, swapaxes(kh, -1, -2)), 1.0 / np.sqrt(dh))
    if mode == "causal":
        bias = np.triu(np.full((T, T), -1e9, dtype=scores.dtype), k=1)
        scores = add(scores, Tensor(bias))
    probs = softmax_lastaxis(scores)
    out = reshape(swapaxes(matmul(probs, vh), 1, 2), (B, T, d))
    if squeeze:
        out = reshape(out, (T, d))
    return out


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------

def backward(loss):
    """Reverse-mode sweep from a scalar seed.

    Visits every reachable node exactly once in reverse topological order;
    gradients accumulate additively across fan-out.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward seed must be a scalar, got shape {loss.data.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for child in node._children:
            if id(child) not in visited:
                stack.append((child, False))

    loss.grad = np.ones((), dtype=loss.dtype)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node)
            # free graph-internal buffers early; leaves keep their grads
            node._backward = None
