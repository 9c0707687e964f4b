"""Dense-tensor reverse-mode differentiation plus an Adam optimizer.

numpy arrays hold the values; each op hand-writes its backward rule and the
whole set is validated against the central finite-difference oracle below.
float64 is the default dtype so those oracles stay tight; training code may
opt into float32 buffers.

Calling backward() twice without zeroing accumulates gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NoSupervisedPositionsError, ShapeError


class Tensor:
    """One node of the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=np.float64):
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out_data, parents, backward_fn):
    out = Tensor(out_data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor):
    """Populate grad buffers of every reachable requires_grad tensor."""
    if loss.data.shape != ():
        raise ShapeError("backward", f"loss must be scalar, got shape {loss.data.shape}")
    order = _topo_order(loss)
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _topo_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def zero_grad(params):
    for p in params:
        p.grad = None


# --- elementwise and structural ops --------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", f"{a.data.shape} vs {b.data.shape}") from None

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError("sub", f"{a.data.shape} vs {b.data.shape}") from None

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", f"{a.data.shape} vs {b.data.shape}") from None

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bw)


def scale(a, c):
    c = float(c)

    def bw(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), bw)


def matmul(a, b):
    ad_, bd = a.data, b.data
    if ad_.ndim < 2 or bd.ndim != ad_.ndim or ad_.shape[:-2] != bd.shape[:-2] \
            or ad_.shape[-1] != bd.shape[-2]:
        raise ShapeError("matmul", f"{ad_.shape} vs {bd.shape}")
    out = ad_ @ bd

    def bw(g):
        _accum(a, g @ bd.swapaxes(-1, -2))
        _accum(b, ad_.swapaxes(-1, -2) @ g)

    return _make(out, (a, b), bw)


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"{a.data.shape} -> {shape}") from None

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out, (a,), bw)


def transpose(a, axes):
    out = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, g.transpose(inverse))

    return _make(out, (a,), bw)


def concat(parts, axis):
    sizes = [p.data.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for part, piece in zip(parts, np.split(g, splits, axis=axis)):
            _accum(part, piece)

    return _make(out, tuple(parts), bw)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError("narrow", f"[{start}, {start + length}) out of {a.data.shape[axis]}")

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[index] = g
        _accum(a, buf)

    return _make(a.data[index], (a,), bw)


def sum_all(a):
    def bw(g):
        _accum(a, np.full(a.data.shape, g, dtype=a.data.dtype))

    return _make(np.asarray(a.data.sum()), (a,), bw)


def mean_all(a):
    return scale(sum_all(a), 1.0 / a.data.size)


def sum_axis(a, axis, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _make(out, (a,), bw)


# --- nonlinearities -------------------------------------------------------


def relu(a):
    mask = a.data > 0  # subgradient 0 at the kink
    out = np.where(mask, a.data, 0.0)

    def bw(g):
        _accum(a, g * mask)

    return _make(out, (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(a):
    # tanh approximation; backward differentiates the same approximation
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_K * x ** 3))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * x ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du
        _accum(a, g * d)

    return _make(out, (a,), bw)


def softmax(a, axis=-1):
    x = a.data
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError("softmax", f"axis {axis} invalid for shape {x.shape}")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - inner))

    return _make(y, (a,), bw)


def layer_norm(a, gamma, beta, axis=-1, eps=1e-12):
    """Normalize along one axis to zero mean / unit variance, then affine."""
    x = a.data
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError("layer_norm", f"axis {axis} invalid for shape {x.shape}")
    axis = axis % x.ndim
    n = x.shape[axis]
    if gamma.data.shape != (n,) or beta.data.shape != (n,):
        raise ShapeError("layer_norm",
                         f"gamma/beta {gamma.data.shape}/{beta.data.shape} vs axis size {n}")
    bshape = [1] * x.ndim
    bshape[axis] = n

    mu = x.mean(axis=axis, keepdims=True)
    centered = x - mu
    var = (centered ** 2).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        _accum(gamma, (g * xhat).sum(axis=reduce_axes))
        _accum(beta, g.sum(axis=reduce_axes))
        dxhat = g * gamma.data.reshape(bshape)
        m1 = dxhat.mean(axis=axis, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axis, keepdims=True)
        _accum(a, inv * (dxhat - m1 - xhat * m2))

    return _make(out, (a, gamma, beta), bw)


def embedding_lookup(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("embedding_lookup", f"table must be 2-d, got {table.data.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError("embedding_lookup",
                         f"ids outside [0, {table.data.shape[0]}) for table {table.data.shape}")
    out = table.data[ids]

    def bw(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))

    return _make(out, (table,), bw)


def dropout(a, p, seed=0, training=True):
    """Inverted dropout; identity when p == 0 or not training. The caller owns
    the per-call seed, which is what makes training replayable."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    keep = np.random.default_rng(seed).random(a.data.shape) >= p
    factor = 1.0 / (1.0 - p)
    out = np.where(keep, a.data * factor, 0.0)

    def bw(g):
        _accum(a, np.where(keep, g * factor, 0.0))

    return _make(out, (a,), bw)


def cross_entropy(logits, labels, ignore_index=-100):
    """Mean negative log-likelihood over positions whose label != ignore_index.

    logits: [..., n_classes]; labels: matching integer array.
    """
    x = logits.data
    if x.ndim < 2:
        raise ShapeError("cross_entropy", f"logits need a class axis, got shape {x.shape}")
    n_classes = x.shape[-1]
    flat = x.reshape(-1, n_classes)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != flat.shape[0]:
        raise ShapeError("cross_entropy", f"labels {y.shape} vs logits {x.shape}")
    valid = y != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise NoSupervisedPositionsError("every label equals the ignore index")
    picked = y[valid]
    if picked.min() < 0 or picked.max() >= n_classes:
        raise ShapeError("cross_entropy", f"label outside [0, {n_classes})")

    z = flat - flat.max(axis=1, keepdims=True)
    logprob = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logprob[valid, picked].sum() / n_valid

    def bw(g):
        d = np.zeros_like(flat)
        d[valid] = np.exp(logprob[valid])
        d[valid, picked] -= 1.0
        d /= n_valid
        _accum(logits, (float(g) * d).reshape(x.shape))

    return _make(np.asarray(loss), (logits,), bw)


# --- optimizer ------------------------------------------------------------


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                     m=[np.zeros_like(p.data) for p in params],
                     v=[np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, in place on params."""
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ShapeError("adam_step", "params/grads/state lengths differ")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError("adam_step", f"grad {g.shape} vs param {p.data.shape}")
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --- gradient oracle --------------------------------------------------------


def finite_diff_check(f, x: Tensor, h=1e-5) -> float:
    """Max relative deviation between reverse-mode and central-difference
    gradients of the scalar function f at x. f must rebuild its graph on each
    call and must not mutate x."""
    if h <= 0:
        raise ValueError("h must be positive")
    x.data = np.ascontiguousarray(x.data)  # the loop below perturbs a flat view
    had_grad = x.requires_grad
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.data.shape != ():
        raise ShapeError("finite_diff_check", "f must return a scalar")
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    worst = 0.0
    x.requires_grad = False  # skip graph wiring while probing numerically
    flat = x.data.reshape(-1)
    flat_grad = analytic.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        hi = float(f(x).data)
        flat[i] = original - h
        lo = float(f(x).data)
        flat[i] = original
        numeric = (hi - lo) / (2.0 * h)
        err = abs(flat_grad[i] - numeric) / max(abs(flat_grad[i]), abs(numeric), 1.0)
        worst = max(worst, err)
    x.requires_grad = had_grad
    return worst
