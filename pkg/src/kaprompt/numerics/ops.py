"""Differentiable operations on ``Tensor``.

Every op accepts Tensors (or array-likes, treated as constants) and returns a
Tensor. Each op's ``vjp`` closure maps the upstream gradient to one gradient
per input; ``None`` marks an input that needs none.
"""
from __future__ import annotations

import math

import numpy as np

from kaprompt import kernels
from kaprompt.errors import DegenerateVectorError, DimensionError, LabelIndexError
from kaprompt.numerics.tensor import Tensor, as_tensor, make_result

NORM_EPS = 1e-12
LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product with trailing-dimension broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return make_result(a.data * b.data, (a, b),
                       lambda g: (_unbroadcast(g * b.data, a.shape),
                                  _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        out = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform") from None

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), vjp)


def concat(tensors, axis: int = -2) -> Tensor:
    """Concatenate along ``axis`` (rows by default)."""
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise DimensionError("concat: no inputs")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} do not conform on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum(sizes)[:-1]
    return make_result(np.concatenate([t.data for t in ts], axis=ax), ts,
                       lambda g: tuple(np.split(g, bounds, axis=ax)))


def index(a, key) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, key, g)
        return (z,)

    return make_result(np.array(a.data[key]), (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return make_result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(out, (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,))


def min_zero(a) -> Tensor:
    """min(x, 0) elementwise; subgradient 0 at the kink."""
    a = as_tensor(a)
    return make_result(np.minimum(a.data, 0.0), (a,), lambda g: (g * (a.data < 0.0),))


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make_result(out, (a,), vjp)


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return make_result(y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return make_result(out, (a,), lambda g: (g - sm * g.sum(axis=-1, keepdims=True),))


def _row_norms(op, x):
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    bad = np.argwhere(norms[..., 0] < NORM_EPS)
    if bad.size:
        row = tuple(int(i) for i in bad[0])
        row = row[0] if len(row) == 1 else row
        raise DegenerateVectorError(f"{op}: row {row} has norm below {NORM_EPS}")
    return norms


def l2_normalize_rows(a) -> Tensor:
    a = as_tensor(a)
    norms = _row_norms("l2_normalize_rows", a.data)
    y = a.data / norms
    return make_result(y, (a,), lambda g: ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norms,))


def cosine_similarity(a, b) -> Tensor:
    """Cosine of the angle between two D-vectors; differentiable in both."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine_similarity: shapes {a.shape} and {b.shape} do not conform")
    na = math.sqrt(float(a.data @ a.data))
    nb = math.sqrt(float(b.data @ b.data))
    if na < NORM_EPS or nb < NORM_EPS:
        raise DegenerateVectorError(f"cosine_similarity: vector norm below {NORM_EPS}")
    cos = float(a.data @ b.data) / (na * nb)

    def vjp(g):
        ga = g * (b.data / (na * nb) - cos * a.data / (na * na))
        gb = g * (a.data / (na * nb) - cos * b.data / (nb * nb))
        return ga, gb

    return make_result(np.array(cos), (a, b), vjp)


def cross_entropy(logits, labels) -> Tensor:
    """-log softmax(logits)[label]; for a (B, C) batch, the mean over rows."""
    z = as_tensor(logits)
    single = z.ndim == 1
    logit2 = z.data[None, :] if single else z.data
    if logit2.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 1-D or 2-D, got {z.shape}")
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = logit2.shape
    if y.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} logit rows but labels shape {y.shape}")
    if np.any(y < 0) or np.any(y >= c):
        raise LabelIndexError(f"cross_entropy: label out of range [0, {c})")
    m = logit2.max(axis=1, keepdims=True)
    shifted = logit2 - m
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    losses = lse - shifted[rows, y]
    out = losses.mean()

    def vjp(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, y] -= 1.0
        p *= g / n
        return (p[0] if single else p,)

    return make_result(np.array(out), (z,), vjp)


def layer_norm(a, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis, then apply the affine ``gamma``/``beta``."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: input {a.shape} with gamma {gamma.shape}, beta {beta.shape}")
    y, xhat, rstd = kernels.layer_norm_forward(a.data.reshape(-1, d), gamma.data, beta.data, eps)

    def vjp(g):
        dx, dg, db = kernels.layer_norm_backward(g.reshape(-1, d), xhat, rstd, gamma.data)
        return dx.reshape(a.shape), dg, db

    return make_result(y.reshape(a.shape), (a, gamma, beta), vjp)


def attention(q, k, v, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention over (B, L, D) inputs."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(f"attention: shapes {q.shape}, {k.shape}, {v.shape} do not conform")
    if q.shape[-1] % n_heads:
        raise DimensionError(f"attention: width {q.shape[-1]} not divisible by {n_heads} heads")
    sc = 1.0 / math.sqrt(q.shape[-1] // n_heads)
    out, probs = kernels.attention_forward(q.data, k.data, v.data, n_heads, sc)
    return make_result(out, (q, k, v),
                       lambda g: kernels.attention_backward(g, q.data, k.data, v.data, probs, n_heads, sc))


def attention_probs(q, k, n_heads: int) -> np.ndarray:
    """Attention weights (B, H, L, L) for inspection; not differentiable."""
    q, k = as_tensor(q), as_tensor(k)
    sc = 1.0 / math.sqrt(q.shape[-1] // n_heads)
    _, probs = kernels.attention_forward(q.data, k.data, np.zeros_like(q.data), n_heads, sc)
    return probs
