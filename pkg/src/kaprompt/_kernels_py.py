"""Pure numpy implementations of the hot kernels.

Mirrors ``_kernels_c.pyx`` signature for signature; used when the compiled
extension is unavailable or when ``KAPROMPT_KERNELS=python``.
"""
import numpy as np


def _split_heads(x, n_heads):
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def attention_forward(q, k, v, n_heads, scale):
    """Multi-head softmax attention over (B, L, D) inputs.

    Returns the merged output (B, L, D) and the attention probabilities
    (B, H, L, L), which the backward pass reuses.
    """
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = _merge_heads(probs @ vh)
    return np.ascontiguousarray(out), probs


def attention_backward(dout, q, k, v, probs, n_heads, scale):
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    douth = _split_heads(dout, n_heads)
    dv = probs.transpose(0, 1, 3, 2) @ douth
    dprobs = douth @ vh.transpose(0, 1, 3, 2)
    dscores = probs * (dprobs - (probs * dprobs).sum(axis=-1, keepdims=True))
    dq = (dscores @ kh) * scale
    dk = (dscores.transpose(0, 1, 3, 2) @ qh) * scale
    return (np.ascontiguousarray(_merge_heads(dq)),
            np.ascontiguousarray(_merge_heads(dk)),
            np.ascontiguousarray(_merge_heads(dv)))


def layer_norm_forward(x, gamma, beta, eps):
    """Row-wise layer norm on a 2-D array; returns (y, xhat, rstd)."""
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_backward(dy, xhat, rstd, gamma):
    dxhat = dy * gamma
    n = xhat.shape[1]
    mean_d = dxhat.sum(axis=1, keepdims=True) / n
    mean_dx = (dxhat * xhat).sum(axis=1, keepdims=True) / n
    dx = rstd[:, None] * (dxhat - mean_d - xhat * mean_dx)
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def coverage_histogram(relation, effect):
    """H_i = sum_j max(S_ij - v_j, 0)."""
    return np.maximum(relation - effect[None, :], 0.0).sum(axis=1)
