import os
import subprocess
import sys

import numpy as np
import pytest

from kaprompt import _kernels_py, kernels


def _attention_reference(q, k, v, n_heads, scale):
    """Per-head loop with an explicit softmax; independent of both backends."""
    b, length, d = q.shape
    dh = d // n_heads
    out = np.zeros_like(q)
    for bi in range(b):
        for h in range(n_heads):
            sl = slice(h * dh, (h + 1) * dh)
            s = q[bi, :, sl] @ k[bi, :, sl].T * scale
            p = np.exp(s - s.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            out[bi, :, sl] = p @ v[bi, :, sl]
    return out


def test_attention_forward_matches_reference(backend):
    rng = np.random.default_rng(1)
    q, k, v = (rng.normal(size=(3, 6, 8)) for _ in range(3))
    out, probs = kernels.attention_forward(q, k, v, 2, 0.5)
    np.testing.assert_allclose(out, _attention_reference(q, k, v, 2, 0.5), rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, rtol=1e-13)


def test_layer_norm_forward_matches_reference(backend):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(7, 5))
    g, b = rng.normal(size=5), rng.normal(size=5)
    y, xhat, rstd = kernels.layer_norm_forward(x, g, b, 1e-5)
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    np.testing.assert_allclose(y, (x - mu) / np.sqrt(var + 1e-5) * g + b, rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(rstd, 1 / np.sqrt(var[:, 0] + 1e-5), rtol=1e-13)


def test_coverage_histogram_matches_loop(backend):
    rng = np.random.default_rng(3)
    rel, eff = rng.random((9, 6)), rng.random(6)
    expected = [sum(max(rel[i, j] - eff[j], 0.0) for j in range(6)) for i in range(9)]
    np.testing.assert_allclose(kernels.coverage_histogram(rel, eff), expected, rtol=1e-14)


@pytest.mark.skipif("cython" not in kernels.available_backends(), reason="extension not built")
def test_backends_agree():
    rng = np.random.default_rng(4)
    q, k, v, dout = (rng.normal(size=(4, 9, 16)) for _ in range(4))
    c, p = kernels.get_backend("cython"), _kernels_py
    for a, b in zip(c.attention_forward(q, k, v, 4, 0.5), p.attention_forward(q, k, v, 4, 0.5)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)
    _, probs = p.attention_forward(q, k, v, 4, 0.5)
    for a, b in zip(c.attention_backward(dout, q, k, v, probs, 4, 0.5),
                    p.attention_backward(dout, q, k, v, probs, 4, 0.5)):
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-13)
    x = rng.normal(size=(10, 16))
    g, bt = rng.normal(size=16), rng.normal(size=16)
    fc, fp = c.layer_norm_forward(x, g, bt, 1e-5), p.layer_norm_forward(x, g, bt, 1e-5)
    for a, b in zip(fc, fp):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)
    for a, b in zip(c.layer_norm_backward(x, fp[1], fp[2], g), p.layer_norm_backward(x, fp[1], fp[2], g)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)


def test_set_backend_round_trip():
    before = kernels.backend_name()
    previous = kernels.set_backend("python")
    assert previous == before
    assert kernels.backend_name() == "python"
    kernels.set_backend(before)
    with pytest.raises(ImportError):
        kernels.set_backend("fortran")


def test_env_var_forces_python_backend():
    code = "from kaprompt import kernels; print(kernels.backend_name())"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True,
                         env={**os.environ, "KAPROMPT_KERNELS": "python"})
    assert out.stdout.strip() == "python"

