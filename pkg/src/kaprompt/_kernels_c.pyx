# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the backbone's inner loops and the coverage search.

Same signatures and semantics as ``kaprompt._kernels_py``. Loops run in a
fixed order, so results are deterministic (though not bit-equal to the numpy
fallback, which sums in BLAS order).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()


def attention_forward(const double[:, :, ::1] q, const double[:, :, ::1] k,
                      const double[:, :, ::1] v, int n_heads, double scale):
    cdef Py_ssize_t B = q.shape[0], L = q.shape[1], D = q.shape[2]
    cdef Py_ssize_t dh = D // n_heads
    out_arr = np.zeros((B, L, D), dtype=np.float64)
    probs_arr = np.empty((B, n_heads, L, L), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, :, :, ::1] probs = probs_arr
    cdef Py_ssize_t b, h, i, j, d, off
    cdef double s, mx, tot, p
    with nogil:
        for b in range(B):
            for h in range(n_heads):
                off = h * dh
                for i in range(L):
                    mx = -1e300
                    for j in range(L):
                        s = 0.0
                        for d in range(dh):
                            s = s + q[b, i, off + d] * k[b, j, off + d]
                        s = s * scale
                        probs[b, h, i, j] = s
                        if s > mx:
                            mx = s
                    tot = 0.0
                    for j in range(L):
                        p = exp(probs[b, h, i, j] - mx)
                        probs[b, h, i, j] = p
                        tot = tot + p
                    for j in range(L):
                        probs[b, h, i, j] = probs[b, h, i, j] / tot
                    for j in range(L):
                        p = probs[b, h, i, j]
                        for d in range(dh):
                            out[b, i, off + d] += p * v[b, j, off + d]
    return out_arr, probs_arr


def attention_backward(const double[:, :, ::1] dout, const double[:, :, ::1] q,
                       const double[:, :, ::1] k, const double[:, :, ::1] v,
                       const double[:, :, :, ::1] probs, int n_heads, double scale):
    cdef Py_ssize_t B = q.shape[0], L = q.shape[1], D = q.shape[2]
    cdef Py_ssize_t dh = D // n_heads
    dq_arr = np.zeros((B, L, D), dtype=np.float64)
    dk_arr = np.zeros((B, L, D), dtype=np.float64)
    dv_arr = np.zeros((B, L, D), dtype=np.float64)
    dp_arr = np.empty(L, dtype=np.float64)
    cdef double[:, :, ::1] dq = dq_arr
    cdef double[:, :, ::1] dk = dk_arr
    cdef double[:, :, ::1] dv = dv_arr
    cdef double[::1] dp = dp_arr
    cdef Py_ssize_t b, h, i, j, d, off
    cdef double s, rowdot, p, ds, g
    with nogil:
        for b in range(B):
            for h in range(n_heads):
                off = h * dh
                for i in range(L):
                    rowdot = 0.0
                    for j in range(L):
                        s = 0.0
                        p = probs[b, h, i, j]
                        for d in range(dh):
                            g = dout[b, i, off + d]
                            s = s + g * v[b, j, off + d]
                            dv[b, j, off + d] += p * g
                        dp[j] = s
                        rowdot = rowdot + p * s
                    for j in range(L):
                        ds = probs[b, h, i, j] * (dp[j] - rowdot) * scale
                        for d in range(dh):
                            dq[b, i, off + d] += ds * k[b, j, off + d]
                            dk[b, j, off + d] += ds * q[b, i, off + d]
    return dq_arr, dk_arr, dv_arr


def layer_norm_forward(const double[:, ::1] x, const double[::1] gamma,
                       const double[::1] beta, double eps):
    cdef Py_ssize_t N = x.shape[0], D = x.shape[1]
    y_arr = np.empty((N, D), dtype=np.float64)
    xhat_arr = np.empty((N, D), dtype=np.float64)
    rstd_arr = np.empty(N, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef Py_ssize_t n, d
    cdef double mean, var, c, r
    with nogil:
        for n in range(N):
            mean = 0.0
            for d in range(D):
                mean = mean + x[n, d]
            mean = mean / D
            var = 0.0
            for d in range(D):
                c = x[n, d] - mean
                var = var + c * c
            var = var / D
            r = 1.0 / sqrt(var + eps)
            rstd[n] = r
            for d in range(D):
                c = (x[n, d] - mean) * r
                xhat[n, d] = c
                y[n, d] = c * gamma[d] + beta[d]
    return y_arr, xhat_arr, rstd_arr


def layer_norm_backward(const double[:, ::1] dy, const double[:, ::1] xhat,
                        const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t N = dy.shape[0], D = dy.shape[1]
    dx_arr = np.empty((N, D), dtype=np.float64)
    dg_arr = np.zeros(D, dtype=np.float64)
    db_arr = np.zeros(D, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dg = dg_arr
    cdef double[::1] db = db_arr
    cdef Py_ssize_t n, d
    cdef double m1, m2, t
    with nogil:
        for n in range(N):
            m1 = 0.0
            m2 = 0.0
            for d in range(D):
                t = dy[n, d] * gamma[d]
                m1 = m1 + t
                m2 = m2 + t * xhat[n, d]
                dg[d] += dy[n, d] * xhat[n, d]
                db[d] += dy[n, d]
            m1 = m1 / D
            m2 = m2 / D
            for d in range(D):
                dx[n, d] = rstd[n] * (dy[n, d] * gamma[d] - m1 - xhat[n, d] * m2)
    return dx_arr, dg_arr, db_arr


def coverage_histogram(const double[:, ::1] relation, const double[::1] effect):
    cdef Py_ssize_t R = relation.shape[0], N = relation.shape[1]
    h_arr = np.zeros(R, dtype=np.float64)
    cdef double[::1] h = h_arr
    cdef Py_ssize_t i, j
    cdef double gain, acc
    with nogil:
        for i in range(R):
            acc = 0.0
            for j in range(N):
                gain = relation[i, j] - effect[j]
                if gain > 0.0:
                    acc = acc + gain
            h[i] = acc
    return h_arr
