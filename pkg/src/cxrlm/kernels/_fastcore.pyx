# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: nearest-code search, fused row softmax
cross-entropy, fused Adam update, fused GELU / row softmax / layer norm.
Signatures mirror kernels.reference."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt, tanh

cnp.import_array()

cdef double GELU_C = 0.7978845608028654  # sqrt(2/pi)


def nearest_codes(double[:, ::1] latents, double[:, ::1] codes):
    cdef Py_ssize_t n = latents.shape[0]
    cdef Py_ssize_t k = codes.shape[0]
    cdef Py_ssize_t d = latents.shape[1]
    if codes.shape[1] != d:
        raise ValueError(f"latents ({n}, {d}) vs codes ({k}, {codes.shape[1]})")
    if k == 0:
        raise ValueError("empty codebook")
    out = np.empty(n, dtype=np.int64)
    cdef long long[::1] out_v = out
    cdef Py_ssize_t i, j, c
    cdef double best, dist, diff
    cdef Py_ssize_t best_idx
    for i in range(n):
        best = -1.0
        best_idx = 0
        for c in range(k):
            dist = 0.0
            for j in range(d):
                diff = latents[i, j] - codes[c, j]
                dist += diff * diff
            # strict < keeps the lowest index on ties
            if best < 0.0 or dist < best:
                best = dist
                best_idx = c
        out_v[i] = best_idx
    return out


def softmax_xent(double[:, ::1] logits, long long[::1] targets):
    cdef Py_ssize_t n = logits.shape[0]
    cdef Py_ssize_t v = logits.shape[1]
    if targets.shape[0] != n:
        raise ValueError(f"logits ({n}, {v}) vs targets ({targets.shape[0]},)")
    losses = np.empty(n, dtype=np.float64)
    probs = np.empty((n, v), dtype=np.float64)
    cdef double[::1] losses_v = losses
    cdef double[:, ::1] probs_v = probs
    cdef Py_ssize_t i, j
    cdef double mx, denom, e
    for i in range(n):
        mx = logits[i, 0]
        for j in range(1, v):
            if logits[i, j] > mx:
                mx = logits[i, j]
        denom = 0.0
        for j in range(v):
            e = exp(logits[i, j] - mx)
            probs_v[i, j] = e
            denom += e
        for j in range(v):
            probs_v[i, j] /= denom
        losses_v[i] = log(denom) - (logits[i, targets[i]] - mx)
    return losses, probs


def softmax_xent_grad(double[:, ::1] probs, long long[::1] targets, double[::1] upstream):
    cdef Py_ssize_t n = probs.shape[0]
    cdef Py_ssize_t v = probs.shape[1]
    grad = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] grad_v = grad
    cdef Py_ssize_t i, j
    cdef double u
    for i in range(n):
        u = upstream[i]
        for j in range(v):
            grad_v[i, j] = probs[i, j] * u
        grad_v[i, targets[i]] -= u
    return grad


def adam_update(double[::1] param, double[::1] grad, double[::1] m, double[::1] v,
                long long step, double lr, double beta1, double beta2, double eps):
    cdef Py_ssize_t n = param.shape[0]
    cdef double c1 = 1.0 - beta1 ** step
    cdef double c2 = 1.0 - beta2 ** step
    cdef Py_ssize_t i
    cdef double g, m_hat, v_hat
    for i in range(n):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        m_hat = m[i] / c1
        v_hat = v[i] / c2
        param[i] -= lr * m_hat / (sqrt(v_hat) + eps)


def gelu_fwd(double[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    y = np.empty(n, dtype=np.float64)
    t = np.empty(n, dtype=np.float64)
    cdef double[::1] y_v = y
    cdef double[::1] t_v = t
    cdef Py_ssize_t i
    cdef double xi, ti
    for i in range(n):
        xi = x[i]
        ti = tanh(GELU_C * (xi + 0.044715 * xi * xi * xi))
        t_v[i] = ti
        y_v[i] = 0.5 * xi * (1.0 + ti)
    return y, t


def gelu_bwd(double[::1] g, double[::1] x, double[::1] t):
    cdef Py_ssize_t n = x.shape[0]
    d = np.empty(n, dtype=np.float64)
    cdef double[::1] d_v = d
    cdef Py_ssize_t i
    cdef double xi, ti
    for i in range(n):
        xi = x[i]
        ti = t[i]
        d_v[i] = g[i] * (0.5 * (1.0 + ti)
                         + 0.5 * xi * (1.0 - ti * ti) * GELU_C * (1.0 + 0.134145 * xi * xi))
    return d


def softmax_rows(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t t = x.shape[1]
    y = np.empty((n, t), dtype=np.float64)
    cdef double[:, ::1] y_v = y
    cdef Py_ssize_t i, j
    cdef double mx, denom
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, t):
            if x[i, j] > mx:
                mx = x[i, j]
        denom = 0.0
        for j in range(t):
            y_v[i, j] = exp(x[i, j] - mx)
            denom += y_v[i, j]
        for j in range(t):
            y_v[i, j] /= denom
    return y


def softmax_rows_grad(double[:, ::1] g, double[:, ::1] y):
    cdef Py_ssize_t n = g.shape[0]
    cdef Py_ssize_t t = g.shape[1]
    out = np.empty((n, t), dtype=np.float64)
    cdef double[:, ::1] out_v = out
    cdef Py_ssize_t i, j
    cdef double inner
    for i in range(n):
        inner = 0.0
        for j in range(t):
            inner += g[i, j] * y[i, j]
        for j in range(t):
            out_v[i, j] = (g[i, j] - inner) * y[i, j]
    return out


def layer_norm_fwd(double[:, ::1] x, double[::1] gain, double[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    y = np.empty((n, d), dtype=np.float64)
    xhat = np.empty((n, d), dtype=np.float64)
    inv = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] y_v = y
    cdef double[:, ::1] xh_v = xhat
    cdef double[::1] inv_v = inv
    cdef Py_ssize_t i, j
    cdef double mu, var, diff, s
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            diff = x[i, j] - mu
            xh_v[i, j] = diff
            var += diff * diff
        var /= d
        s = 1.0 / sqrt(var + eps)
        inv_v[i] = s
        for j in range(d):
            xh_v[i, j] *= s
            y_v[i, j] = gain[j] * xh_v[i, j] + bias[j]
    return y, xhat, inv


def layer_norm_bwd(double[:, ::1] g, double[:, ::1] xhat, double[::1] inv, double[::1] gain):
    cdef Py_ssize_t n = g.shape[0]
    cdef Py_ssize_t d = g.shape[1]
    dx = np.empty((n, d), dtype=np.float64)
    dgain = np.zeros(d, dtype=np.float64)
    dbias = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] dx_v = dx
    cdef double[::1] dgain_v = dgain
    cdef double[::1] dbias_v = dbias
    cdef Py_ssize_t i, j
    cdef double m1, m2, gx
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            gx = g[i, j] * gain[j]
            dx_v[i, j] = gx
            m1 += gx
            m2 += gx * xhat[i, j]
            dgain_v[j] += g[i, j] * xhat[i, j]
            dbias_v[j] += g[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            dx_v[i, j] = (dx_v[i, j] - m1 - xhat[i, j] * m2) * inv[i]
    return dx, dgain, dbias
