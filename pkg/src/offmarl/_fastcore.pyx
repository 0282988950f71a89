# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled batch kernels for the dense network core.

Same surface as ``offmarl._kernels_numpy`` (forward_batch, backward_batch,
adam_step) with BLAS-backed matmuls and fused bias/ReLU/Adam loops. Arrays
are C-contiguous float64 throughout.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

BACKEND_NAME = "cython"

cdef char TRANS_N = 78  # 'N'
cdef char TRANS_T = 84  # 'T'
cdef double ONE = 1.0
cdef double ZERO = 0.0


# BLAS is column-major; each helper computes the transposed product so the
# C-order result buffer comes out right.

cdef void _mm_nn(double[:, ::1] a, double[:, ::1] b, double[:, ::1] c) noexcept nogil:
    # c (m,n) = a (m,k) @ b (k,n)
    cdef int m = a.shape[0], k = a.shape[1], n = b.shape[1]
    dgemm(&TRANS_N, &TRANS_N, &n, &m, &k, &ONE,
          &b[0, 0], &n, &a[0, 0], &k, &ZERO, &c[0, 0], &n)


cdef void _mm_tn(double[:, ::1] a, double[:, ::1] b, double[:, ::1] c) noexcept nogil:
    # c (m,n) = a.T @ b with a (k,m), b (k,n)
    cdef int k = a.shape[0], m = a.shape[1], n = b.shape[1]
    dgemm(&TRANS_N, &TRANS_T, &n, &m, &k, &ONE,
          &b[0, 0], &n, &a[0, 0], &m, &ZERO, &c[0, 0], &n)


cdef void _mm_nt(double[:, ::1] a, double[:, ::1] b, double[:, ::1] c) noexcept nogil:
    # c (m,n) = a @ b.T with a (m,k), b (n,k)
    cdef int m = a.shape[0], k = a.shape[1], n = b.shape[0]
    dgemm(&TRANS_T, &TRANS_N, &n, &m, &k, &ONE,
          &b[0, 0], &k, &a[0, 0], &k, &ZERO, &c[0, 0], &n)


cdef void _add_bias_relu(double[:, ::1] z, double[::1] b, bint relu) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double v
    for i in range(z.shape[0]):
        for j in range(z.shape[1]):
            v = z[i, j] + b[j]
            if relu and v < 0.0:
                v = 0.0
            z[i, j] = v


cdef void _colsum(double[:, ::1] g, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i, j
    for j in range(out.shape[0]):
        out[j] = 0.0
    for i in range(g.shape[0]):
        for j in range(g.shape[1]):
            out[j] += g[i, j]


cdef void _relu_mask(double[:, ::1] g, double[:, ::1] act) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(g.shape[0]):
        for j in range(g.shape[1]):
            if act[i, j] <= 0.0:
                g[i, j] = 0.0


def forward_batch(object x, list weights, list biases):
    """See offmarl._kernels_numpy.forward_batch."""
    cdef cnp.ndarray h = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n_layers = len(weights)
    cdef Py_ssize_t last = n_layers - 1
    cdef Py_ssize_t layer
    cdef cnp.ndarray w, z
    acts = []
    for layer in range(n_layers):
        w = weights[layer]
        z = np.empty((h.shape[0], w.shape[1]), dtype=np.float64)
        _mm_nn(h, w, z)
        _add_bias_relu(z, biases[layer], layer < last)
        acts.append(z)
        h = z
    return acts


def backward_batch(object x, list acts, list weights, object grad_out):
    """See offmarl._kernels_numpy.backward_batch."""
    cdef cnp.ndarray x_arr = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray g = np.ascontiguousarray(grad_out, dtype=np.float64)
    cdef Py_ssize_t n_layers = len(weights)
    cdef Py_ssize_t layer
    cdef cnp.ndarray inp, w, dw, db, g_prev
    d_weights = [None] * n_layers
    d_biases = [None] * n_layers
    for layer in range(n_layers - 1, -1, -1):
        inp = x_arr if layer == 0 else <cnp.ndarray> acts[layer - 1]
        w = weights[layer]
        dw = np.empty((inp.shape[1], g.shape[1]), dtype=np.float64)
        _mm_tn(inp, g, dw)
        db = np.empty(g.shape[1], dtype=np.float64)
        _colsum(g, db)
        d_weights[layer] = dw
        d_biases[layer] = db
        if layer > 0:
            g_prev = np.empty((g.shape[0], w.shape[0]), dtype=np.float64)
            _mm_nt(g, w, g_prev)
            _relu_mask(g_prev, <cnp.ndarray> acts[layer - 1])
            g = g_prev
    return d_weights, d_biases


cdef void _adam_one(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                    double lr, double beta1, double beta2, double eps,
                    double corr1, double corr2) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(p.shape[0]):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * (g[i] * g[i])
        p[i] -= lr * (m[i] / corr1) / (sqrt(v[i] / corr2) + eps)


def adam_step(list params, list grads, list first_moments, list second_moments,
              long step, double lr, double beta1, double beta2, double eps):
    """See offmarl._kernels_numpy.adam_step."""
    cdef double corr1 = 1.0 - beta1 ** step
    cdef double corr2 = 1.0 - beta2 ** step
    cdef Py_ssize_t i
    for i in range(len(params)):
        _adam_one(params[i].ravel(), np.ascontiguousarray(grads[i]).ravel(),
                  first_moments[i].ravel(), second_moments[i].ravel(),
                  lr, beta1, beta2, eps, corr1, corr2)
