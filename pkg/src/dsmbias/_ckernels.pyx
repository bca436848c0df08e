# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused single-pass mixture kernels; same contracts as ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY, M_PI

cnp.import_array()


cdef void _log_comps(const double[:, ::1] x, Py_ssize_t i, const double[:, ::1] means,
                     const double[:, ::1] var, const double[::1] log_w,
                     const double[::1] log_norm, double* out) noexcept nogil:
    cdef Py_ssize_t k, j
    cdef double acc, diff
    for k in range(means.shape[0]):
        acc = 0.0
        for j in range(x.shape[1]):
            diff = x[i, j] - means[k, j]
            acc += diff * diff / var[k, j]
        out[k] = log_w[k] - 0.5 * acc - log_norm[k]


cdef double _normalise(double* lc, Py_ssize_t K) noexcept nogil:
    """Turn log-weights into responsibilities in place; return log-sum-exp."""
    cdef Py_ssize_t k
    cdef double top = -INFINITY, total = 0.0
    for k in range(K):
        if lc[k] > top:
            top = lc[k]
    if top == -INFINITY:
        top = 0.0
    for k in range(K):
        lc[k] = exp(lc[k] - top)
        total += lc[k]
    for k in range(K):
        lc[k] /= total
    return log(total) + top


def _log_norm(const double[:, ::1] var):
    cdef Py_ssize_t k, j
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.zeros(var.shape[0])
    for k in range(var.shape[0]):
        for j in range(var.shape[1]):
            out[k] += 0.5 * log(2.0 * M_PI * var[k, j])
    return out


def mixture_logpdf_score(const double[:, ::1] x, const double[:, ::1] means,
                         const double[:, ::1] var, const double[::1] log_w):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], K = means.shape[0]
    cdef Py_ssize_t i, j, k
    logp_arr = np.empty(n)
    score_arr = np.zeros((n, d))
    resp_arr = np.empty(K)
    cdef double[::1] logp = logp_arr
    cdef double[:, ::1] score = score_arr
    cdef double[::1] resp = resp_arr
    cdef double[::1] log_norm = _log_norm(var)
    with nogil:
        for i in range(n):
            _log_comps(x, i, means, var, log_w, log_norm, &resp[0])
            logp[i] = _normalise(&resp[0], K)
            for k in range(K):
                for j in range(d):
                    score[i, j] -= resp[k] * (x[i, j] - means[k, j]) / var[k, j]
    return logp_arr, score_arr


def mixture_score_hvp(const double[:, ::1] x, const double[:, ::1] means,
                      const double[:, ::1] var, const double[::1] log_w,
                      const double[:, ::1] u):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], K = means.shape[0]
    cdef Py_ssize_t i, j, k
    out_arr = np.zeros((n, d))
    resp_arr = np.empty(K)
    score_arr = np.empty(d)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] resp = resp_arr
    cdef double[::1] g = score_arr
    cdef double[::1] log_norm = _log_norm(var)
    cdef double proj, gu, ck
    with nogil:
        for i in range(n):
            _log_comps(x, i, means, var, log_w, log_norm, &resp[0])
            _normalise(&resp[0], K)
            for j in range(d):
                g[j] = 0.0
            for k in range(K):
                proj = 0.0
                for j in range(d):
                    ck = -(x[i, j] - means[k, j]) / var[k, j]
                    g[j] += resp[k] * ck
                    proj += ck * u[i, j]
                for j in range(d):
                    ck = -(x[i, j] - means[k, j]) / var[k, j]
                    out[i, j] += resp[k] * (ck * proj - u[i, j] / var[k, j])
            gu = 0.0
            for j in range(d):
                gu += g[j] * u[i, j]
            for j in range(d):
                out[i, j] -= g[j] * gu
    return out_arr
