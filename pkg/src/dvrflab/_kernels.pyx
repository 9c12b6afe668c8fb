# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled mixture posterior kernel. Same contract as ``_kernels_py.gmm_posterior``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, M_PI

cnp.import_array()


def gmm_posterior(x, double a, double b, log_w, mu, var):
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[::1] lw = np.ascontiguousarray(log_w, dtype=np.float64)
    cdef const double[:, ::1] muv = np.ascontiguousarray(mu, dtype=np.float64)
    cdef const double[:, ::1] varv = np.ascontiguousarray(var, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], d = xv.shape[1], K = muv.shape[0]
    cdef Py_ssize_t i, j, k

    s_arr = a * a * np.asarray(var, dtype=np.float64) + b * b
    s_arr = np.ascontiguousarray(s_arr)
    cdef const double[:, ::1] s = s_arr
    gain_arr = np.ascontiguousarray(a * np.asarray(var, dtype=np.float64) / s_arr)
    cdef const double[:, ::1] gain = gain_arr
    cdef double[::1] logdet = np.empty(K)
    cdef double log2pi = log(2.0 * M_PI)
    for j in range(K):
        logdet[j] = 0.0
        for k in range(d):
            logdet[j] += log(s[j, k])

    mean_arr = np.zeros((n, d))
    resp_arr = np.empty((n, K))
    logp_arr = np.empty(n)
    cdef double[:, ::1] mean = mean_arr
    cdef double[:, ::1] resp = resp_arr
    cdef double[::1] logp = logp_arr
    cdef double q, r, top, tot

    with nogil:
        for i in range(n):
            top = -1e308
            for j in range(K):
                q = 0.0
                for k in range(d):
                    r = xv[i, k] - a * muv[j, k]
                    q = q + r * r / s[j, k]
                resp[i, j] = lw[j] - 0.5 * (q + logdet[j] + d * log2pi)
                if resp[i, j] > top:
                    top = resp[i, j]
            tot = 0.0
            for j in range(K):
                resp[i, j] = exp(resp[i, j] - top)
                tot = tot + resp[i, j]
            logp[i] = top + log(tot)
            for j in range(K):
                resp[i, j] = resp[i, j] / tot
                for k in range(d):
                    mean[i, k] = mean[i, k] + resp[i, j] * (
                        muv[j, k] + gain[j, k] * (xv[i, k] - a * muv[j, k]))
    return mean_arr, resp_arr, logp_arr
