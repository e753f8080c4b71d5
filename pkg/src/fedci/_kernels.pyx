# cython: language_level=3
"""Compiled kernels. Same contracts as ``fedci._kernels_py``."""
import numpy as np
cimport numpy as cnp

from libc.math cimport exp, log


def cox_breslow(const double[:, ::1] X, const double[::1] eta,
                const signed char[::1] event, const double[::1] time):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1]
    cdef Py_ssize_t i = 0, j, a, b, start
    cdef double m = 0.0, w, S0 = 0.0, loglik = 0.0, ne, sum_eta, ma
    if n:
        m = eta[0]
        for i in range(1, n):
            if eta[i] > m:
                m = eta[i]
    S1_arr = np.zeros(d)
    S2_arr = np.zeros((d, d))
    xe_arr = np.zeros(d)
    grad_arr = np.zeros(d)
    hess_arr = np.zeros((d, d))
    cdef double[::1] S1 = S1_arr, xe = xe_arr, grad = grad_arr
    cdef double[:, ::1] S2 = S2_arr, hess = hess_arr
    i = 0
    while i < n:
        start = i
        while i < n and time[i] == time[start]:
            w = exp(eta[i] - m)
            S0 += w
            for a in range(d):
                S1[a] += w * X[i, a]
                for b in range(a, d):
                    S2[a, b] += w * X[i, a] * X[i, b]
            i += 1
        ne = 0.0
        sum_eta = 0.0
        for a in range(d):
            xe[a] = 0.0
        for j in range(start, i):
            if event[j]:
                ne += 1.0
                sum_eta += eta[j]
                for a in range(d):
                    xe[a] += X[j, a]
        if ne > 0.0:
            loglik += sum_eta - ne * (log(S0) + m)
            for a in range(d):
                ma = S1[a] / S0
                grad[a] += xe[a] - ne * ma
                for b in range(a, d):
                    hess[a, b] -= ne * (S2[a, b] / S0 - ma * (S1[b] / S0))
    for a in range(d):
        for b in range(a):
            hess[a, b] = hess[b, a]
    return loglik, grad_arr, hess_arr


def event_table(const double[::1] time, const cnp.int64_t[::1] delta, Py_ssize_t n_causes):
    cdef Py_ssize_t n = time.shape[0]
    cdef Py_ssize_t i = 0, start, m = 0, c
    cdef cnp.int64_t tot
    times_arr = np.empty(n)
    risk_arr = np.empty(n, dtype=np.int64)
    dtot_arr = np.empty(n, dtype=np.int64)
    dc_arr = np.zeros((n, n_causes), dtype=np.int64)
    cdef double[::1] times = times_arr
    cdef cnp.int64_t[::1] risk = risk_arr, dtot = dtot_arr
    cdef cnp.int64_t[:, ::1] dc = dc_arr
    while i < n:
        start = i
        tot = 0
        while i < n and time[i] == time[start]:
            c = delta[i]
            if c > 0:
                dc[m, c - 1] += 1
                tot += 1
            i += 1
        if tot > 0:
            times[m] = time[start]
            risk[m] = n - start
            dtot[m] = tot
            m += 1
    return times_arr[:m].copy(), risk_arr[:m].copy(), dtot_arr[:m].copy(), dc_arr[:m].copy()
