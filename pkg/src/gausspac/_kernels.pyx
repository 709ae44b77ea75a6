# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: certification sampling and the multiclass psi(max) estimator."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, sin, exp, erfc

cnp.import_array()

cdef double INV_SQRT_2PI = 0.3989422804014327
cdef double INV_SQRT2 = 0.7071067811865476
DEF MAXQ = 64
DEF HBLOCK = 16


cdef inline void _dots(const double* f, const double* w_mean, const double* w_var, Py_ssize_t n,
                       double* mean, double* var) noexcept nogil:
    """mean = sum_j w_mean[j] f[j], var = sum_j w_var[j] f[j]^2 with four partial sums."""
    cdef double m0 = 0.0, m1 = 0.0, m2 = 0.0, m3 = 0.0
    cdef double v0 = 0.0, v1 = 0.0, v2 = 0.0, v3 = 0.0
    cdef Py_ssize_t j = 0
    cdef double f0, f1, f2, f3
    while j + 4 <= n:
        f0 = f[j]
        f1 = f[j + 1]
        f2 = f[j + 2]
        f3 = f[j + 3]
        m0 += w_mean[j] * f0
        m1 += w_mean[j + 1] * f1
        m2 += w_mean[j + 2] * f2
        m3 += w_mean[j + 3] * f3
        v0 += w_var[j] * f0 * f0
        v1 += w_var[j + 1] * f1 * f1
        v2 += w_var[j + 2] * f2 * f2
        v3 += w_var[j + 3] * f3 * f3
        j += 4
    while j < n:
        f0 = f[j]
        m0 += w_mean[j] * f0
        v0 += w_var[j] * f0 * f0
        j += 1
    mean[0] = (m0 + m1) + (m2 + m3)
    var[0] = (v0 + v1) + (v2 + v3)


def count_errors(const double[:, ::1] a, const double[:, ::1] b, const cnp.int64_t[::1] labels,
                 const double[:, ::1] zeta0, const double[:, ::1] zeta1,
                 const double[:, ::1] mu1, const double[:, ::1] sigma1_sq, bint relu):
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1], N = zeta0.shape[0], q = mu1.shape[0]
    cdef Py_ssize_t h0, h, hend, i, j, k, best
    cdef double y, top, val, mean, var
    cdef const double* ai
    cdef const double* bi
    cdef const double* zh
    cdef double* f
    if q > MAXQ:
        raise ValueError("too many output classes for the compiled kernel")
    out_arr = np.zeros(N, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    buf_arr = np.empty(max(n, 1))
    cdef double[::1] buf = buf_arr
    if m == 0 or N == 0:
        return out_arr
    with nogil:
        f = &buf[0]
        # realisations are blocked so that rows of a and b stay in cache
        for h0 in range(0, N, HBLOCK):
            hend = h0 + HBLOCK
            if hend > N:
                hend = N
            for i in range(m):
                ai = &a[i, 0]
                bi = &b[i, 0]
                for h in range(h0, hend):
                    zh = &zeta0[h, 0]
                    if relu:
                        for j in range(n):
                            y = ai[j] * zh[j] + bi[j]
                            f[j] = y if y > 0.0 else 0.0
                    else:
                        for j in range(n):
                            f[j] = sin(ai[j] * zh[j] + bi[j])
                    best = 0
                    top = 0.0
                    for k in range(q):
                        _dots(f, &mu1[k, 0], &sigma1_sq[k, 0], n, &mean, &var)
                        val = mean + sqrt(var) * zeta1[h, k]
                        if k == 0 or val > top:
                            top = val
                            best = k
                    if best != labels[i]:
                        out[h] += 1
    return out_arr


def psi_max_stats(const double[:, ::1] At, const double[::1] Mt, const double[:, ::1] X):
    cdef Py_ssize_t S = X.shape[0], d = At.shape[0], s, i, l, best
    cdef double u, v, psi, w, sum_psi = 0.0, sum_sq = 0.0
    gM_arr = np.zeros(d)
    gA_arr = np.zeros((d, d))
    cdef double[::1] gM = gM_arr
    cdef double[:, ::1] gA = gA_arr
    with nogil:
        for s in range(S):
            best = 0
            u = Mt[0]
            for l in range(d):
                u += At[0, l] * X[s, l]
            for i in range(1, d):
                v = Mt[i]
                for l in range(d):
                    v += At[i, l] * X[s, l]
                if v > u:
                    u = v
                    best = i
            psi = 0.5 * erfc(u * INV_SQRT2)
            sum_psi += psi
            sum_sq += psi * psi
            w = -exp(-0.5 * u * u) * INV_SQRT_2PI
            gM[best] += w
            for l in range(d):
                gA[best, l] += w * X[s, l]
    return sum_psi, sum_sq, gM_arr, gA_arr
