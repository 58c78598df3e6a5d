# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled numerical kernels.

Shares its contracts with ldaf._kernels_py: Sobol point generation,
the normal quantile transform, and fused per-datum risk and gradient
evaluation over pre-transformed point sets. All hot loops run without
the GIL so per-datum calls parallelize across threads.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport erfc, exp, log, sqrt

cnp.import_array()

BACKEND_NAME = "compiled"

cdef double INV_2_32 = 2.0 ** -32


cdef inline double _icdf(double u) nogil:
    # Acklam rational approximation plus one Halley polish via erfc.
    cdef double q, r, x, e, t
    if u < 0.02425:
        q = sqrt(-2.0 * log(u))
        x = (((((-7.784894002430293e-03 * q - 3.223964580411365e-01) * q
                - 2.400758277161838e+00) * q - 2.549732539343734e+00) * q
              + 4.374664141464968e+00) * q + 2.938163982698783e+00) / \
            ((((7.784695709041462e-03 * q + 3.224671290700398e-01) * q
               + 2.445134137142996e+00) * q + 3.754408661907416e+00) * q + 1.0)
    elif u > 0.97575:
        q = sqrt(-2.0 * log(1.0 - u))
        x = -(((((-7.784894002430293e-03 * q - 3.223964580411365e-01) * q
                 - 2.400758277161838e+00) * q - 2.549732539343734e+00) * q
               + 4.374664141464968e+00) * q + 2.938163982698783e+00) / \
            ((((7.784695709041462e-03 * q + 3.224671290700398e-01) * q
               + 2.445134137142996e+00) * q + 3.754408661907416e+00) * q + 1.0)
    else:
        q = u - 0.5
        r = q * q
        x = (((((-3.969683028665376e+01 * r + 2.209460984245205e+02) * r
                - 2.759285104469687e+02) * r + 1.383577518672690e+02) * r
              - 3.066479806614716e+01) * r + 2.506628277459239e+00) * q / \
            (((((-5.447609879822406e+01 * r + 1.615858368580409e+02) * r
                - 1.556989798598866e+02) * r + 6.680131188771972e+01) * r
              - 1.328068155288572e+01) * r + 1.0)
    e = 0.5 * erfc(-x / 1.4142135623730951) - u
    t = e * 2.5066282746310002 * exp(0.5 * x * x)
    return x - t / (1.0 + 0.5 * x * t)


def gauss_icdf(double[::1] u):
    cdef Py_ssize_t n = u.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = _icdf(u[i])
    return out_arr


def sobol_fill(table_arr, long start_index, long count, shift_arr=None):
    """Sobol points at indices start_index .. start_index+count-1.

    Direct Gray-code form: point i is the XOR over direction numbers
    selected by the bits of i ^ (i >> 1). A digital shift, when given,
    is XORed in with exact zeros nudged to the smallest grid value.
    """
    cdef const unsigned int[:, ::1] table = np.ascontiguousarray(
        table_arr, dtype=np.uint32
    )
    cdef Py_ssize_t dim = table.shape[0]
    out_arr = np.empty((count, dim), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef bint shifted = shift_arr is not None
    cdef const unsigned int[::1] shift = np.ascontiguousarray(
        shift_arr if shifted else np.zeros(dim), dtype=np.uint32
    )
    cdef unsigned int[::1] acc = np.empty(dim, dtype=np.uint32)
    cdef unsigned long long idx, gray
    cdef unsigned int val
    cdef Py_ssize_t i, d, bit
    with nogil:
        for i in range(count):
            for d in range(dim):
                acc[d] = 0
            idx = <unsigned long long> (start_index + i)
            gray = idx ^ (idx >> 1)
            bit = 0
            while gray != 0:
                if gray & 1:
                    for d in range(dim):
                        acc[d] ^= table[d, bit]
                gray >>= 1
                bit += 1
            for d in range(dim):
                val = acc[d]
                if shifted:
                    val ^= shift[d]
                    if val == 0:
                        val = 1
                out[i, d] = val * INV_2_32
    return out_arr


def zero_one_risk(double[:, ::1] z, double[::1] mean, double[:, ::1] chol,
                  double[::1] shift, long label):
    """Fraction of points whose logits do not strictly argmax at label."""
    cdef Py_ssize_t n = z.shape[0], k = z.shape[1], c = shift.shape[0]
    cdef double[::1] y = np.empty(k, dtype=np.float64)
    cdef Py_ssize_t j, a, b
    cdef double acc = 0.0, tot, target, val
    cdef long wrong
    with nogil:
        for j in range(n):
            tot = 0.0
            for a in range(k):
                val = mean[a]
                for b in range(a + 1):
                    val += chol[a, b] * z[j, b]
                y[a] = val
                tot += val
            if label < k:
                target = y[label] + shift[label]
            else:
                target = -tot + shift[k]
            wrong = 0
            for a in range(c):
                if a == label:
                    continue
                if a < k:
                    val = y[a] + shift[a]
                else:
                    val = -tot + shift[a]
                if val >= target:
                    wrong = 1
                    break
            acc += wrong
    return acc / n


def cross_entropy_risk(double[:, ::1] z, double[::1] mean, double[:, ::1] chol,
                       double[::1] shift, long label):
    """Mean cross entropy of the logits against the label."""
    cdef Py_ssize_t n = z.shape[0], k = z.shape[1], c = shift.shape[0]
    cdef double[::1] lg = np.empty(c, dtype=np.float64)
    cdef Py_ssize_t j, a, b
    cdef double acc = 0.0, tot, peak, s, val
    with nogil:
        for j in range(n):
            tot = 0.0
            for a in range(k):
                val = mean[a]
                for b in range(a + 1):
                    val += chol[a, b] * z[j, b]
                lg[a] = val + shift[a]
                tot += val
            lg[k] = -tot + shift[k]
            peak = lg[0]
            for a in range(1, c):
                if lg[a] > peak:
                    peak = lg[a]
            s = 0.0
            for a in range(c):
                s += exp(lg[a] - peak)
            acc += log(s) + peak - lg[label]
    return acc / n


def cross_entropy_grad(double[:, ::1] z, double[::1] mean, double[:, ::1] chol,
                       double[::1] shift, long label):
    """Per-point cross-entropy gradients; see the fallback docstring."""
    cdef Py_ssize_t n = z.shape[0], k = z.shape[1], c = shift.shape[0]
    gm_arr = np.zeros((n, k), dtype=np.float64)
    gchol_arr = np.zeros((n, k, k), dtype=np.float64)
    gshift_arr = np.zeros((n, c), dtype=np.float64)
    cdef double[:, ::1] gm = gm_arr
    cdef double[:, :, ::1] gchol = gchol_arr
    cdef double[:, ::1] gshift = gshift_arr
    cdef double[::1] lg = np.empty(c, dtype=np.float64)
    cdef Py_ssize_t j, a, b
    cdef double tot, peak, s, val, glast
    with nogil:
        for j in range(n):
            tot = 0.0
            for a in range(k):
                val = mean[a]
                for b in range(a + 1):
                    val += chol[a, b] * z[j, b]
                lg[a] = val + shift[a]
                tot += val
            lg[k] = -tot + shift[k]
            peak = lg[0]
            for a in range(1, c):
                if lg[a] > peak:
                    peak = lg[a]
            s = 0.0
            for a in range(c):
                lg[a] = exp(lg[a] - peak)
                s += lg[a]
            for a in range(c):
                val = lg[a] / s
                if a == label:
                    val -= 1.0
                gshift[j, a] = val
            glast = gshift[j, k]
            for a in range(k):
                gm[j, a] = gshift[j, a] - glast
                for b in range(a + 1):
                    gchol[j, a, b] = gm[j, a] * z[j, b]
    return gm_arr, gchol_arr, gshift_arr
