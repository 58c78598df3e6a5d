"""Pure-NumPy implementations of the hot numerical kernels.

Mirrors the compiled extension ldaf._kernels; used as a fallback when
the extension is unavailable or when LDAF_PURE_PYTHON=1 forces it.

Kernel contracts shared by both backends:
  * sobol_fill(table, start_index, count, shift) -> (count, dim) floats
  * gauss_icdf(u) -> standard normal quantiles, no domain validation
  * zero_one_risk / cross_entropy_risk(z, mean, chol, shift, label)
    -> mean loss over the rows of z (pre-transformed normal points)
  * cross_entropy_grad(...) -> per-point gradient arrays

Per-point gradient rows must not depend on how many points a call
processes: each row is a pure function of its own input row, so a
batched call and a sequence of single-point calls produce bit-identical
arrays. That property makes gradient-of-sum equal sum-of-gradients
exactly, not just approximately.
"""

import numpy as np
from scipy.special import erfc

BACKEND_NAME = "pure-python"

_INV_2_32 = float(2.0**-32)

# Rational approximation coefficients for the normal quantile
# (Acklam), polished below with one Halley step through erfc.
_ICDF_A = (
    -3.969683028665376e01,
    2.209460984245205e02,
    -2.759285104469687e02,
    1.383577518672690e02,
    -3.066479806614716e01,
    2.506628277459239e00,
)
_ICDF_B = (
    -5.447609879822406e01,
    1.615858368580409e02,
    -1.556989798598866e02,
    6.680131188771972e01,
    -1.328068155288572e01,
)
_ICDF_C = (
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e00,
    -2.549732539343734e00,
    4.374664141464968e00,
    2.938163982698783e00,
)
_ICDF_D = (
    7.784695709041462e-03,
    3.224671290700398e-01,
    2.445134137142996e00,
    3.754408661907416e00,
)
_ICDF_SPLIT = 0.02425
_SQRT_2PI = 2.5066282746310002
_SQRT_2 = 1.4142135623730951


def sobol_fill(table, start_index, count, shift=None):
    """Sobol points with indices start_index .. start_index+count-1.

    table is the (dim, 32) uint32 direction-number matrix. Uses the
    direct Gray-code form: the point at index i is the XOR of the
    direction numbers selected by the bits of i ^ (i >> 1). An optional
    digital shift is XORed in; any coordinate that lands exactly on
    zero is nudged to the smallest representable grid value so
    downstream quantile transforms stay finite.
    """
    dim = table.shape[0]
    idx = np.arange(start_index, start_index + count, dtype=np.uint64)
    gray = idx ^ (idx >> np.uint64(1))
    acc = np.zeros((count, dim), dtype=np.uint32)
    live = gray.copy()
    for bit in range(32):
        mask = (live & np.uint64(1)).astype(bool)
        if mask.any():
            acc[mask] ^= table[:, bit]
        live >>= np.uint64(1)
        if not live.any():
            break
    if shift is not None:
        acc ^= np.asarray(shift, dtype=np.uint32)[None, :]
        np.maximum(acc, np.uint32(1), out=acc)
    return acc.astype(np.float64) * _INV_2_32


def gauss_icdf(u):
    """Standard normal quantile function, elementwise.

    Acklam's rational approximation with one Halley polish through the
    complementary error function; absolute CDF round-trip error stays
    well under 1e-12 across the open unit interval.
    """
    u = np.asarray(u, dtype=np.float64)
    x = np.empty_like(u)

    lo = u < _ICDF_SPLIT
    hi = u > 1.0 - _ICDF_SPLIT
    mid = ~(lo | hi)

    if mid.any():
        q = u[mid] - 0.5
        r = q * q
        a, b = _ICDF_A, _ICDF_B
        num = ((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]
        den = ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0
        x[mid] = num * q / den
    c, d = _ICDF_C, _ICDF_D
    if lo.any():
        q = np.sqrt(-2.0 * np.log(u[lo]))
        num = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
        den = (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        x[lo] = num / den
    if hi.any():
        q = np.sqrt(-2.0 * np.log(1.0 - u[hi]))
        num = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
        den = (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        x[hi] = -num / den

    # One Halley step: e = Phi(x) - u, with Phi through erfc for
    # tail-accurate evaluation.
    e = 0.5 * erfc(-x / _SQRT_2) - u
    t = e * _SQRT_2PI * np.exp(0.5 * x * x)
    x = x - t / (1.0 + 0.5 * x * t)
    return x


def _logits(z, mean, chol, shift):
    # Rows of z are coordinate points; returns (n, c) logits. The
    # matrix product is written as broadcast multiply-sum so each
    # output row depends only on its own input row bit-for-bit.
    y = mean + (z[:, None, :] * chol[None, :, :]).sum(axis=2)
    n, k = y.shape
    logits = np.empty((n, k + 1))
    logits[:, :k] = y
    logits[:, k] = -y.sum(axis=1)
    logits += shift
    return logits


def zero_one_risk(z, mean, chol, shift, label):
    """Fraction of points whose logits do not strictly argmax at label."""
    logits = _logits(z, mean, chol, shift)
    target = logits[:, label]
    rival = np.max(np.delete(logits, label, axis=1), axis=1)
    return float(np.mean(rival >= target))


def cross_entropy_risk(z, mean, chol, shift, label):
    """Mean cross entropy of the logits rows against the label."""
    logits = _logits(z, mean, chol, shift)
    peak = logits.max(axis=1)
    lse = np.log(np.exp(logits - peak[:, None]).sum(axis=1)) + peak
    return float(np.mean(lse - logits[:, label]))


def cross_entropy_grad(z, mean, chol, shift, label):
    """Per-point cross-entropy gradients.

    Returns (gm, gchol, gshift) with shapes (n, k), (n, k, k) and
    (n, c): the gradient of each single point's loss w.r.t. mean, the
    lower-triangular Cholesky factor, and the logit shift.
    """
    n, k = z.shape
    logits = _logits(z, mean, chol, shift)
    peak = logits.max(axis=1, keepdims=True)
    ez = np.exp(logits - peak)
    g = ez / ez.sum(axis=1, keepdims=True)
    g[:, label] -= 1.0
    gm = g[:, :k] - g[:, k:]
    gchol = gm[:, :, None] * z[:, None, :]
    gchol *= np.tril(np.ones((k, k)))
    return gm, gchol, g
