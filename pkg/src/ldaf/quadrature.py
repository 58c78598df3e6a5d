"""Unit-cube quadrature of expected classification risk.

The node marginal reduces the expected loss of a stochastic classifier
to an integral over the (c-1)-dimensional unit cube: a cube point u is
mapped through the normal quantile function, the Cholesky factor, the
basis embedding and the logit shift, and the loss is averaged. Sobol
points make that average a deterministic low-discrepancy quadrature;
i.i.d. uniform points give the Monte-Carlo baseline. One shared point
set is reused across the whole batch, because the integrands differ
only through their moments.
"""

import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _backend, _sobol_data
from .manifold import basis_embed

__all__ = [
    "DEFAULT_N_POINTS",
    "LossKind",
    "RiskEstimate",
    "SobolStream",
    "expected_risk",
    "expected_risk_grad",
    "expected_risk_per_datum",
    "gauss_icdf",
    "mc_expected_risk",
    "resolve_threads",
    "sobol_points",
    "standardized_logits",
]

DEFAULT_N_POINTS = 2**13
ERROR_ESTIMATE_REPLICATES = 8

# Uniform draws for the MC path are clamped away from 0 so the quantile
# transform stays finite; 0 occurs with probability 2**-53 per draw.
_MC_FLOOR = 2.0**-53


class LossKind(enum.Enum):
    CROSS_ENTROPY = "cross_entropy"
    ZERO_ONE = "zero_one"


@dataclass
class RiskEstimate:
    value: float
    n_points: int
    method: str
    error_estimate: Optional[float] = None


def resolve_threads(threads=None):
    """Worker count: explicit value, else LDAF_THREADS, else cpu count."""
    if threads is not None:
        n = int(threads)
    else:
        env = os.environ.get("LDAF_THREADS", "").strip()
        if env:
            n = int(env)
        else:
            n = os.cpu_count() or 1
    if n < 1:
        raise ValueError("thread count must be positive")
    return n


def _direction_table(dim):
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if dim > _sobol_data.MAX_DIM:
        raise ValueError(
            "dim %d exceeds the supported maximum %d" % (dim, _sobol_data.MAX_DIM)
        )
    table = np.empty((dim, 32), dtype=np.uint32)
    table[0] = np.uint32(1) << (31 - np.arange(32, dtype=np.uint32))
    for d in range(1, dim):
        poly = _sobol_data.POLY[d]
        s = poly.bit_length() - 1
        m = list(_sobol_data.M_INIT[d - 1])
        for k in range(s, 32):
            new = m[k - s] ^ (m[k - s] << s)
            for j in range(1, s):
                if (poly >> (s - j)) & 1:
                    new ^= m[k - j] << j
            m.append(new)
        for k in range(32):
            table[d, k] = np.uint32(m[k] << (31 - k))
    return table


def _shift_from_seed(dim, seed):
    if seed is None:
        return None
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2**32, size=dim, dtype=np.uint32)


class SobolStream:
    """Stateful Sobol generator over [0,1)^dim.

    Emission starts at index 1: index 0 is the all-zeros point, which
    the quantile transform cannot accept. An optional digital shift
    (drawn from seed_shift) XORs every point for randomized replicates.
    """

    def __init__(self, dim, seed_shift=None):
        self.dim = dim
        self.index = 1
        self._table = _direction_table(dim)
        self._shift = _shift_from_seed(dim, seed_shift)

    def take(self, count):
        if count < 1:
            raise ValueError("count must be >= 1")
        pts = _backend.active().sobol_fill(self._table, self.index, count, self._shift)
        self.index += count
        return pts


def sobol_points(dim, count, seed_shift=None):
    """First count Sobol points (from index 1), optionally shifted."""
    return SobolStream(dim, seed_shift=seed_shift).take(count)


def gauss_icdf(u):
    """Standard normal quantile of u, elementwise; u must be in (0,1)."""
    arr = np.asarray(u, dtype=np.float64)
    if arr.size and (arr.min() <= 0.0 or arr.max() >= 1.0):
        raise ValueError("quantile argument must lie strictly inside (0, 1)")
    out = _backend.active().gauss_icdf(np.ascontiguousarray(arr.ravel()))
    out = out.reshape(arr.shape)
    if np.isscalar(u) or arr.ndim == 0:
        return float(out)
    return out


def standardized_logits(mom, u):
    """Logits of the stochastic classifier at a unit-cube point.

    Embeds mean_hat + chol @ icdf(u) into the zero-sum class space and
    adds the deterministic shift. Reference implementation; the risk
    kernels fuse the same map.
    """
    u = np.asarray(u, dtype=np.float64)
    z = gauss_icdf(u)
    return basis_embed(mom.mean_hat + mom.chol @ z) + mom.logits_shift


def _transformed_points(dim, n_points, points, seed_shift):
    if points is None:
        points = sobol_points(dim, n_points, seed_shift=seed_shift)
    else:
        points = np.asarray(points, dtype=np.float64)
        if points.shape != (n_points, dim):
            raise ValueError(
                "points must have shape (%d, %d)" % (n_points, dim)
            )
    return _backend.active().gauss_icdf(np.ascontiguousarray(points.ravel())).reshape(
        points.shape
    )


def _check_batch(mom_batch, labels):
    if len(mom_batch) == 0:
        raise ValueError("empty moment batch")
    labels = np.asarray(labels)
    if labels.shape != (len(mom_batch),):
        raise ValueError("labels must match the moment batch length")
    c = mom_batch[0].logits_shift.shape[0]
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("labels out of range")
    return labels.astype(np.int64), c


# Kernel calls on huge point sets are sliced to bound the transient
# memory of the fallback backend; the slicing is fixed, so results stay
# deterministic.
_EVAL_CHUNK = 1 << 20


def _eval_sliced(kern, z, mean, chol, shift, label):
    n = z.shape[0]
    if n <= _EVAL_CHUNK:
        return kern(z, mean, chol, shift, label)
    total = 0.0
    for lo in range(0, n, _EVAL_CHUNK):
        hi = min(n, lo + _EVAL_CHUNK)
        total += kern(z[lo:hi], mean, chol, shift, label) * (hi - lo)
    return total / n


def _per_datum_values(mom_batch, labels, loss, z, threads):
    kernels = _backend.active()
    if loss is LossKind.ZERO_ONE:
        kern = kernels.zero_one_risk
    elif loss is LossKind.CROSS_ENTROPY:
        kern = kernels.cross_entropy_risk
    else:
        raise ValueError("unknown loss kind %r" % (loss,))
    m = len(mom_batch)
    values = np.empty(m)

    def work(i):
        mom = mom_batch[i]
        values[i] = _eval_sliced(
            kern, z, mom.mean_hat, mom.chol, mom.logits_shift, int(labels[i])
        )

    n_workers = min(resolve_threads(threads), m)
    if n_workers <= 1:
        for i in range(m):
            work(i)
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            list(pool.map(work, range(m)))
    return values


def expected_risk_per_datum(
    mom_batch, labels, loss, n_points, points=None, seed_shift=None, threads=None
):
    """Per-datum expected risk estimates under one shared point set."""
    labels, c = _check_batch(mom_batch, labels)
    z = _transformed_points(c - 1, n_points, points, seed_shift)
    return _per_datum_values(mom_batch, labels, loss, z, threads)


def expected_risk(
    mom_batch,
    labels,
    loss,
    n_points=DEFAULT_N_POINTS,
    points=None,
    seed_shift=None,
    threads=None,
    with_error_estimate=False,
):
    """QMC estimate of the batch-averaged expected risk.

    Deterministic for fixed (dim, n_points, seed_shift) regardless of
    thread count. With with_error_estimate=True, the spread (sample
    standard deviation) of eight digitally shifted replicates is
    attached as error_estimate.
    """
    values = expected_risk_per_datum(
        mom_batch, labels, loss, n_points,
        points=points, seed_shift=seed_shift, threads=threads,
    )
    est = RiskEstimate(float(values.mean()), int(n_points), "QMC")
    if with_error_estimate:
        base = 1 if seed_shift is None else int(seed_shift)
        reps = np.empty(ERROR_ESTIMATE_REPLICATES)
        for r in range(ERROR_ESTIMATE_REPLICATES):
            rep = expected_risk_per_datum(
                mom_batch, labels, loss, n_points,
                seed_shift=base + 7919 * (r + 1), threads=threads,
            )
            reps[r] = rep.mean()
        est.error_estimate = float(np.std(reps, ddof=1))
    return est


def mc_expected_risk(
    mom_batch, labels, loss, n_points, rng_seed, threads=None
):
    """Monte-Carlo estimate with i.i.d. uniform points, seeded."""
    labels, c = _check_batch(mom_batch, labels)
    rng = np.random.default_rng(rng_seed)
    u = rng.random((n_points, c - 1))
    np.maximum(u, _MC_FLOOR, out=u)
    z = _backend.active().gauss_icdf(np.ascontiguousarray(u.ravel())).reshape(u.shape)
    values = _per_datum_values(mom_batch, labels, loss, z, threads)
    return RiskEstimate(float(values.mean()), int(n_points), "MC")


def mc_expected_risk_per_datum(mom_batch, labels, loss, n_points, rng_seed, threads=None):
    """Per-datum MC estimates; same sampling scheme as mc_expected_risk."""
    labels, c = _check_batch(mom_batch, labels)
    rng = np.random.default_rng(rng_seed)
    u = rng.random((n_points, c - 1))
    np.maximum(u, _MC_FLOOR, out=u)
    z = _backend.active().gauss_icdf(np.ascontiguousarray(u.ravel())).reshape(u.shape)
    return _per_datum_values(mom_batch, labels, loss, z, threads)


def expected_risk_grad(
    mom_batch,
    labels,
    loss=LossKind.CROSS_ENTROPY,
    n_points=DEFAULT_N_POINTS,
    points=None,
    seed_shift=None,
    upstream=1.0,
    threads=None,
):
    """Gradients of the batch-averaged QMC risk w.r.t. each marginal.

    Returns one (g_mean, g_chol, g_shift) triple per datum, scaled by
    upstream. Differentiation commutes with the quadrature sum: the
    per-point gradient rows are reduced by one fixed-order sum, so this
    equals the QMC average of single-point gradients bit for bit.
    """
    if loss is not LossKind.CROSS_ENTROPY:
        raise ValueError(
            "expected_risk_grad requires a differentiable loss; "
            "zero-one risk has no gradient, use the surrogate"
        )
    labels, c = _check_batch(mom_batch, labels)
    z = _transformed_points(c - 1, n_points, points, seed_shift)
    kernels = _backend.active()
    m = len(mom_batch)
    out = [None] * m
    scale = float(upstream) / (m * z.shape[0])

    def work(i):
        mom = mom_batch[i]
        gm, gchol, gshift = kernels.cross_entropy_grad(
            z, mom.mean_hat, mom.chol, mom.logits_shift, int(labels[i])
        )
        out[i] = (
            scale * np.sum(gm, axis=0),
            scale * np.sum(gchol, axis=0),
            scale * np.sum(gshift, axis=0),
        )

    n_workers = min(resolve_threads(threads), m)
    if n_workers <= 1:
        for i in range(m):
            work(i)
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            list(pool.map(work, range(m)))
    return out
