"""Gaussian pushforward of randomized initializations under the flow.

A zero-mean Gaussian initial tangent vector v0 with covariance
Sigma0 = F F^T, F = (I_n (x) P)(Diag(d) + q q^T), stays Gaussian under
the affine tangent dynamics: at time T the law is

    N(T*phi(TA) b,  expm(TA) Sigma0 expm(TA)^T).

Classification happens at the first node only, so the full covariance
is never materialized. Instead the c node rows of expm(TA) F are
computed (dense, or via c transposed Krylov solves), giving the node
marginal in basis coordinates: mean_hat (first c-1 entries of the node
block of the mean) and cov_hat = B_hat B_hat^T.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .flowcore import (
    DENSE_LIMIT,
    assemble_linearized,
    assemble_linearized_batch,
    expm_apply,
    phi_apply,
    phi_batched,
    solve_ldaf,
)
from .manifold import (
    basis_adjoint_nodewise,
    basis_embed_nodewise,
    project_tangent,
)

__all__ = [
    "DegenerateCovariance",
    "LowRankCov",
    "MarginalFactor",
    "MarginalMoments",
    "chol_backward",
    "marginal_factor",
    "marginal_factor_batch",
    "moments_from_factor",
    "push_marginal",
    "push_marginal_grad",
    "push_mean",
]


class DegenerateCovariance(RuntimeError):
    """Node marginal covariance stayed non-factorizable after max jitter."""


@dataclass
class LowRankCov:
    """Covariance factor parameters (d, q) in tangent coordinates.

    The coordinate-space factor is M = Diag(d) + q q^T, a symmetric
    k x k matrix with k = n*(c-1); the tangent-space factor embeds M
    through the per-node basis. Positive d keeps M (hence the
    covariance M^2) positive definite.
    """

    d: np.ndarray
    q: np.ndarray
    shape: object

    def __post_init__(self):
        k = self.shape.coord_dim
        self.d = np.asarray(self.d, dtype=np.float64).copy()
        self.q = np.asarray(self.q, dtype=np.float64).copy()
        if self.d.shape != (k,) or self.q.shape != (k,):
            raise ValueError("d and q must have length %d" % k)
        if np.any(self.d <= 0.0):
            raise ValueError("all d entries must be strictly positive")

    def factor_matrix(self):
        """Dense coordinate factor M = Diag(d) + q q^T, shape (k, k)."""
        return np.diag(self.d) + np.outer(self.q, self.q)

    def factor_apply(self, z):
        """M applied to the last axis of z."""
        z = np.asarray(z, dtype=np.float64)
        return z * self.d + np.tensordot(z, self.q, axes=(-1, -1))[..., None] * self.q

    def dense_factor(self):
        """Dense tangent-space factor (I_n (x) P) M, shape (N, k)."""
        return basis_embed_nodewise(self.factor_matrix().T, self.shape).T

    def sample_tangent(self, rng, count):
        """Draw count tangent vectors v0 ~ N(0, Sigma0), shape (count, N)."""
        xi = rng.standard_normal((count, self.shape.coord_dim))
        return basis_embed_nodewise(self.factor_apply(xi), self.shape)

    def copy(self):
        return LowRankCov(self.d.copy(), self.q.copy(), self.shape)


@dataclass
class MarginalMoments:
    """Classification-node marginal of the pushforward Gaussian.

    mean_hat: length c-1, the node mean in basis coordinates.
    cov_hat: (c-1) x (c-1) SPD matrix, chol its lower Cholesky factor.
    logits_shift: length c, the deterministic logit offset added after
    embedding back into the zero-sum space.
    """

    mean_hat: np.ndarray
    cov_hat: np.ndarray
    chol: np.ndarray
    logits_shift: np.ndarray


@dataclass
class MarginalFactor:
    """Covariance-independent per-datum pieces of the node marginal.

    y_hat holds the first c-1 rows of expm(TA)(I_n (x) P); for any
    covariance parameters, B_hat = y_hat @ M and cov_hat = B_hat B_hat^T.
    Caching these makes posterior optimization cheap: the flow is fixed
    while (d, q) move.
    """

    y_hat: np.ndarray
    mean_hat: np.ndarray
    logits_shift: np.ndarray


def push_mean(params, s0, T, method="auto", krylov=None):
    """Pushforward mean T*phi(TA)b; identical to the closed-form solve."""
    return solve_ldaf(params, s0, T, method=method, krylov=krylov)


def _node_rows(sys, T, method, krylov):
    """First-node rows of expm(TA)(I_n (x) P), shape (c, k)."""
    c = sys.shape.c
    if method == "dense" or (method == "auto" and sys.n_dim <= DENSE_LIMIT):
        mat = scipy.linalg.expm(T * sys.dense_a())
        rows = mat[:c]
    else:
        rows = np.empty((c, sys.n_dim))
        for i in range(c):
            e = np.zeros(sys.n_dim)
            e[i] = 1.0
            rows[i] = expm_apply(sys, T, e, method=method, krylov=krylov, transpose=True)
    return basis_adjoint_nodewise(rows, sys.shape)


def _chol_with_jitter(cov_hat):
    """Lower Cholesky factor with an escalating diagonal jitter.

    Starts at 1e-12 * mean diagonal scale and grows tenfold up to 1e-6
    before giving up; degenerate marginals are a posterior-collapse
    signal the caller should see.
    """
    dim = cov_hat.shape[0]
    scale = float(np.trace(cov_hat)) / dim
    if not np.isfinite(scale) or scale < 0.0:
        raise DegenerateCovariance("covariance trace is not finite")
    try:
        return np.linalg.cholesky(cov_hat)
    except np.linalg.LinAlgError:
        pass
    rel = 1e-12
    while rel <= 1e-6:
        try:
            return np.linalg.cholesky(cov_hat + (rel * scale) * np.eye(dim))
        except np.linalg.LinAlgError:
            rel *= 10.0
    raise DegenerateCovariance(
        "Cholesky failed up to jitter 1e-6 * %.3g" % scale
    )


def marginal_factor(params, s0, T, logits_shift, method="auto", krylov=None):
    """Per-datum marginal pieces that do not depend on (d, q)."""
    if T <= 0.0:
        raise ValueError("T must be positive")
    shape = params.shape
    logits_shift = np.asarray(logits_shift, dtype=np.float64)
    if logits_shift.shape != (shape.c,):
        raise ValueError("logits_shift must have length %d" % shape.c)
    sys = assemble_linearized(params, s0)
    mean = phi_apply(sys, T, sys.b, method=method, krylov=krylov)
    rows = _node_rows(sys, T, method, krylov)
    return MarginalFactor(
        y_hat=rows[: shape.c - 1],
        mean_hat=mean[: shape.c - 1].copy(),
        logits_shift=logits_shift.copy(),
    )


def marginal_factor_batch(params, s0_batch, T, logits_shifts, max_chunk=None):
    """Dense batched marginal factors for a stack of initial states.

    Builds the per-datum linearizations and pushes them through one
    batched augmented exponential per chunk. Dense-path sizes only.
    """
    shape = params.shape
    if shape.N > DENSE_LIMIT:
        raise ValueError("batched factors limited to N <= %d" % DENSE_LIMIT)
    if T <= 0.0:
        raise ValueError("T must be positive")
    s0_batch = np.asarray(s0_batch, dtype=np.float64)
    logits_shifts = np.asarray(logits_shifts, dtype=np.float64)
    m = s0_batch.shape[0]
    if max_chunk is None:
        max_chunk = max(1, int(2.0e7 / (shape.N * shape.N)))
    out = []
    for lo in range(0, m, max_chunk):
        hi = min(m, lo + max_chunk)
        a, b = assemble_linearized_batch(params, s0_batch[lo:hi])
        mats, means = phi_batched(a, b, T)
        y = basis_adjoint_nodewise(mats[:, : shape.c, :], shape)
        for i in range(hi - lo):
            out.append(
                MarginalFactor(
                    y_hat=np.ascontiguousarray(y[i, : shape.c - 1]),
                    mean_hat=means[i, : shape.c - 1].copy(),
                    logits_shift=logits_shifts[lo + i].copy(),
                )
            )
    return out


def moments_from_factor(factor, cov, jitter=True):
    """Node marginal moments for given covariance parameters."""
    b_hat = factor.y_hat * cov.d + np.outer(factor.y_hat @ cov.q, cov.q)
    cov_hat = b_hat @ b_hat.T
    cov_hat = 0.5 * (cov_hat + cov_hat.T)
    if jitter:
        chol = _chol_with_jitter(cov_hat)
    else:
        chol = np.linalg.cholesky(cov_hat)
    return MarginalMoments(
        mean_hat=factor.mean_hat.copy(),
        cov_hat=cov_hat,
        chol=chol,
        logits_shift=factor.logits_shift.copy(),
    )


def push_marginal(params, s0, cov, T, logits_shift, method="auto", krylov=None):
    """Classification-node marginal of the pushforward at time T.

    Only the c node rows of expm(TA) (I_n (x) P) M are formed; the full
    N x N covariance is never materialized. cov_hat is the leading
    (c-1) block of the node covariance, which represents it exactly in
    basis coordinates.
    """
    factor = marginal_factor(params, s0, T, logits_shift, method=method, krylov=krylov)
    return moments_from_factor(factor, cov)


def chol_backward(chol, chol_bar):
    """Pull a gradient in the Cholesky factor back to the matrix.

    Given lower-triangular L with A = L L^T and an upstream gradient
    L_bar = df/dL, returns the symmetric df/dA.
    """
    k = chol.shape[0]
    p = np.tril(chol.T @ chol_bar)
    p[np.diag_indices(k)] *= 0.5
    tmp = scipy.linalg.solve_triangular(chol, p, lower=True, trans="T")
    x = scipy.linalg.solve_triangular(chol, tmp.T, lower=True, trans="T").T
    return 0.5 * (x + x.T)


def grad_from_factor(factor, cov, moments, upstream_chol):
    """Gradient of a scalar through (chol of cov_hat) to (d, q)."""
    sbar = chol_backward(moments.chol, np.asarray(upstream_chol, dtype=np.float64))
    y = factor.y_hat
    w = y.T @ sbar @ y
    wm = w * cov.d[None, :] + np.outer(w @ cov.q, cov.q)
    g_m = wm + wm.T
    g_d = np.diag(g_m).copy()
    g_q = 2.0 * (g_m @ cov.q)
    return g_d, g_q


def push_marginal_grad(
    params, s0, cov, T, logits_shift, upstream_mean, upstream_chol,
    method="auto", krylov=None,
):
    """Gradient of a scalar function of the marginal w.r.t. (d, q).

    upstream_mean is accepted for a complete chain-rule interface but
    the mean does not depend on the covariance parameters, so only
    upstream_chol contributes.
    """
    factor = marginal_factor(params, s0, T, logits_shift, method=method, krylov=krylov)
    moments = moments_from_factor(factor, cov)
    return grad_from_factor(factor, cov, moments, upstream_chol)
