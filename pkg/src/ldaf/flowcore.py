"""Assignment-flow dynamics and their linearization.

The nonlinear flow moves a state s along s' = R_s(Omega s). Linearizing
at the initial state s0 gives an affine tangent ODE v' = A v + b with

    A = Pi0 Omega R_{s0},    b = Pi0 Omega s0,

whose solution is v(t) = t*phi(t*A) b, phi(z) = (exp(z) - 1)/z. This
module provides the linearized system as a matrix-free operator, dense
and Krylov evaluations of expm(tA)u and t*phi(tA)u, Frechet-derivative
machinery for training, a batched matrix exponential, and the nonlinear
integrator used as a validation oracle.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .manifold import (
    barycenter,
    lift,
    project_tangent,
    replicator_apply,
)

__all__ = [
    "DENSE_LIMIT",
    "FlowParams",
    "KrylovConfig",
    "KrylovError",
    "LinearizedSystem",
    "assemble_linearized",
    "expm_apply",
    "expm_batched",
    "frechet_expm_apply",
    "integrate_nonlinear_daf",
    "phi_apply",
    "phi_batched",
    "solve_ldaf",
]

# Systems up to this size use dense Pade scaling-and-squaring; larger
# ones must go through the Krylov path.
DENSE_LIMIT = 512


class KrylovError(RuntimeError):
    """Krylov evaluation failed to reach the requested tolerance."""


@dataclass(frozen=True)
class KrylovConfig:
    max_subspace_dim: int = 30
    tolerance: float = 1e-10
    max_restarts: int = 10

    def __post_init__(self):
        if self.max_subspace_dim < 1:
            raise ValueError("max_subspace_dim must be positive")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_restarts < 1:
            raise ValueError("max_restarts must be positive")


class FlowParams:
    """Symmetric coupling matrix over all node/class entries.

    The matrix is symmetrized on construction and after every update so
    the invariant holds regardless of how gradients were assembled.
    """

    def __init__(self, shape, omega):
        omega = np.asarray(omega, dtype=np.float64)
        if omega.shape != (shape.N, shape.N):
            raise ValueError(
                "omega must be %d x %d, got %r" % (shape.N, shape.N, omega.shape)
            )
        self.shape = shape
        self.omega = 0.5 * (omega + omega.T)

    def update_omega(self, omega):
        self.omega = 0.5 * (omega + omega.T)


def _project_cols(x, shape):
    # Pi0 applied to each column of a stack of matrices: remove the
    # per-node block mean along the row axis.
    b = x.reshape(x.shape[:-2] + (shape.n, shape.c, x.shape[-1]))
    return (b - b.mean(axis=-2, keepdims=True)).reshape(x.shape)


def dense_replicator(s0, shape):
    """Block-diagonal replicator matrix of s0, shape (N, N)."""
    sb = np.asarray(s0, dtype=np.float64).reshape(shape.n, shape.c)
    blocks = np.zeros((shape.n, shape.c, shape.c))
    idx = np.arange(shape.c)
    blocks[:, idx, idx] = sb
    blocks -= sb[:, :, None] * sb[:, None, :]
    out = np.zeros((shape.N, shape.N))
    for i in range(shape.n):
        sl = slice(i * shape.c, (i + 1) * shape.c)
        out[sl, sl] = blocks[i]
    return out


class LinearizedSystem:
    """Matrix-free A = Pi0 Omega R_{s0} with offset b = Pi0 Omega s0.

    A and its transpose are applied through the manifold operators; the
    dense materialization is cached for the direct evaluation paths.
    """

    def __init__(self, params, s0):
        shape = params.shape
        s0 = np.asarray(s0, dtype=np.float64)
        if s0.shape != (shape.N,):
            raise ValueError(
                "s0 must be a flat vector of length %d, got %r"
                % (shape.N, s0.shape)
            )
        self.shape = shape
        self.omega = params.omega
        self.s0 = s0.copy()
        self.b = project_tangent(self.omega @ self.s0, shape)
        self._dense_a = None

    @property
    def n_dim(self):
        return self.shape.N

    def a_apply(self, u):
        return project_tangent(
            self.omega @ replicator_apply(self.s0, u, self.shape), self.shape
        )

    def at_apply(self, u):
        # All three factors are symmetric, so A^T = R_{s0} Omega Pi0.
        return replicator_apply(
            self.s0, self.omega @ project_tangent(u, self.shape), self.shape
        )

    def dense_a(self):
        if self._dense_a is None:
            m = self.omega @ dense_replicator(self.s0, self.shape)
            self._dense_a = _project_cols(m, self.shape)
        return self._dense_a


def assemble_linearized(params, s0):
    """Linearize the flow at s0, returning the affine tangent system."""
    return LinearizedSystem(params, s0)


def _resolve_method(sys, method):
    if method == "auto":
        return "dense" if sys.n_dim <= DENSE_LIMIT else "krylov"
    if method not in ("dense", "krylov"):
        raise ValueError("method must be 'auto', 'dense' or 'krylov'")
    if method == "dense" and sys.n_dim > DENSE_LIMIT:
        raise ValueError(
            "dense path limited to N <= %d, got N = %d" % (DENSE_LIMIT, sys.n_dim)
        )
    return method


def _arnoldi(apply_fn, v0, beta, max_dim):
    """Arnoldi process with one reorthogonalization pass.

    Returns (V, H, m, happy) where V holds m (or m+1) orthonormal basis
    rows, H is the (m+1) x m Hessenberg matrix, and happy indicates an
    invariant subspace was found (H[m, m-1] == 0).
    """
    n = v0.shape[0]
    V = np.empty((max_dim + 1, n))
    H = np.zeros((max_dim + 1, max_dim))
    V[0] = v0 / beta
    for j in range(max_dim):
        w = apply_fn(V[j])
        for _ in range(2):
            coef = V[: j + 1] @ w
            w = w - coef.T @ V[: j + 1]
            H[: j + 1, j] += coef
        hn = float(np.linalg.norm(w))
        col_scale = float(np.linalg.norm(H[: j + 2, j])) + hn
        if hn <= 1e-14 * max(col_scale, 1.0):
            return V[: j + 1], H[: j + 2, : j + 1], j + 1, True
        H[j + 1, j] = hn
        V[j + 1] = w / hn
    return V[:max_dim], H[: max_dim + 1, :max_dim], max_dim, False


def _krylov_expm(apply_fn, v, t, config):
    """expm(t*Op) v via Arnoldi with adaptive time substeps.

    Each substep projects onto a Krylov subspace of the current iterate
    and advances by the largest dt whose residual-based local error
    estimate stays below the tolerance. The substep budget is
    config.max_restarts.
    """
    v = np.asarray(v, dtype=np.float64)
    if t == 0.0:
        return v.copy()
    beta0 = float(np.linalg.norm(v))
    if beta0 == 0.0:
        return v.copy()

    w = v.copy()
    sign = 1.0 if t > 0 else -1.0
    t_abs = abs(t)
    done = 0.0
    dt = t_abs
    substeps = 0
    while done < t_abs * (1.0 - 1e-14):
        if substeps >= config.max_restarts:
            raise KrylovError(
                "no convergence within %d substeps (advanced %.3g of %.3g)"
                % (config.max_restarts, done, t_abs)
            )
        beta = float(np.linalg.norm(w))
        if beta == 0.0:
            return w
        V, H, m, happy = _arnoldi(apply_fn, w, beta, config.max_subspace_dim)
        dt_try = min(dt, t_abs - done)
        if happy:
            # Invariant subspace: the projected exponential is exact for
            # any step, so finish the remaining time at once.
            dt_try = t_abs - done
            small = scipy.linalg.expm(sign * dt_try * H[:m, :m])
            w = (beta * small[:, 0]) @ V[:m]
            return w
        h_next = H[m, m - 1]
        for _ in range(60):
            small = scipy.linalg.expm(sign * dt_try * H[:m, :m])
            if np.isfinite(small).all():
                err = beta * h_next * abs(small[m - 1, 0]) * dt_try
            else:
                err = np.inf
            if err <= 0.5 * config.tolerance * beta:
                break
            dt_try *= 0.5
        else:
            raise KrylovError("local error estimate failed to contract")
        w = (beta * small[:, 0]) @ V[:m]
        done += dt_try
        dt = 2.0 * dt_try if err <= 0.05 * config.tolerance * beta else dt_try
        substeps += 1
    return w


def _augmented_phi_apply(apply_fn, n, t, u):
    """Operator for t*phi(t*Op)u: embed u as a source in dimension n+1."""

    def aug(x):
        out = np.empty(n + 1)
        out[:n] = apply_fn(x[:n]) + x[n] * u
        out[n] = 0.0
        return out

    return aug


def expm_apply(sys, t, u, method="auto", krylov=None, transpose=False):
    """Evaluate expm(t*A) u for the linearized system.

    The dense path forms expm of the materialized matrix; the Krylov
    path applies the matrix-free operator through Arnoldi substeps.
    With transpose=True the transposed operator is used.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (sys.n_dim,):
        raise ValueError("u must have length %d" % sys.n_dim)
    if t == 0.0:
        return u.copy()
    how = _resolve_method(sys, method)
    if how == "dense":
        a = sys.dense_a()
        mat = scipy.linalg.expm(t * (a.T if transpose else a))
        return mat @ u
    config = krylov if krylov is not None else KrylovConfig()
    apply_fn = sys.at_apply if transpose else sys.a_apply
    return _krylov_expm(apply_fn, u, t, config)


def phi_apply(sys, t, u, method="auto", krylov=None):
    """Evaluate t*phi(t*A) u, phi(z) = (exp(z)-1)/z.

    Both paths reduce to a plain exponential of the system augmented by
    one source dimension: the last column of expm([[tA, tu], [0, 0]])
    is exactly t*phi(tA)u.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (sys.n_dim,):
        raise ValueError("u must have length %d" % sys.n_dim)
    if t <= 0.0:
        raise ValueError("t must be positive, got %r" % (t,))
    how = _resolve_method(sys, method)
    n = sys.n_dim
    if how == "dense":
        aug = np.zeros((n + 1, n + 1))
        aug[:n, :n] = t * sys.dense_a()
        aug[:n, n] = t * u
        return scipy.linalg.expm(aug)[:n, n]
    config = krylov if krylov is not None else KrylovConfig()
    start = np.zeros(n + 1)
    start[n] = 1.0
    out = _krylov_expm(_augmented_phi_apply(sys.a_apply, n, t, u), start, t, config)
    return out[:n]


def solve_ldaf(params, s0, T, method="auto", krylov=None):
    """Closed-form solution v(T) = T*phi(T*A) b of the linearized flow."""
    if T <= 0.0:
        raise ValueError("T must be positive, got %r" % (T,))
    sys = assemble_linearized(params, s0)
    return phi_apply(sys, T, sys.b, method=method, krylov=krylov)


def frechet_expm_apply(sys, t, direction, u):
    """Directional derivative of the exponential action.

    Returns L(tA, tE) u where L is the Frechet derivative of expm and E
    is the given dense direction matrix, computed from the top-right
    block of the doubled block-triangular exponential. Dense path only.
    """
    n = sys.n_dim
    if n > DENSE_LIMIT:
        raise ValueError("Frechet path limited to N <= %d" % DENSE_LIMIT)
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != (n, n):
        raise ValueError("direction must be %d x %d" % (n, n))
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (n,):
        raise ValueError("u must have length %d" % n)
    big = np.zeros((2 * n, 2 * n))
    a = t * sys.dense_a()
    big[:n, :n] = a
    big[n:, n:] = a
    big[:n, n:] = t * direction
    return scipy.linalg.expm(big)[:n, n:] @ u


def integrate_nonlinear_daf(params, s0, T, step=1e-3):
    """Explicit Euler on the lifted nonlinear flow; validation oracle.

    Integrates v' = Pi0 Omega lift(s0, v) in the tangent space and maps
    back through the lift, which keeps the state on the manifold by
    construction. Returns s(T).
    """
    if T < 0.0:
        raise ValueError("T must be nonnegative")
    if step <= 0.0:
        raise ValueError("step must be positive")
    shape = params.shape
    s0 = np.asarray(s0, dtype=np.float64)
    if T == 0.0:
        return s0.copy()
    n_steps = max(1, int(round(T / step)))
    h = T / n_steps
    v = np.zeros(shape.N)
    for _ in range(n_steps):
        s = lift(s0, v, shape)
        v = v + h * project_tangent(params.omega @ s, shape)
    return lift(s0, v, shape)


# Pade-13 coefficients for the scaling-and-squaring exponential.
_PADE13 = (
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
)
_PADE13_THETA = 5.371920351148152


def expm_batched(mats):
    """Matrix exponential of a stack of square matrices.

    Pade-13 scaling-and-squaring applied uniformly across the batch,
    with per-matrix squaring counts. Matches the dense single-matrix
    exponential to near machine precision and is much faster than a
    Python loop for many small matrices.
    """
    mats = np.asarray(mats, dtype=np.float64)
    if mats.ndim < 2 or mats.shape[-1] != mats.shape[-2]:
        raise ValueError("expected a stack of square matrices")
    lead = mats.shape[:-2]
    n = mats.shape[-1]
    a = mats.reshape((-1, n, n))
    norms = np.abs(a).sum(axis=1).max(axis=1)  # 1-norms
    with np.errstate(divide="ignore"):
        squarings = np.ceil(np.log2(norms / _PADE13_THETA))
    squarings = np.clip(np.nan_to_num(squarings, neginf=0.0), 0.0, 64.0).astype(int)
    squarings[norms <= _PADE13_THETA] = 0
    a = a / np.exp2(squarings)[:, None, None]

    b = _PADE13
    eye = np.broadcast_to(np.eye(n), a.shape)
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a2 @ a4
    u = a @ (
        a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
        + b[7] * a6
        + b[5] * a4
        + b[3] * a2
        + b[1] * eye
    )
    v = (
        a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
        + b[6] * a6
        + b[4] * a4
        + b[2] * a2
        + b[0] * eye
    )
    out = np.linalg.solve(v - u, v + u)
    max_sq = int(squarings.max(initial=0))
    for level in range(max_sq):
        todo = squarings > level
        if not todo.any():
            break
        out[todo] = out[todo] @ out[todo]
    return out.reshape(lead + (n, n))


def phi_batched(a_stack, b_stack, t):
    """Batched (expm(tA), t*phi(tA)b) via the augmented exponential.

    a_stack has shape (..., N, N), b_stack (..., N); returns a pair of
    arrays with the exponentials and the phi actions.
    """
    a_stack = np.asarray(a_stack, dtype=np.float64)
    b_stack = np.asarray(b_stack, dtype=np.float64)
    n = a_stack.shape[-1]
    lead = a_stack.shape[:-2]
    aug = np.zeros(lead + (n + 1, n + 1))
    aug[..., :n, :n] = t * a_stack
    aug[..., :n, n] = t * b_stack
    big = expm_batched(aug)
    return big[..., :n, :n], big[..., :n, n]


def assemble_linearized_batch(params, s0_batch):
    """Per-datum (A, b) stacks for a batch of initial states.

    Dense assembly: A = Pi0 Omega R_{s0} as full matrices, b = Pi0
    Omega s0 as vectors. Returns (a_stack, b_stack) with shapes
    (m, N, N) and (m, N).
    """
    shape = params.shape
    s0_batch = np.asarray(s0_batch, dtype=np.float64)
    if s0_batch.ndim != 2 or s0_batch.shape[1] != shape.N:
        raise ValueError("s0_batch must have shape (m, %d)" % shape.N)
    b = s0_batch.reshape(-1, shape.n, shape.c)
    blocks = -b[:, :, :, None] * b[:, :, None, :]
    idx = np.arange(shape.c)
    blocks[:, :, idx, idx] += b
    r = np.zeros((b.shape[0], shape.N, shape.N))
    for i in range(shape.n):
        sl = slice(i * shape.c, (i + 1) * shape.c)
        r[:, sl, sl] = blocks[:, i]
    a_stack = _project_stack_rows(np.matmul(params.omega, r), shape)
    vb = (s0_batch @ params.omega).reshape(-1, shape.n, shape.c)
    b_stack = (vb - vb.mean(axis=2, keepdims=True)).reshape(-1, shape.N)
    return a_stack, b_stack


def _project_stack_rows(x, shape):
    # Pi0 applied from the left to a stack of matrices.
    blocks = x.reshape(x.shape[:-2] + (shape.n, shape.c, x.shape[-1]))
    return (blocks - blocks.mean(axis=-2, keepdims=True)).reshape(x.shape)


def frechet_expm_batched(m_stack, e_stack):
    """Directional derivatives L(M, E) of expm for a stack of pairs.

    Uses the block-triangular identity expm([[M, E], [0, M]]) whose
    top-right block is the Frechet derivative. Doubles the matrix size,
    so intended for small to moderate N.
    """
    m_stack = np.asarray(m_stack, dtype=np.float64)
    e_stack = np.asarray(e_stack, dtype=np.float64)
    if m_stack.shape != e_stack.shape:
        raise ValueError("matrix and direction stacks must share a shape")
    n = m_stack.shape[-1]
    lead = m_stack.shape[:-2]
    big = np.zeros(lead + (2 * n, 2 * n))
    big[..., :n, :n] = m_stack
    big[..., :n, n:] = e_stack
    big[..., n:, n:] = m_stack
    return expm_batched(big)[..., :n, n:]
