"""Geometry of the assignment manifold.

A state assigns one probability simplex to each of n graph nodes with c
classes per node. Everything is stored as a flat float64 vector of
length N = n*c, row-major by node; matrix views are derived on the fly
and never stored. Tangent vectors live in T0, the product of zero-sum
subspaces. The first node (the first c entries) is the designated
classification node where logits are read out.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "GraphShape",
    "barycenter",
    "basis_adjoint_nodewise",
    "basis_coords",
    "basis_embed",
    "basis_embed_nodewise",
    "lift",
    "lift_inverse_at_barycenter",
    "project_tangent",
    "replicator_apply",
]

# States are clamped to this floor after lifting: the manifold is open
# and exact zeros break subsequent log maps.
STATE_FLOOR = 1e-300


@dataclass(frozen=True)
class GraphShape:
    """Graph dimensions: n nodes with c classes each, N = n*c entries."""

    n: int
    c: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("node count must be >= 1, got %r" % (self.n,))
        if self.c < 2:
            raise ValueError("class count must be >= 2, got %r" % (self.c,))

    @property
    def N(self):
        return self.n * self.c

    @property
    def coord_dim(self):
        """Dimension of T0 in basis coordinates: n*(c-1)."""
        return self.n * (self.c - 1)


def _blocks(x, shape, name):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (shape.N,):
        raise ValueError(
            "%s must be a flat vector of length %d, got shape %r"
            % (name, shape.N, x.shape)
        )
    return x.reshape(shape.n, shape.c)


def project_tangent(v, shape):
    """Orthogonal projection onto T0: subtract each node block's mean.

    Idempotent and self-adjoint; the image is exactly the set of vectors
    whose per-node blocks sum to zero.
    """
    b = _blocks(v, shape, "v")
    return (b - b.mean(axis=1, keepdims=True)).ravel()


def barycenter(shape):
    """Uniform state: every class gets mass 1/c at every node."""
    return np.full(shape.N, 1.0 / shape.c)


def lift(s0, v, shape):
    """Exponential lift of tangent v at state s0.

    Per node: s0 * exp(v), renormalized to the simplex. The block max of
    v is subtracted before exponentiation so large tangents cannot
    overflow, and the result is floored at STATE_FLOOR to preserve full
    support in floating point.
    """
    sb = _blocks(s0, shape, "s0")
    vb = _blocks(v, shape, "v")
    z = vb - vb.max(axis=1, keepdims=True)
    w = sb * np.exp(z)
    w /= w.sum(axis=1, keepdims=True)
    return np.maximum(w, STATE_FLOOR).ravel()


def lift_inverse_at_barycenter(s, shape):
    """Tangent vector v with lift(barycenter, v) = s.

    Computed as the blockwise-centered log of s. Only defined for
    strictly positive states.
    """
    sb = _blocks(s, shape, "s")
    if np.any(sb <= 0.0):
        raise ValueError("state entries must be strictly positive")
    lg = np.log(sb)
    return (lg - lg.mean(axis=1, keepdims=True)).ravel()


def replicator_apply(s, u, shape):
    """Replicator operator of s applied to u.

    Per node i: Diag(s_i) u_i - <s_i, u_i> s_i. The per-node matrix is
    symmetric and maps into the zero-sum tangent space.
    """
    sb = _blocks(s, shape, "s")
    ub = _blocks(u, shape, "u")
    su = sb * ub
    return (su - su.sum(axis=1, keepdims=True) * sb).ravel()


def basis_embed(z):
    """Embed a length-(c-1) coordinate vector into the zero-sum space.

    Returns (z, -sum(z)); the columns of the implicit embedding matrix
    span the tangent space of one simplex.
    """
    z = np.asarray(z, dtype=np.float64)
    return np.append(z, -z.sum())


def basis_coords(w, tol=1e-8):
    """Coordinates of a zero-sum vector: inverse of basis_embed.

    Raises if w does not sum to zero within tol (relative to its norm).
    """
    w = np.asarray(w, dtype=np.float64)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if abs(float(w.sum())) > tol * scale:
        raise ValueError("input is not a zero-sum tangent vector")
    return w[:-1].copy()


def basis_embed_nodewise(z, shape):
    """Apply the per-node embedding to stacked coordinates.

    Maps (..., n*(c-1)) arrays to (..., N) by embedding each node's
    (c-1)-block independently.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != shape.coord_dim:
        raise ValueError(
            "last axis must have length %d, got %d"
            % (shape.coord_dim, z.shape[-1])
        )
    blocks = z.reshape(z.shape[:-1] + (shape.n, shape.c - 1))
    out = np.empty(z.shape[:-1] + (shape.n, shape.c))
    out[..., :-1] = blocks
    out[..., -1] = -blocks.sum(axis=-1)
    return out.reshape(z.shape[:-1] + (shape.N,))


def basis_adjoint_nodewise(x, shape):
    """Apply the transpose of the per-node embedding.

    Maps (..., N) arrays to (..., n*(c-1)): per node, the first c-1
    entries minus the last one.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != shape.N:
        raise ValueError(
            "last axis must have length %d, got %d" % (shape.N, x.shape[-1])
        )
    blocks = x.reshape(x.shape[:-1] + (shape.n, shape.c))
    out = blocks[..., :-1] - blocks[..., -1:]
    return out.reshape(x.shape[:-1] + (shape.coord_dim,))
