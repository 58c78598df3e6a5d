import numpy as np
import pytest
from numpy.testing import assert_allclose

from ldaf.manifold import (
    GraphShape,
    barycenter,
    basis_adjoint_nodewise,
    basis_coords,
    basis_embed,
    basis_embed_nodewise,
    lift,
    lift_inverse_at_barycenter,
    project_tangent,
    replicator_apply,
)


def test_shape_dims():
    shape = GraphShape(n=5, c=3)
    assert shape.N == 15
    assert shape.coord_dim == 10
    with pytest.raises(ValueError):
        GraphShape(n=0, c=3)
    with pytest.raises(ValueError):
        GraphShape(n=5, c=1)


def test_barycenter_uniform():
    shape = GraphShape(n=4, c=5)
    sb = barycenter(shape)
    assert_allclose(sb, np.full(20, 0.2))
    assert_allclose(sb.reshape(4, 5).sum(axis=1), np.ones(4))


def test_project_tangent_properties():
    rng = np.random.default_rng(3)
    shape = GraphShape(n=6, c=4)
    for _ in range(20):
        x = rng.standard_normal(shape.N)
        p = project_tangent(x, shape)
        # row sums vanish, projection is idempotent and self-adjoint
        assert_allclose(p.reshape(6, 4).sum(axis=1), np.zeros(6), atol=1e-13)
        assert_allclose(project_tangent(p, shape), p, atol=1e-13)
        y = rng.standard_normal(shape.N)
        assert_allclose(
            np.dot(project_tangent(y, shape), x),
            np.dot(y, p),
            rtol=1e-12,
        )


def test_lift_rows_are_distributions():
    rng = np.random.default_rng(4)
    shape = GraphShape(n=5, c=3)
    for _ in range(20):
        v = 5.0 * rng.standard_normal(shape.N)
        s = lift(barycenter(shape), v, shape)
        rows = s.reshape(5, 3)
        assert_allclose(rows.sum(axis=1), np.ones(5), rtol=1e-12)
        assert np.all(s > 0.0)


def test_lift_shift_invariance():
    # lift depends on v only through its tangent projection
    rng = np.random.default_rng(5)
    shape = GraphShape(n=4, c=3)
    v = rng.standard_normal(shape.N)
    shift = np.repeat(rng.standard_normal(4), 3)
    s1 = lift(barycenter(shape), v, shape)
    s2 = lift(barycenter(shape), v + shift, shape)
    assert_allclose(s1, s2, rtol=1e-12)


def test_lift_inverse_round_trip():
    rng = np.random.default_rng(6)
    shape = GraphShape(n=5, c=4)
    for _ in range(10):
        v = rng.standard_normal(shape.N)
        vt = project_tangent(v, shape)
        s = lift(barycenter(shape), vt, shape)
        back = lift_inverse_at_barycenter(s, shape)
        assert_allclose(back, vt, atol=1e-10)


def test_replicator_apply_matches_dense():
    rng = np.random.default_rng(7)
    shape = GraphShape(n=4, c=5)
    s = lift(barycenter(shape), rng.standard_normal(shape.N), shape)
    x = rng.standard_normal(shape.N)
    got = replicator_apply(s, x, shape)
    want = np.empty(shape.N)
    for i in range(shape.n):
        si = s.reshape(4, 5)[i]
        r = np.diag(si) - np.outer(si, si)
        want[5 * i : 5 * (i + 1)] = r @ x.reshape(4, 5)[i]
    assert_allclose(got, want, rtol=1e-12)
    # replicator output is tangent
    assert_allclose(got.reshape(4, 5).sum(axis=1), np.zeros(4), atol=1e-13)


def test_replicator_kills_constants():
    shape = GraphShape(n=3, c=4)
    rng = np.random.default_rng(8)
    s = lift(barycenter(shape), rng.standard_normal(shape.N), shape)
    ones = np.ones(shape.N)
    assert_allclose(replicator_apply(s, ones, shape), np.zeros(shape.N), atol=1e-14)


def test_basis_embed_round_trip():
    rng = np.random.default_rng(9)
    z = rng.standard_normal(6)
    w = basis_embed(z)
    assert abs(w.sum()) < 1e-12
    assert_allclose(basis_coords(w), z, rtol=1e-14)
    with pytest.raises(ValueError):
        basis_coords(np.array([1.0, 2.0, 3.0]))


def test_nodewise_embed_adjoint_pair():
    rng = np.random.default_rng(10)
    shape = GraphShape(n=5, c=3)
    z = rng.standard_normal(shape.coord_dim)
    x = rng.standard_normal(shape.N)
    # <E z, x> == <z, E^T x>
    lhs = np.dot(basis_embed_nodewise(z, shape), x)
    rhs = np.dot(z, basis_adjoint_nodewise(x, shape))
    assert_allclose(lhs, rhs, rtol=1e-12)


def test_nodewise_embed_shapes_and_batch():
    shape = GraphShape(n=3, c=4)
    rng = np.random.default_rng(11)
    z = rng.standard_normal((7, shape.coord_dim))
    w = basis_embed_nodewise(z, shape)
    assert w.shape == (7, shape.N)
    assert_allclose(w.reshape(7, 3, 4).sum(axis=2), np.zeros((7, 3)), atol=1e-13)
    single = basis_embed_nodewise(z[2], shape)
    assert_allclose(single, w[2], rtol=0, atol=0)
