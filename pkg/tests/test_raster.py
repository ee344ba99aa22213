import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from osis.raster import (DESK_GEOMETRY, GridGeometry, bilinear_sample, bilinear_weights, gather, scatter,
                         trilinear_sample, trilinear_weights, voxelize)
from oracles import corner_weights

G = GridGeometry((0.0, 0.0, 0.0), 1.0, 4, 5, 3)


def node(ix, iy, iz, g=G):
    return np.array([g.origin[0] + (ix + 0.5) * g.resolution, g.origin[1] + (iy + 0.5) * g.resolution,
                     g.origin[2] + (iz + 0.5) * g.dz])


def test_geometry_validation():
    with pytest.raises(ValueError):
        GridGeometry((0, 0, 0), 0.0, 4, 4, 4)
    with pytest.raises(ValueError):
        GridGeometry((0, 0, 0), 1.0, 0, 4, 4)


def test_point_at_node_puts_all_mass_there():
    b = voxelize(node(2, 1, 1)[None], G)
    assert b.data[1, 1, 2] == 1.0
    assert b.data.sum() == 1.0


def test_cell_midpoint_spreads_eighths():
    p = node(1, 1, 0) + 0.5
    b = voxelize(p[None], G)
    nz = b.data[b.data > 0]
    assert len(nz) == 8 and np.allclose(nz, 0.125)


def test_fractional_offsets_match_product_oracle():
    p = node(1, 2, 0) + np.array([0.25, 0.5, 0.75])
    b = voxelize(p[None], G)
    expected = np.zeros_like(b.data)
    for (iz, iy, ix), w in corner_weights(p, G).items():
        expected[iz, iy, ix] += w
    np.testing.assert_allclose(b.data, expected, atol=1e-15)


def test_out_of_roi_points_are_counted():
    b = voxelize(np.array([[-1.0, 0.5, 0.5], [0.5, 0.5, 0.5], [9.0, 9.0, 9.0]]), G)
    assert b.dropped == 2 and b.data.sum() == pytest.approx(1.0)


def test_desk_geometry():
    assert (DESK_GEOMETRY.H, DESK_GEOMETRY.W, DESK_GEOMETRY.Z) == (64, 64, 8)
    assert DESK_GEOMETRY.extent == (16.0, 16.0, 4.0)


def test_trilinear_sample_constant_and_corner():
    vol = np.full((2, 3, 4, 5), 3.5)
    np.testing.assert_allclose(trilinear_sample(vol, np.array([[1.3, 2.2, 0.7]]), G), [[3.5, 3.5]])
    rng = np.random.default_rng(0)
    vol = rng.normal(size=(2, 3, 4, 5))
    out = trilinear_sample(vol, node(3, 2, 1)[None], G)
    np.testing.assert_array_equal(out[0], vol[:, 1, 2, 3])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.5, 4.49), st.floats(0.5, 3.49), st.floats(0.5, 2.49), st.integers(0, 1000))
def test_trilinear_sample_matches_oracle(x, y, z, seed):
    vol = np.random.default_rng(seed).normal(size=(3, 3, 4, 5))
    p = np.array([x, y, z])
    expected = sum(w * vol[:, iz, iy, ix] for (iz, iy, ix), w in corner_weights(p, G).items())
    np.testing.assert_allclose(trilinear_sample(vol, p[None], G)[0], expected, rtol=1e-12, atol=1e-12)


def test_bilinear_sample_constant_corner_and_oracle():
    m = np.full((2, 4, 5), -1.25)
    np.testing.assert_allclose(bilinear_sample(m, np.array([[2.1, 1.7]]), G), [[-1.25, -1.25]])
    rng = np.random.default_rng(1)
    m = rng.normal(size=(2, 4, 5))
    np.testing.assert_array_equal(bilinear_sample(m, np.array([[3.5, 0.5]]), G)[0], m[:, 0, 3])
    x, y = 1.8, 2.3
    u, v = x - 0.5, y - 0.5
    i, j = int(u), int(v)
    fu, fv = u - i, v - j
    expected = ((1 - fu) * (1 - fv) * m[:, j, i] + fu * (1 - fv) * m[:, j, i + 1]
                + (1 - fu) * fv * m[:, j + 1, i] + fu * fv * m[:, j + 1, i + 1])
    np.testing.assert_allclose(bilinear_sample(m, np.array([[x, y]]), G)[0], expected, rtol=1e-12)


points = st.tuples(st.floats(-1.0, 6.0), st.floats(-1.0, 5.0), st.floats(-1.0, 4.0))


@settings(max_examples=50, deadline=None)
@given(st.lists(points, min_size=1, max_size=10))
def test_partition_of_unity(pts):
    _, w = trilinear_weights(np.array(pts), G)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(1), 1.0, rtol=1e-12)
    _, w2 = bilinear_weights(np.array(pts)[:, :2], G)
    np.testing.assert_allclose(w2.sum(1), 1.0, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(points, min_size=1, max_size=10), st.integers(0, 1000))
def test_gather_is_adjoint_of_scatter(pts, seed):
    rng = np.random.default_rng(seed)
    idx, w = trilinear_weights(np.array(pts), G)
    size = G.Z * G.H * G.W
    grid = rng.normal(size=(2, size))
    vals = rng.normal(size=(len(pts), 2))
    lhs = np.sum(scatter(vals, idx, w, size) * grid)
    rhs = np.sum(gather(grid, idx, w) * vals)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(points, st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_sampling_is_linear(p, a, b, seed):
    rng = np.random.default_rng(seed)
    g1, g2 = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(2, 3, 4, 5))
    q = np.array([p])
    lhs = trilinear_sample(a * g1 + b * g2, q, G)
    rhs = a * trilinear_sample(g1, q, G) + b * trilinear_sample(g2, q, G)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10)
