import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neuralkem.tomo import (GeometryError, Grid, ProjGeometry, SparseMatrix, back_project, build_system_matrix,
                            forward_project, sensitivity)


def small_P():
    return SparseMatrix.from_scipy(np.array([[1.0, 0.0], [0.5, 0.5]]))


def marched_row(grid, theta, t, steps=200000):
    """Chord lengths by dense sampling along the ray (independent of Siddon)."""
    c, s = np.cos(theta), np.sin(theta)
    L = np.hypot(grid.nx, grid.ny) * grid.pixel_size
    u = (np.arange(steps) + 0.5) / steps * 2 * L - L
    px = t * c - u * s
    py = t * s + u * c
    xe, ye = grid.x_edges(), grid.y_edges()
    inside = (px >= xe[0]) & (px < xe[-1]) & (py >= ye[0]) & (py < ye[-1])
    ix = np.floor((px[inside] - xe[0]) / grid.pixel_size).astype(int)
    iy = np.floor((py[inside] - ye[0]) / grid.pixel_size).astype(int)
    row = np.zeros(grid.n_pixels)
    np.add.at(row, iy * grid.nx + ix, 2 * L / steps)
    return row


def test_single_pixel_chord_is_side_length():
    g = Grid(1, 1, pixel_size=2.0)
    P = build_system_matrix(g, ProjGeometry(1, 1, 2.0))
    assert P.to_dense().tolist() == [[2.0]]


def test_axis_aligned_ray_through_top_row():
    g = Grid(2, 2, pixel_size=1.5)
    # theta = pi/2 gives rays along x; the bin at t = +0.75 passes through row iy = 1
    P = build_system_matrix(g, ProjGeometry(2, 2, 1.5)).to_dense()
    row = P[3]
    assert np.count_nonzero(row) == 2
    np.testing.assert_array_equal(row, [0, 0, 1.5, 1.5])


def test_vertical_rays_hit_columns():
    P = build_system_matrix(Grid(2, 2, 1.0), ProjGeometry(1, 2, 1.0)).to_dense()
    np.testing.assert_array_equal(P, [[1, 0, 1, 0], [0, 1, 0, 1]])


@pytest.mark.parametrize("theta_idx", [0, 3, 5, 7, 11])
def test_rows_match_marched_line_integrals(theta_idx):
    g = Grid(7, 5, pixel_size=2.0)
    geom = ProjGeometry(13, 9, 1.7, radial_offset=0.3)
    P = build_system_matrix(g, geom).to_dense()
    theta = geom.angles()[theta_idx]
    for b, t in enumerate(geom.bin_centers()):
        ref = marched_row(g, theta, t)
        np.testing.assert_allclose(P[theta_idx * geom.n_bins + b], ref, atol=2e-3)


def test_rays_missing_grid_give_empty_rows():
    g = Grid(2, 2, 1.0)
    P = build_system_matrix(g, ProjGeometry(4, 9, 1.0))
    assert P.shape == (36, 4)
    sums = P.row_sums().reshape(4, 9)
    assert np.all(sums[:, [0, -1]] == 0)


def test_fov_outside_grid_is_an_error():
    with pytest.raises(GeometryError):
        build_system_matrix(Grid(2, 2, 1.0), ProjGeometry(3, 1, 1.0, radial_offset=50.0))


def test_hand_examples():
    P = small_P()
    np.testing.assert_array_equal(forward_project(P, np.array([1.0, 1.0])), [1.0, 1.0])
    np.testing.assert_array_equal(back_project(P, np.array([2.0, 2.0])), [3.0, 1.0])
    np.testing.assert_array_equal(sensitivity(P), [1.5, 0.5])
    np.testing.assert_array_equal(forward_project(P, np.zeros(2)), [0, 0])
    np.testing.assert_array_equal(back_project(P, np.zeros(2)), [0, 0])
    x = np.array([0.3, 2.0])
    np.testing.assert_allclose(forward_project(P, 3 * x), 3 * forward_project(P, x))


def test_zero_matrix_has_zero_sensitivity():
    P = SparseMatrix(3, 2, np.zeros(4, dtype=int), [], [])
    np.testing.assert_array_equal(sensitivity(P), [0, 0])


def test_sensitivity_is_column_sum_and_backprojection_of_ones():
    g = Grid(8, 8, 3.0)
    P = build_system_matrix(g, ProjGeometry.covering(g))
    s = sensitivity(P)
    np.testing.assert_array_equal(s, back_project(P, np.ones(P.n_rows)))
    np.testing.assert_allclose(s, P.to_dense().sum(axis=0), rtol=1e-13)
    assert np.all(s > 0)


def test_dimension_mismatch_raises():
    P = small_P()
    with pytest.raises(ValueError):
        forward_project(P, np.ones(3))
    with pytest.raises(ValueError):
        back_project(P, np.ones(1))


def test_adjointness_random_pairs():
    g = Grid(12, 10, 2.0)
    P = build_system_matrix(g, ProjGeometry.covering(g, n_angles=15))
    rng = np.random.default_rng(3)
    for _ in range(100):
        x = rng.normal(size=P.n_cols)
        q = rng.normal(size=P.n_rows)
        Px = forward_project(P, x)
        assert abs(Px @ q - x @ back_project(P, q)) <= 1e-10 * (np.linalg.norm(Px) * np.linalg.norm(q) + 1)


def test_build_is_deterministic():
    g = Grid(9, 9, 3.0)
    geom = ProjGeometry.covering(g)
    assert build_system_matrix(g, geom) == build_system_matrix(g, geom)


def test_multi_plane_matrix_is_block_diagonal():
    g2, g3 = Grid(4, 4, 1.0), Grid(4, 4, 1.0, nz=3)
    P2 = build_system_matrix(g2, ProjGeometry.covering(g2))
    P3 = build_system_matrix(g3, ProjGeometry.covering(g3))
    assert P3.shape == (3 * P2.n_rows, 3 * P2.n_cols)
    np.testing.assert_array_equal(P3.to_dense()[P2.n_rows:2 * P2.n_rows, P2.n_cols:2 * P2.n_cols], P2.to_dense())


def test_ray_weights_scale_rows():
    g = Grid(4, 4, 1.0)
    geom = ProjGeometry.covering(g)
    w = np.linspace(0.5, 1.5, geom.n_rays)
    np.testing.assert_allclose(build_system_matrix(g, geom, w).to_dense(),
                               w[:, None] * build_system_matrix(g, geom).to_dense())


def test_sparse_matrix_validation():
    with pytest.raises(ValueError):
        SparseMatrix(1, 2, [0, 1], [0], [-1.0])
    with pytest.raises(ValueError):
        SparseMatrix(1, 2, [0, 1], [2], [1.0])
    with pytest.raises(ValueError):
        SparseMatrix(2, 2, [0, 2, 1], [0, 1], [1.0, 1.0])
    with pytest.raises(ValueError):
        SparseMatrix(1, 2, [0, 1], [0], [np.nan])
    P = small_P()
    with pytest.raises(ValueError):
        P.values[0] = 5.0


def test_grid_and_geometry_validation():
    with pytest.raises(GeometryError):
        Grid(0, 3)
    with pytest.raises(GeometryError):
        Grid(3, 3, pixel_size=0)
    with pytest.raises(GeometryError):
        ProjGeometry(0, 3, 1.0)
    with pytest.raises(GeometryError):
        build_system_matrix(Grid(2, 2, nz=2), ProjGeometry(2, 3, 1.0))


@settings(max_examples=30, deadline=None)
@given(nx=st.integers(1, 6), ny=st.integers(1, 6), n_angles=st.integers(1, 8), seed=st.integers(0, 2**16))
def test_nonnegativity_and_total_length(nx, ny, n_angles, seed):
    g = Grid(nx, ny, 1.3)
    P = build_system_matrix(g, ProjGeometry.covering(g, n_angles=n_angles))
    assert np.all(P.values >= 0)
    x = np.random.default_rng(seed).uniform(0, 2, g.n_pixels)
    assert np.all(forward_project(P, x) >= 0)
    # a chord can never be longer than the grid diagonal
    assert P.row_sums().max() <= np.hypot(nx, ny) * 1.3 + 1e-9
