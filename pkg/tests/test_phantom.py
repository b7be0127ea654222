import numpy as np
import pytest

from neuralkem.phantom import (DEFAULT_SHAPES, REGION_NAMES, FramingSchedule, Phantom, PhantomError, TacTable,
                               composite_frames, default_tac_table, feng_input, make_phantom, poisson_sample,
                               simulate_counts, simulate_study, synthesize_frames, window_frames)
from neuralkem.recon import run_mlem
from neuralkem.tomo import Grid, ProjGeometry, SparseMatrix, build_system_matrix


@pytest.fixture(scope="module")
def desk():
    g = Grid(32, 32, 6.0)
    P = build_system_matrix(g, ProjGeometry.covering(g))
    ph = make_phantom(g)
    sched = FramingSchedule.desk()
    X = synthesize_frames(ph, default_tac_table(sched), sched)
    return g, P, ph, sched, X


def ellipse_perimeter(a, b):
    return np.pi * (3 * (a + b) - np.sqrt((3 * a + b) * (a + 3 * b)))


def test_tumor_disk_pixel_count():
    g = Grid(64, 64, 3.0)
    tumor = [s for s in DEFAULT_SHAPES if s["region"] == "tumor"]
    ph = make_phantom(g, tumor)
    # radius 2.5 px; analytic area 19.6 px, rasterised at half coverage
    assert ph.mask("tumor").sum() == 21


@pytest.mark.parametrize("px", [3.0, 6.0])
def test_region_areas_track_analytic_ellipses(px):
    g = Grid(int(192 / px), int(192 / px), px)
    for shape in DEFAULT_SHAPES:
        n = make_phantom(g, [shape]).mask(shape["region"]).sum()
        a, b = shape["semi_axes_mm"]
        area = np.pi * a * b / px**2
        # within a fraction of the boundary band, not of the whole area
        assert abs(n - area) <= 1 + 0.1 * ellipse_perimeter(a, b) / px


def test_default_phantom_has_all_regions():
    ph = make_phantom(Grid(64, 64, 3.0))
    for name in REGION_NAMES:
        assert ph.mask(name).sum() > 0
    assert ph.mask("blood").sum() == 36


def test_empty_spec_is_background_and_deterministic():
    g = Grid(16, 16, 3.0)
    assert np.all(make_phantom(g, []).label_map == 0)
    big = Grid(64, 64, 3.0)
    np.testing.assert_array_equal(make_phantom(big).label_map, make_phantom(big).label_map)


def test_bad_specs_raise():
    g = Grid(64, 64, 3.0)
    clash = [{"region": "blood", "center_mm": (0.0, 0.0), "semi_axes_mm": (9.0, 5.0)},
             {"region": "tumor", "center_mm": (3.0, 0.0), "semi_axes_mm": (7.5, 7.5)}]
    with pytest.raises(PhantomError):
        make_phantom(g, clash)
    with pytest.raises(PhantomError):
        make_phantom(g, [{"region": "tumor", "center_mm": (90.0, 0.0), "semi_axes_mm": (7.5, 7.5)}])
    with pytest.raises(PhantomError):
        make_phantom(g, [{"region": "liver", "center_mm": (0.0, 0.0), "semi_axes_mm": (7.5, 7.5)}])


def test_3d_phantom_repeats_slices():
    ph = make_phantom(Grid(32, 32, 6.0, nz=3))
    planes = ph.label_map.reshape(3, -1)
    np.testing.assert_array_equal(planes[0], planes[2])


def test_synthesize_lookup():
    g = Grid(2, 1, 1.0)
    ph = Phantom(np.array([0, 1]), g, ("a", "b"))
    sched = FramingSchedule((10.0,))
    X = synthesize_frames(ph, TacTable(("a", "b"), [[2.0], [5.0]]), sched)
    np.testing.assert_array_equal(X, [[2.0, 5.0]])
    one = Phantom(np.zeros(4, dtype=int), Grid(2, 2), ("a",))
    np.testing.assert_array_equal(synthesize_frames(one, TacTable(("a",), [[1.0]]), sched), np.ones((1, 4)))
    with pytest.raises(PhantomError):
        synthesize_frames(ph, TacTable(("a",), [[1.0]]), sched)


def test_schedules():
    full = FramingSchedule.protocol()
    assert full.n_frames == 24 and sum(full.durations) == 3600
    desk = FramingSchedule.desk()
    assert desk.durations == (20.0, 60.0, 300.0)
    assert desk.starts == (20.0, 420.0, 3300.0)
    with pytest.raises(PhantomError):
        FramingSchedule((10.0, -1.0))
    with pytest.raises(PhantomError):
        FramingSchedule((10.0, 10.0), (0.0, 5.0))


def test_tac_shapes():
    sched = FramingSchedule.protocol()
    tac = default_tac_table(sched)
    blood, tumor, gray, white = (tac.row(n) for n in ("blood", "tumor", "gray", "white"))
    assert np.argmax(blood) < 4                         # early blood peak
    assert np.all(np.diff(tumor[4:]) > 0)               # tissue keeps accumulating
    assert tumor[-1] > gray[-1] > white[-1] > 0
    assert np.all(tac.row("background") == 0)
    assert feng_input(np.array([0.0, 5.0]))[1] == 0.0


def test_simulate_counts_scale_and_fraction(desk):
    g, P, ph, sched, X = desk
    fc = simulate_counts(P, X[2], 300.0, 0.2, target_total_counts=4e5, seed=7)
    assert abs(fc.expected.sum() - 4e5) <= 1e-6 * 4e5
    assert abs(fc.background.sum() - 0.2 * fc.expected.sum()) <= 1e-9 * fc.expected.sum()
    assert np.ptp(fc.background) == 0
    assert np.all(fc.noisy == np.round(fc.noisy)) and np.all(fc.noisy >= 0)
    again = simulate_counts(P, X[2], 300.0, 0.2, target_total_counts=4e5, seed=7)
    np.testing.assert_array_equal(fc.noisy, again.noisy)


def test_simulate_counts_zero_activity():
    P = SparseMatrix.from_scipy(np.eye(3))
    fc = simulate_counts(P, np.zeros(3), 10.0, 0.0, scale=1.0)
    np.testing.assert_array_equal(fc.noisy, 0)
    with pytest.raises(ValueError):
        simulate_counts(P, np.zeros(3), 10.0, 0.0, target_total_counts=100.0)
    with pytest.raises(ValueError):
        simulate_counts(P, np.ones(3), 10.0, 1.0, target_total_counts=100.0)


def test_study_total_and_frame_targets(desk):
    g, P, ph, sched, X = desk
    study = simulate_study(P, g, X, sched, 0.2, target_total_counts=5e5, seed=3)
    total = (study.noisefree_sinos + study.background_sinos).sum()
    assert abs(total - 5e5) <= 1e-6 * 5e5
    study = simulate_study(P, g, X, sched, 0.2, frame_counts=[2e4, 1.2e5, 4e5], seed=3)
    np.testing.assert_allclose((study.noisefree_sinos + study.background_sinos).sum(axis=1), [2e4, 1.2e5, 4e5],
                               rtol=1e-9)
    np.testing.assert_allclose(study.noisy_sinos.sum(axis=1), [2e4, 1.2e5, 4e5], rtol=0.02)


def test_poisson_repeatable_and_unbiased():
    lam = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(poisson_sample(lam, 42), poisson_sample(lam, 42))
    assert not np.array_equal(poisson_sample(lam, 42, frame=1), poisson_sample(lam, 42, frame=0))
    draws = poisson_sample(np.tile(lam, 100000), 42).reshape(-1, 4)
    se = np.sqrt(lam / draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - lam) <= 3 * se)


@pytest.mark.parametrize("lam", [0.5, 5.0, 50.0, 500.0])
def test_poisson_mean_and_variance(lam):
    n = 100000
    d = poisson_sample(np.full(n, lam), seed=11)
    assert abs(d.mean() - lam) <= 3 * np.sqrt(lam / n)
    # sample variance standard error for a Poisson law: sqrt((lam + 2 lam^2) / n)
    assert abs(d.var(ddof=1) - lam) <= 3 * np.sqrt((lam + 2 * lam**2) / n)


def test_window_frames():
    sched = FramingSchedule.desk()
    assert window_frames(sched, [(20, 480), (3300, 3600)]) == [[0, 1], [2]]
    with pytest.raises(PhantomError):
        window_frames(sched, [(20, 450), (3300, 3600)])
    with pytest.raises(PhantomError):
        window_frames(sched, [(20, 480)])
    full = FramingSchedule.protocol()
    thirds = window_frames(full, [(0, 1200), (1200, 2400), (2400, 3600)])
    assert [len(w) for w in thirds] == [16, 4, 4]
    four = window_frames(full, [(0, 300), (300, 1200), (1200, 2400), (2400, 3600)])
    assert sum(len(w) for w in four) == 24


def test_whole_scan_composite_is_full_data_mlem(desk):
    g, P, ph, sched, X = desk
    study = simulate_study(P, g, X, sched, 0.2, frame_counts=[2e4, 1.2e5, 4e5], seed=5)
    z = composite_frames(study, [(20, 3600)], P, n_iter=20)
    factor = sum(study.frame_factor(m) for m in range(3))
    ref = run_mlem(P.scaled(factor), study.noisy_sinos.sum(axis=0), study.background_sinos.sum(axis=0), 20).x
    np.testing.assert_array_equal(z[0], ref)
    z2 = composite_frames(study, [(20, 480), (3300, 3600)], P, n_iter=20, source="noisefree")
    assert z2.shape == (2, g.n_pixels)
    assert np.all(np.isfinite(z2)) and np.all(z2 >= 0)
