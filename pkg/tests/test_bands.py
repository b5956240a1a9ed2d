import numpy as np
import pytest

from magbloch.bands import (
    BandTable,
    EigensolverError,
    KPath,
    band_structure,
    flat_band_scan,
    k_grid,
    solve_lowest,
    worker_count,
)
from magbloch.fiber import assemble_fiber
from magbloch.grid import build_grid
from magbloch.problem import FourierTerm


def exact_free(k, n=1):
    m = np.array(list(np.ndindex(5, 5, 5))) - 2
    return np.sort(np.sum((np.asarray(k) + m) ** 2, axis=1))[:n]


def test_free_k0(free):
    s = assemble_fiber(free, build_grid("fiber", 6, 6, 6, 0), (0, 0, 0))
    vals, vecs, res = solve_lowest(s, 1)
    assert abs(vals[0]) <= 1e-10
    v = vecs[:, 0] / vecs[0, 0]
    np.testing.assert_allclose(v, 1.0, atol=1e-8)


def test_free_double_band(free):
    s = assemble_fiber(free, build_grid("fiber", 16, 16, 16, 0), (0.5, 0, 0))
    vals, _, res = solve_lowest(s, 2)
    np.testing.assert_allclose(vals, 0.25, rtol=0.05)
    assert res.max() <= 1e-8


def test_landau_k0(landau):
    s = assemble_fiber(landau, build_grid("fiber", 16, 16, 16, 1), (0, 0, 0))
    vals, _, _ = solve_lowest(s, 1)
    assert vals[0] == pytest.approx(1 / (2 * np.pi), rel=0.10)


def test_dense_and_iterative_agree(suite):
    from magbloch import bands

    p = suite["magnetic_crystal"]
    s = assemble_fiber(p, build_grid("fiber", 12, 12, 12, 1), (0.1, 0.2, 0.3))
    assert s.ndof > bands.DENSE_LIMIT
    it, vecs, res = solve_lowest(s, 4, seed=3)
    dense = np.linalg.eigvalsh(s.scaled().toarray())[:4]
    np.testing.assert_allclose(it, dense, atol=1e-7)
    gram = vecs.conj().T @ (s.mass[:, None] * vecs)
    np.testing.assert_allclose(gram, np.eye(4), atol=1e-8)


def test_solver_arguments(free):
    s = assemble_fiber(free, build_grid("fiber", 4, 4, 4, 0), (0, 0, 0))
    with pytest.raises(ValueError):
        solve_lowest(s, 0)
    with pytest.raises(ValueError):
        solve_lowest(s, 2, tol=0.0)


def test_unreachable_tolerance_reports(suite):
    s = assemble_fiber(suite["crystal"], build_grid("fiber", 5, 5, 5, 0), (0.1, 0.2, 0.3))
    with pytest.raises(EigensolverError) as info:
        solve_lowest(s, 2, tol=1e-30)
    assert info.value.eigenvalues is not None and len(info.value.residuals) == 2


def test_free_along_k3(free):
    g = build_grid("fiber", 16, 16, 16, 0)
    path = [(0, 0, t) for t in np.linspace(0, 0.5, 6)]
    table = band_structure(free, g, path, 1)
    exact = np.linspace(0, 0.5, 6) ** 2
    np.testing.assert_allclose(table.values[0], exact, rtol=0.05, atol=1e-10)


def test_shift_identity(suite):
    p = suite["crystal"]
    q = p.with_terms([FourierTerm("V", (0, 0, 0), 5.0)])
    g = build_grid("fiber", 6, 6, 6, 0)
    ks = [(0.1, 0.2, 0.3), (0.5, 0.5, 0.0)]
    a = band_structure(p, g, ks, 3)
    b = band_structure(q, g, ks, 3)
    np.testing.assert_allclose(b.values, a.values + 5.0, atol=1e-10)


@pytest.mark.parametrize("name", ["crystal", "magnetic_crystal"])
def test_reflection_symmetry_of_bands(suite, name):
    """J conjugates h(k1, k2, k3) to h(k1, k2, -k3), so the spectra coincide."""
    p = suite[name]
    g = build_grid("fiber", 6, 6, 6, p.flux_integer)
    for k in [(0.2, 0.3, 0.3), (0.7, 0.1, 0.45)]:
        kr = (k[0], k[1], -k[2])
        a, b = band_structure(p, g, [k, kr], 4).values.T
        np.testing.assert_allclose(a, b, atol=2e-8)


def test_landau_k1_drift_shrinks(landau):
    drift = []
    for n in (8, 16):
        t = band_structure(landau, build_grid("fiber", n, n, n, 1),
                           [(k1, 0, 0) for k1 in (0, 0.25, 0.5)], 1)
        drift.append(np.ptp(t.values[0]))
    assert drift[1] < 0.5 * drift[0]


def test_free_convergence_random_k(free):
    """Error decreases by at least 0.7 per doubling, or the grid is already exact."""
    rng = np.random.default_rng(7)
    for k in rng.random((5, 3)):
        ex = exact_free(k)[0]
        err = [abs(band_structure(free, build_grid("fiber", n, n, n, 0), [k], 1).values[0, 0] - ex)
               for n in (8, 16)]
        assert err[1] <= 0.7 * err[0] or err[1] <= 1e-12, (k, err)


# k-paths and tables ---------------------------------------------------------------

def test_kpath_closed_count():
    path = KPath(((0, 0, 0), (0.5, 0, 0), (0.5, 0.5, 0)), samples=5)
    pts = path.points()
    assert len(pts) == 15
    np.testing.assert_array_equal(pts[0], [0, 0, 0])
    np.testing.assert_allclose(pts[5], [0.5, 0, 0])


def test_kpath_open_count():
    path = KPath(((0, 0, 0), (0.5, 0, 0), (0.5, 0.5, 0)), samples=5, closed=False)
    pts = path.points()
    assert len(pts) == 11
    np.testing.assert_allclose(pts[-1], [0.5, 0.5, 0])


@pytest.mark.parametrize("bad", [dict(waypoints=((0, 0, 0),)), dict(waypoints=((0, 0), (1, 1))),
                                 dict(waypoints=((0, 0, 0), (1, 0, 0)), samples=1)])
def test_kpath_rejections(bad):
    with pytest.raises(ValueError):
        KPath(**bad)


def test_band_table_rows_and_order(free):
    path = KPath(((0, 0, 0), (0.5, 0, 0), (0.5, 0.5, 0.5)), samples=3)
    t = band_structure(free, build_grid("fiber", 6, 6, 6, 0), path, 3)
    rows = list(t.rows())
    assert len(rows) == 9 * 3
    assert np.all(np.diff(t.values, axis=0) >= -1e-12)
    assert np.nanmax(t.residuals) <= 1e-8
    assert [r[3] for r in rows[:3]] == [1, 2, 3]


def test_errors_recorded_per_kpoint(suite):
    p = suite["crystal"]
    t = band_structure(p, build_grid("fiber", 5, 5, 5, 0), [(0, 0, 0), (0.2, 0, 0)], 2, tol=1e-30)
    assert sorted(t.errors) == [0, 1]
    assert np.isfinite(t.values).all()


def test_needs_fiber_grid(free):
    with pytest.raises(ValueError):
        band_structure(free, build_grid("slab", 4, 4, 4, 0), [(0, 0, 0)], 1)


def test_arc_length():
    t = BandTable(np.array([[0, 0, 0], [0.3, 0.4, 0], [0.3, 0.4, 1.0]]), np.zeros((1, 3)),
                  np.zeros((1, 3)))
    np.testing.assert_allclose(t.arc_length(), [0, 0.5, 1.5])


def test_k_grid():
    K = k_grid(3)
    assert K.shape == (27, 3)
    assert K.min() == 0 and K.max() == pytest.approx(2 / 3)


def test_worker_count(monkeypatch):
    monkeypatch.setenv("MAGBLOCH_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.delenv("MAGBLOCH_THREADS")
    assert worker_count() >= 1


def test_threaded_scan_matches_serial(suite, monkeypatch):
    p = suite["magnetic_crystal"]
    g = build_grid("fiber", 6, 6, 6, 1)
    ks = k_grid(2)
    a = band_structure(p, g, ks, 2, workers=1)
    b = band_structure(p, g, ks, 2, workers=3)
    np.testing.assert_array_equal(a.values, b.values)


# flat-band scan -------------------------------------------------------------------

def test_free_oscillation(free):
    # k-grid {0, 1/2}^3: the lowest band runs from 0 at k = 0 to 3/4 at k = (1/2, 1/2, 1/2).
    rep = flat_band_scan(free, build_grid("fiber", 16, 16, 16, 0), 2, 1)
    assert rep.oscillations[0] == pytest.approx(0.75, rel=0.05)


def test_translation_covariance_under_refinement(free):
    """Bands at k and k + e3 agree only up to a discretization error that shrinks with h."""
    k, k_shift = (0.2, 0.1, 0.7), (0.2, 0.1, -0.3)
    gaps = []
    for n in (8, 16):
        t = band_structure(free, build_grid("fiber", n, n, n, 0), [k, k_shift], 2)
        gaps.append(np.abs(t.values[:, 0] - t.values[:, 1]).max())
    assert gaps[1] <= 0.5 * gaps[0]


def test_landau_not_flat(landau):
    rep = flat_band_scan(landau, build_grid("fiber", 8, 8, 8, 1), 2, 1)
    assert rep.oscillations[0] >= 0.25 * (1 - 0.05)
    d = rep.to_dict()
    assert d["min_oscillation"] == rep.min_oscillation and d["failed_kpoints"] == 0
