import numpy as np
import pytest

from ecgipf.errors import DimensionError, UndefinedCorrelationError
from ecgipf.filter import Ensemble, FilterConfig, FilterTrace, run_filter
from ecgipf.maps import (
    ActivationMap,
    ScalarMap,
    activation_map,
    activation_probability,
    activation_times,
    combine_fwd_bwd,
    compare_maps,
    eas_pseudo_probability,
    local_maxima,
    mean_tmv,
    mode_probability,
    mode_timeline,
    pearson_correlation,
    read_scalar_csv,
    write_mode_timeline_csv,
    write_scalar_csv,
)
from ecgipf.template import FrontTemplate, reconstruct_batch

TPL = FrontTemplate(5.0)


def ens(centers, radii, weights, modes=None):
    c = np.atleast_2d(np.asarray(centers))
    n = len(c)
    m = np.zeros(n, int) if modes is None else np.asarray(modes)
    return Ensemble(c, np.atleast_2d(np.asarray(radii, float)), m, np.asarray(weights, float))


def static_trace(centers, radii_per_step, m, weights=None, direction="forward"):
    """Trace with a fixed ensemble whose radii follow the given schedule."""
    radii_per_step = np.asarray(radii_per_step, float)
    n, N, l = radii_per_step.shape
    c = np.broadcast_to(np.asarray(centers), (n, N, l)).copy()
    w = np.full((n, N), 1.0 / N) if weights is None else np.asarray(weights)
    idx = np.arange(n) if direction == "forward" else np.arange(n)[::-1]
    return FilterTrace(direction, m, 1, idx, w, c, radii_per_step, np.zeros((n, N), int),
                       np.full(n, float(N)), np.zeros(n, bool), np.zeros(n, bool), np.ones((n, 1)))


def test_mean_single_particle(table2):
    e = ens([[4]], [[20.0]], [1.0])
    expected = reconstruct_batch(e.centers, e.radii, table2, 5.0)[0]
    np.testing.assert_allclose(mean_tmv(e, [table2], TPL).values, expected)


def test_mean_identical_particles(table2):
    a = mean_tmv(ens([[4], [4]], [[20.0], [20.0]], [0.3, 0.7]), [table2], TPL).values
    b = mean_tmv(ens([[4]], [[20.0]], [1.0]), [table2], TPL).values
    np.testing.assert_allclose(a, b)


def test_mean_half_half(table2):
    e = ens([[4], [4]], [[0.0], [200.0]], [0.5, 0.5])
    far = table2.rows(4) > 5
    np.testing.assert_allclose(mean_tmv(e, [table2], TPL).values[far], 0.5)


def test_activation_probability(table2):
    e = ens([[4], [4], [4]], [[200.0], [200.0], [0.0]], [0.3, 0.4, 0.3])
    p = activation_probability(e, [table2], TPL).values
    far = table2.rows(4) > 5
    np.testing.assert_allclose(p[far], 0.7)
    assert activation_probability(ens([[4]], [[300.0]], [1.0]), [table2], TPL).values.min() == 1.0
    p0 = activation_probability(ens([[4]], [[0.0]], [1.0]), [table2], TPL).values
    assert np.all(p0[far] == 0.0)
    with pytest.raises(ValueError):
        activation_probability(e, [table2], TPL, threshold=1.0)


def test_activation_from_growing_ball(table2):
    n = 100
    radii = np.arange(1, n + 1, dtype=float)[:, None, None]
    tr = static_trace([[4]], radii, table2.n_vertices)
    amap = activation_map(tr, [table2], TPL, dt=1.0)
    d = table2.rows(4)
    reached = d <= n - 1
    assert np.all(np.abs(amap.times[reached] - (d[reached] - 1)) <= 1.0)


def test_unreached_vertices_flagged(table2):
    radii = np.arange(1, 11, dtype=float)[:, None, None]
    amap = activation_map(static_trace([[4]], radii, table2.n_vertices), [table2], TPL, 1.0)
    far = table2.rows(4) > 20
    assert np.all(np.isnan(amap.times[far]))
    assert not amap.activated[far].any()


def test_backward_trace_reindexed(table2):
    radii = np.arange(1, 60, dtype=float)[:, None, None]
    fwd = static_trace([[4]], radii, table2.n_vertices)
    bwd = static_trace([[4]], radii[::-1], table2.n_vertices, direction="backward")
    a = activation_map(fwd, [table2], TPL, 1.0).times
    b = activation_map(bwd, [table2], TPL, 1.0).times
    np.testing.assert_array_equal(a, b)


def test_activation_map_shift(table2):
    radii = np.arange(1, 40, dtype=float)[:, None, None]
    tr = static_trace([[4]], radii, table2.n_vertices)
    a = activation_map(tr, [table2], TPL, 1.0)
    b = activation_map(tr, [table2], TPL, 1.0, t0=12.5)
    np.testing.assert_allclose(b.times, a.shifted(12.5).times)


def test_activation_times_interpolation():
    series = np.array([[0.0, 0.6], [0.4, 0.8], [0.6, 0.9]])
    t = activation_times(series, np.array([0.0, 2.0, 4.0]))
    np.testing.assert_allclose(t.times, [3.0, 0.0])


def test_eas_examples():
    tr = static_trace([[7]], np.ones((5, 1, 1)), 12)
    v = eas_pseudo_probability(tr).values
    assert v[7] == 5 and v.sum() == 5
    tr2 = static_trace([[7, 7]], np.ones((1, 1, 2)), 12)
    assert eas_pseudo_probability(tr2).values[7] == 2
    assert eas_pseudo_probability(tr2).values[3] == 0


def test_eas_mass(table2, operator2):
    obs = np.random.default_rng(0).normal(0, 0.01, (8, operator2.electrode_count))
    tr = run_filter(obs, [table2], [operator2], FilterConfig(N=100, l=3))
    assert eas_pseudo_probability(tr).values.sum() == pytest.approx(8 * 3, rel=1e-12)


def test_combine():
    a = ScalarMap(np.array([0.0, 2.0]), "eas_pseudo_probability")
    b = ScalarMap(np.array([4.0, 2.0]), "eas_pseudo_probability")
    np.testing.assert_array_equal(combine_fwd_bwd(a, a).values, a.values)
    np.testing.assert_array_equal(combine_fwd_bwd(a, b).values, [2.0, 2.0])
    np.testing.assert_array_equal(combine_fwd_bwd(a, b).values, combine_fwd_bwd(b, a).values)
    with pytest.raises(DimensionError):
        combine_fwd_bwd(a, ScalarMap(np.zeros(3), "eas_pseudo_probability"))
    with pytest.raises(ValueError):
        combine_fwd_bwd(a, ScalarMap(np.zeros(2), "activation_probability"))


def test_mode_probability_examples():
    e = ens([[0]] * 4, [[1.0]] * 4, [0.25] * 4, modes=[0, 0, 1, 1])
    np.testing.assert_allclose(mode_probability(e, 2), [0.5, 0.5])
    e = ens([[0]] * 2, [[1.0]] * 2, [0.5, 0.5], modes=[0, 0])
    np.testing.assert_allclose(mode_probability(e, 3), [1, 0, 0])
    e = ens([[0]] * 2, [[1.0]] * 2, [0.2, 0.8], modes=[0, 1])
    np.testing.assert_allclose(mode_probability(e, 2), [0.2, 0.8])


def test_mode_probability_constant_without_switching(table2, operator2):
    from ecgipf.filter import correct, init_ensemble, predict, step_rng

    cfg = FilterConfig(N=200, mode_keep_prob=1.0)
    obs = np.random.default_rng(1).normal(0, 0.01, (6, operator2.electrode_count))
    e = init_ensemble(cfg, table2.n_vertices, 2)
    e.modes[:] = 1
    for k, y in enumerate(obs, start=1):
        e = predict(e, [table2, table2], cfg, step_rng(0, k, 1))
        e = correct(e, y, [operator2] * 2, [table2] * 2, cfg)
        np.testing.assert_allclose(mode_probability(e, 2), [0.0, 1.0])


def test_mode_timeline_averaging_identical(table2, operator2):
    obs = np.random.default_rng(1).normal(0, 0.01, (6, operator2.electrode_count))
    tr = run_filter(obs, [table2, table2], [operator2, operator2], FilterConfig(N=50))
    t1, p1 = mode_timeline(tr, 1.0)
    t2, p2 = mode_timeline([tr, tr, tr], 1.0)
    np.testing.assert_array_equal(t1, t2)
    np.testing.assert_allclose(p1, p2)
    assert len(t1) == 6


def test_pearson_examples():
    t = ActivationMap(np.array([1.0, 5.0, 2.0, np.nan, 9.0]))
    assert pearson_correlation(t, t) == pytest.approx(1.0)
    assert pearson_correlation(t, ActivationMap(3 * t.times + 7)) == pytest.approx(1.0, abs=1e-12)
    neg = ActivationMap(2 * np.nanmean(t.times) - t.times)
    assert pearson_correlation(t, neg) == pytest.approx(-1.0)
    c = compare_maps(t, t)
    assert c["coverage"] == 0.8 and c["n_common"] == 4


def test_pearson_undefined():
    a = ActivationMap(np.array([1.0, np.nan, np.nan]))
    with pytest.raises(UndefinedCorrelationError):
        pearson_correlation(a, a)
    with pytest.raises(UndefinedCorrelationError):
        pearson_correlation(ActivationMap(np.ones(3)), ActivationMap(np.arange(3.0)))


def test_local_maxima(ico0):
    v = np.zeros(12)
    v[[0, 11]] = [3.0, 1.0]
    peaks = local_maxima(ico0, v, min_fraction=0.1).tolist()
    assert 0 in peaks
    assert local_maxima(ico0, v, min_fraction=0.5).tolist() == [0]


def test_csv_roundtrip(tmp_path):
    p = tmp_path / "m.csv"
    vals = np.array([0.1, np.nan, 3.0])
    write_scalar_csv(p, vals, "activation_ms", "config_sha256=ab seed=1")
    lines = p.read_text().splitlines()
    assert lines[0].startswith("# config_sha256") and lines[1] == "vertex_id,activation_ms"
    np.testing.assert_array_equal(read_scalar_csv(p), vals)


def test_mode_timeline_csv(tmp_path):
    p = tmp_path / "t.csv"
    write_mode_timeline_csv(p, np.array([0.0, 1.0]), np.array([[0.5, 0.5], [0.2, 0.8]]), ["a", "b"])
    assert p.read_text().splitlines() == ["time,a,b", "0.0,0.5,0.5", "1.0,0.2,0.8"]


def test_scalar_map_tag():
    with pytest.raises(ValueError):
        ScalarMap(np.zeros(2), "nonsense")
