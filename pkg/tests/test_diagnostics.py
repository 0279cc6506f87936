import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multisle.diagnostics import (
    area_coverage, bessel_law_check, classify_phase, collision_scan, escape_trend,
    neighbor_structure, observed_spacing, summarize, write_summary_csv,
)
from multisle.errors import ResolutionTooCoarse
from multisle.loewner import full_traces_batch
from multisle.sde import SdeParams, simulate_dyson_ensemble


def vertical(x, height=1.0, n=101):
    return x + 1j * np.linspace(0.0, height, n)


def densify(vertices, step=0.01):
    out = [vertices[0]]
    for a, b in zip(vertices[:-1], vertices[1:]):
        m = max(1, int(np.ceil(abs(b - a) / step)))
        out.extend(a + (b - a) * np.arange(1, m + 1) / m)
    return np.array(out)


def test_two_vertical_slits():
    r = classify_phase([vertical(-1.0), vertical(1.0)], tol=0.05)
    assert r.all_simple and r.all_disjoint
    assert not r.hits_R.any()
    assert not r.neighbor_hit.any() and not r.second_neighbor_hit.any()
    assert r.min_distance[0, 1] == pytest.approx(2.0)
    assert r.escape == pytest.approx(np.hypot(1.0, 1.0))
    assert r.spacing == pytest.approx(0.01)


def test_self_crossing_polyline():
    p = densify([0.0, 1j, 1 + 1j, 1 + 0.5j, -0.5 + 0.5j])
    r = classify_phase([p], tol=0.05)
    assert r.self_intersects[0] and not r.all_simple


def test_returning_curve_hits_real_line():
    p = densify([0.0, 1j, 1 + 1j, 1.0])
    r = classify_phase([p], tol=0.05)
    assert r.hits_R[0]


def test_touching_neighbors():
    a = vertical(-0.02)
    b = vertical(0.02)
    c = vertical(1.0)
    r = classify_phase([a, b, c], tol=0.05)
    assert not r.all_disjoint
    assert r.neighbor_hit[0, 1] and r.neighbor_hit[1, 0]
    assert not r.second_neighbor_hit.any()
    far = classify_phase([a, c, b + 0.0], tol=0.05)
    assert far.second_neighbor_hit[0, 2]


def test_resolution_too_coarse():
    with pytest.raises(ResolutionTooCoarse):
        classify_phase([vertical(0.0, n=11)], tol=0.2)


def test_constructed_disjoint_fixtures_all_false():
    traces = [vertical(x) for x in (-2.0, 0.0, 2.0)]
    ns = neighbor_structure([traces] * 5, tol=0.05)
    assert ns["neighbor_rate"] == 0.0 and ns["second_neighbor_rate"] == 0.0
    assert ns["all_false"] == 1.0


def test_report_serializes():
    r = classify_phase([vertical(-1.0), vertical(1.0)], tol=0.05, kappa=2.0)
    d = json.loads(r.to_json())
    assert d["all_simple"] and d["min_distance"][0][0] is None
    assert d["tol"] == 0.05 and d["kappa"] == 2.0


def test_area_coverage_bounds():
    box = (-1.0, 1.0, 1.0)
    assert area_coverage([np.array([5.0 + 5j])], 0.1, box) == 0.0
    xs, ys = np.meshgrid(np.linspace(-1, 1, 81), np.linspace(0, 1, 41))
    assert area_coverage([(xs + 1j * ys).ravel()], 0.1, box) == 1.0
    # a single vertical line covers one column of cells out of twenty
    assert area_coverage([vertical(0.05, n=201)], 0.1, box) == pytest.approx(0.1, abs=0.051)


def random_walks(seed, n_curves):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_curves):
        steps = rng.normal(0, 0.02, 80) + 1j * np.abs(rng.normal(0.01, 0.02, 80))
        out.append(np.concatenate([[2.0 * k], 2.0 * k + np.cumsum(steps)]))
    return out


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4))
def test_classification_is_deterministic_and_consistent(seed, n):
    traces = random_walks(seed, n)
    tol = 3.0 * observed_spacing(traces)
    a = classify_phase(traces, tol)
    b = classify_phase([t.copy() for t in traces], tol)
    assert a.to_json() == b.to_json()
    if a.all_disjoint:
        assert not a.neighbor_hit.any() and not a.second_neighbor_hit.any()
    assert np.array_equal(a.neighbor_hit, a.neighbor_hit.T)


def test_collision_scan_single_curve_is_infinite():
    e = simulate_dyson_ensemble(SdeParams(4.0, (0.0,), 1e-2, 0.5, seed=1), n_paths=5)
    out = collision_scan(e)
    assert np.all(np.isinf(out["gaps"])) and out["min_gap"] == np.inf


def test_collision_scan_kappa2_three_curves():
    e = simulate_dyson_ensemble(SdeParams(2.0, (-1.0, 0.0, 1.0), 1e-3, 0.5, seed=3), n_paths=500)
    out = collision_scan(e)
    assert out["rejection_rate"] == 0.0
    assert out["min_gap"] > 0.0


def test_collision_scan_array_input():
    v = np.array([[[0.0, 0.0], [1.0, 0.5]], [[0.0, 0.0], [2.0, 3.0]]])
    out = collision_scan(v)
    np.testing.assert_allclose(out["gaps"], [0.5, 2.0])


@pytest.mark.parametrize("kappa,dim", [(8.0, 2.0), (4.0, 3.0), (2.0, 5.0)])
def test_bessel_dimension(kappa, dim):
    r = bessel_law_check(kappa, n_paths=50, t=0.05, dt=1e-2)
    assert r.dimension == dim


@pytest.mark.parametrize("kappa", [4.0, 2.0])
def test_bessel_law(kappa):
    r = bessel_law_check(kappa, n_paths=5000, t=0.5)
    assert r.passed()
    assert r.ks_exact[1] > 0.01


@pytest.fixture(scope="module")
def small_ensembles():
    out = {}
    for kappa in (2.0, 8.0):
        p = SdeParams(kappa, (-1.0, 1.0), 2e-3, 1.0, seed=5)
        e = simulate_dyson_ensemble(p, n_paths=40)
        ks = np.arange(p.n_steps + 1)
        out[kappa] = (p, ks, full_traces_batch(e.values, p.times, ks, 0.03))
    return out


def test_escape_grows_with_time(small_ensembles):
    for p, ks, tr in small_ensembles.values():
        trend = escape_trend(tr, p.times, ks, [0.25, 0.5, 1.0])
        assert np.all(np.diff(trend) > 0)


def test_small_ensemble_phase_contrast(small_ensembles, tmp_path):
    sums = []
    for kappa, (p, ks, tr) in small_ensembles.items():
        sums.append(summarize([classify_phase(list(tr[k]), 0.15, kappa) for k in range(len(tr))]))
    lo, hi = sums
    assert lo.frac_simple_disjoint > hi.frac_simple_disjoint
    assert hi.mean_coverage > lo.mean_coverage
    write_summary_csv(tmp_path / "s.csv", sums)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("kappa,tol") and len(lines) == 3
