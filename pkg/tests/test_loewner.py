import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multisle.conformal import apply
from multisle.errors import ReverseBlowup
from multisle.loewner import (
    LoewnerState, Trace, advance, chain_from_drivers, default_eps, flow_points, full_traces,
    full_traces_batch, swallow_grid, swallow_threshold, swallow_times, trace_tip, trace_tips,
    traces_to_svg, write_mask_csv,
)
from multisle.sde import SdeParams, constant_drivers, drivers_from_array, simulate_dyson


def test_constant_driver_closed_form():
    d = constant_drivers([0.0], 1e-3, 0.2)
    g, tau, _ = flow_points(d.values, d.times, np.array([10j]), 0.1)
    assert np.isnan(tau[0, 0])
    assert g[0, 0] == pytest.approx(np.sqrt(-100 + 0.4 + 0j), abs=1e-8)


def test_point_swallowed_at_closed_form_time():
    dt = 1e-3
    d = constant_drivers([0.0], dt, 1.2)
    tau = swallow_times(d, 1.2, [2j])
    assert abs(tau[0] - 1.0) <= dt + 1e-12


def test_swallow_grid_examples():
    d = constant_drivers([0.0], 1e-4, 0.3)
    grid = np.array([0.5j * 2, 0.5 + 2j, 3j])
    assert not swallow_grid(d, 0.0, grid).any()
    assert swallow_grid(d, 0.25, grid).tolist() == [True, False, False]
    assert not swallow_grid(d, 0.2, grid).any()


def test_swallow_grid_monotone():
    d = simulate_dyson(SdeParams(4.0, (-0.5, 0.5), 1e-3, 0.5, seed=2))
    xs, ys = np.meshgrid(np.linspace(-2, 2, 21), np.linspace(0.05, 1.5, 12))
    grid = xs + 1j * ys
    masks = [swallow_grid(d, t, grid) for t in (0.1, 0.25, 0.5)]
    assert np.all(masks[0] <= masks[1]) and np.all(masks[1] <= masks[2])
    assert masks[2].sum() > masks[0].sum()


def test_two_constant_drivers_capacity_coefficient():
    d = constant_drivers([-1.0, 1.0], 1e-3, 0.2)
    t = 0.2
    zs = np.array([5j, 20j, 80j])
    g, _, _ = flow_points(d.values, d.times, zs, t)
    resid = np.abs(g[0] - zs - 4 * t / zs) * np.abs(zs)
    assert np.all(np.diff(resid) < 0)
    assert resid[-1] < 1e-3


def test_advance_state():
    d = simulate_dyson(SdeParams(4.0, (-1.0, 1.0), 1e-3, 0.4, seed=1))
    st_ = LoewnerState(d, [0.3 + 1j, 2j, -3 + 0.5j, 1.0 + 0j])
    assert st_.alive.tolist() == [True, True, True, False]
    advance(st_, 0.2)
    st_.advance(0.4)
    assert st_.hcap_accum == pytest.approx(2 * 2 * 0.4)
    assert np.all(st_.g[st_.alive].imag > 0)
    g, _, _ = flow_points(d.values, d.times, st_.z0[:3], 0.4)
    np.testing.assert_allclose(st_.g[:3][st_.alive[:3]], g[0][st_.alive[:3]], atol=1e-9)
    with pytest.raises(ValueError):
        advance(st_, 0.5)
    with pytest.raises(ValueError):
        advance(st_, 0.3)


def test_trace_tip_closed_form():
    d = constant_drivers([0.0], 1e-4, 0.3)
    tip = trace_tip(d, 1, 0.25, eps=1e-3)
    # the reverse flow is integrated to a relative step tolerance, not exactly
    assert tip == pytest.approx(1j * np.sqrt(1 + 1e-6), abs=1e-5)
    assert trace_tip(d, 1, 0.0, eps=1e-3) == pytest.approx(1e-3j)
    rich = trace_tip(d, 1, 0.25, eps=0.05, richardson=True)
    plain = trace_tip(d, 1, 0.25, eps=0.05)
    assert abs(rich - 1j) < abs(plain - 1j)


def test_trace_tip_argument_checks():
    d = constant_drivers([0.0], 1e-2, 0.3)
    with pytest.raises(ValueError):
        trace_tip(d, 2, 0.1)
    with pytest.raises(ValueError):
        trace_tip(d, 1, 0.105)
    with pytest.raises(ValueError):
        trace_tips(d.values, d.times, 1, [3], eps=0.0)


def test_reverse_blowup_guard():
    d = simulate_dyson(SdeParams(4.0, (0.0,), 1e-3, 0.2, seed=0))
    with pytest.raises(ReverseBlowup):
        trace_tips(d.values, d.times, 1, [200], eps=0.01, guard=1e-3)


def test_vertical_slit_trace():
    d = constant_drivers([0.0], 1e-2, 0.5)
    eps = 0.01
    tr = full_traces(d, eps=eps)[0]
    assert tr.points[0] == 0
    np.testing.assert_allclose(tr.points.real, 0.0, atol=1e-12)
    expect = np.sqrt(4 * tr.times + eps**2)
    np.testing.assert_allclose(tr.points.imag[1:], expect[1:], rtol=5e-4)
    assert np.all(np.diff(tr.times) > 0)


def test_eps_self_convergence():
    d = simulate_dyson(SdeParams(4.0, (0.0,), 1e-4, 0.2, seed=5))
    k = [2000]
    diffs = []
    for eps in (0.08, 0.04, 0.02):
        a = trace_tips(d.values, d.times, 1, k, eps)[0, 0]
        b = trace_tips(d.values, d.times, 1, k, eps / 2)[0, 0]
        diffs.append(abs(a - b))
    assert diffs[0] > diffs[1] > diffs[2]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_forward_backward_consistency(seed):
    dt = 1e-3
    d = simulate_dyson(SdeParams(4.0, (-1.0, 1.0), dt, 0.3, seed=seed))
    eps = 1.8 * np.sqrt(dt)
    assert eps < swallow_threshold(dt)
    ks = np.arange(10, 301, 10)
    for i in (1, 2):
        tips = trace_tips(d.values, d.times, i, ks, eps)[0]
        tau = swallow_times(d, 0.3, tips)
        assert np.all(np.abs(tau - d.times[ks]) <= 2 * dt + 1e-12)


def test_reflection_symmetry():
    p = SdeParams(2.0, (-1.0, 0.5), 1e-3, 0.2, seed=11)
    q = SdeParams(2.0, (-0.5, 1.0), 1e-3, 0.2, seed=11)
    a = simulate_dyson(p)
    b = simulate_dyson(q, mirror=True)
    np.testing.assert_array_equal(b.values, -a.values[::-1])
    ta = full_traces(a, eps=0.05)
    tb = full_traces(b, eps=0.05)
    for i in range(2):
        np.testing.assert_allclose(tb[1 - i].points, -np.conj(ta[i].points), atol=1e-12)


def test_refinement_shrinks_spacing():
    d = simulate_dyson(SdeParams(4.0, (0.0,), 2.5e-4, 0.2, seed=8))
    spacing = []
    for step in (16, 4, 1):
        v, t = d.values[:, ::step], d.times[::step]
        dt = t[1] - t[0]
        tr = full_traces_batch(v, t, np.arange(len(t)), default_eps(dt))[0, 0]
        spacing.append(np.abs(np.diff(tr)).max())
    assert spacing[0] > spacing[1] > spacing[2]


def test_full_traces_batch_matches_single():
    d = simulate_dyson(SdeParams(4.0, (-1.0, 0.0, 1.0), 1e-2, 0.5, seed=4))
    ks = np.arange(0, 51, 5)
    batch = full_traces_batch(np.stack([d.values, d.values]), d.times, ks, 0.05)
    single = full_traces(d, times=d.times[ks], eps=0.05)
    for i in range(3):
        np.testing.assert_allclose(batch[1, i], single[i].points, atol=1e-13)
        assert single[i].points[0] == d.values[i, 0]
    with pytest.raises(ValueError):
        full_traces(d, times=[0.015])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_driver_order_preserved(seed):
    # curve tips mapped down by g_t are the drivers, whose order never changes
    d = simulate_dyson(SdeParams(6.0, (-1.0, 0.0, 1.0), 2e-3, 0.1, seed=seed))
    assert np.all(np.diff(d.values, axis=0) > 0)


def test_chain_from_drivers_approximates_flow():
    d = constant_drivers([0.0], 1e-3, 0.3)
    chain = chain_from_drivers(d, 0.3)
    assert chain.total_cap == pytest.approx(0.6)
    z = 1 + 2j
    assert apply(chain, z) == pytest.approx(np.sqrt(z * z + 4 * 0.3), abs=1e-9)
    d2 = drivers_from_array(d.times, np.vstack([np.sin(d.times), 1 + d.times]))
    c2 = chain_from_drivers(d2)
    g, _, _ = flow_points(d2.values, d2.times, np.array([0.5 + 1.5j]), 0.3)
    assert apply(c2, 0.5 + 1.5j) == pytest.approx(g[0, 0], abs=1e-3)


def test_trace_csv_roundtrip_and_svg(tmp_path):
    d = constant_drivers([0.0, 2.0], 1e-2, 0.2)
    trs = full_traces(d, eps=0.05)
    trs[0].to_csv(tmp_path / "a.csv", header={"kappa": 4, "N": 2})
    back = Trace.from_csv(tmp_path / "a.csv")
    np.testing.assert_array_equal(back.points, trs[0].points)
    np.testing.assert_array_equal(back.eps, trs[0].eps)
    (tmp_path / "bad.csv").write_text("x,y\n1,2\n")
    with pytest.raises(ValueError):
        Trace.from_csv(tmp_path / "bad.csv")
    svg = traces_to_svg(trs, caption="two slits")
    assert svg.count("<polyline") == 2 and "two slits" in svg


def test_mask_csv(tmp_path):
    d = constant_drivers([0.0], 1e-4, 0.3)
    grid = np.array([1j, 0.5 + 2j, 3j])
    write_mask_csv(tmp_path / "m.csv", grid, swallow_grid(d, 0.25, grid), header={"t": 0.25})
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[:2] == ["# t=0.25", "re,im,swallowed"]
    assert [ln.rsplit(",", 1)[1] for ln in lines[2:]] == ["1", "0", "0"]
