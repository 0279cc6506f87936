import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multisle.conformal import (
    HullSampler, MapChain, SlitElement, apply, apply_masked, arc_through, boundary_derivative,
    derivative, element_cap, element_map, element_tip_image, half_disk_arc, hcap_mc_oracle,
    invert, map_out_curve, read_curve_csv, slit_curve,
)
from multisle.errors import AtFoot, InsideHull


def random_chain(rng, n=6, geodesic=True):
    anchors = rng.uniform(-1, 1, n)
    hs = rng.uniform(0.05, 0.6, n)
    qs = rng.uniform(-1.5, 1.5, n) if geodesic else np.zeros(n)
    return MapChain(anchors, hs, qs)


def random_upper(rng, n, lo=0.05):
    return rng.uniform(-3, 3, n) + 1j * rng.uniform(lo, 3, n)


def test_apply_examples():
    assert apply(MapChain(), 1 + 2j) == 1 + 2j
    one = MapChain.slits([0.0], [0.25])
    assert apply(one, 2j) == pytest.approx(1j * np.sqrt(3), abs=1e-15)
    a = MapChain.slits([0.3], [0.1])
    b = MapChain(np.array([-0.2]), np.array([0.4]), np.array([0.7]))
    z = np.array([0.1 + 1j, -2 + 0.3j])
    np.testing.assert_allclose(apply(a.then(b), z), apply(b, apply(a, z)), rtol=1e-15)


def test_invert_examples():
    assert invert(MapChain(), 3 + 1j) == 3 + 1j
    t = 0.7
    one = MapChain.slits([0.0], [t])
    w = 1.5 + 0.2j
    assert invert(one, w) == pytest.approx(np.sqrt(w * w - 4 * t), abs=1e-14)
    assert invert(one, 0.0) == pytest.approx(2j * np.sqrt(t))


def test_roundtrip_random_points():
    rng = np.random.default_rng(3)
    chain = random_chain(rng, 8)
    z = random_upper(rng, 100)
    w, swallowed = apply_masked(chain, z)
    assert np.all(w[~swallowed].imag >= 0)
    np.testing.assert_allclose(invert(chain, w[~swallowed]), z[~swallowed], atol=1e-10)
    back = apply(chain, invert(chain, w[~swallowed]))
    np.testing.assert_allclose(back, w[~swallowed], atol=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_right_inverse_property(seed):
    rng = np.random.default_rng(seed)
    chain = random_chain(rng, int(rng.integers(1, 6)))
    w = random_upper(rng, 20, lo=1e-3)
    np.testing.assert_allclose(apply(chain, invert(chain, w)), w, atol=1e-9)


def test_single_element_matches_closed_form_geodesic():
    # the arc from 0 to c is removed and c lands on the real line
    c = 0.4 + 0.7j
    q, h = arc_through(c)
    w = element_map(c * (1 + 1e-13), 0.0, q, h)
    assert abs(w.imag) < 1e-6
    assert w.real == pytest.approx(element_tip_image(q, h), abs=1e-6)
    # normalisation at infinity
    for y in (1e3, 1e4):
        v = element_map(1j * y, 0.0, q, h)
        assert (v - 1j * y) * 1j * y == pytest.approx(element_cap(q, h), rel=1e-3)


def test_swallowed_point_raises():
    one = MapChain.slits([0.0], [0.25])
    with pytest.raises(InsideHull):
        apply(one, 0.5j)
    w, m = apply_masked(one, np.array([0.5j, 2j]))
    assert m.tolist() == [True, False]


def test_hydrodynamic_normalisation():
    rng = np.random.default_rng(7)
    chain = random_chain(rng, 10)
    vals = []
    for y in np.geomspace(1e2, 1e4, 9):
        w = apply(chain, 1j * y)
        vals.append(abs(w - 1j * y - chain.total_cap / (1j * y)) * y * y)
    assert max(vals) < 10 * max(vals[0], 1e-3)


def test_boundary_derivative_examples():
    assert boundary_derivative(MapChain(), 0.3) == 1.0
    d = 0.3
    assert boundary_derivative(MapChain.slits([0.0], [d]), 1.0) == pytest.approx(1 / np.sqrt(1 + 4 * d))
    with pytest.raises(AtFoot):
        boundary_derivative(MapChain.slits([0.0], [d]), 0.0)


def test_boundary_derivative_matches_finite_difference():
    rng = np.random.default_rng(11)
    for _ in range(20):
        chain = random_chain(rng, 5, geodesic=bool(rng.integers(2)))
        x = rng.choice([-1, 1]) * rng.uniform(2.5, 4.0)
        h = 1e-6
        fd = (apply(chain, x + h).real - apply(chain, x - h).real) / (2 * h)
        bd = boundary_derivative(chain, x)
        assert bd > 0
        assert bd == pytest.approx(fd, rel=1e-6)


def test_complex_derivative_matches_finite_difference():
    rng = np.random.default_rng(12)
    chain = random_chain(rng, 5)
    z = 0.3 + 2.2j
    h = 1e-6
    fd = (apply(chain, z + h) - apply(chain, z - h)) / (2 * h)
    assert derivative(chain, z) == pytest.approx(fd, rel=1e-7)


def test_slit_zipper_is_exact():
    h = 1.7
    res = map_out_curve(slit_curve(0.2, h, 64))
    assert res.total_cap == pytest.approx(h * h / 2, abs=1e-3 * h * h)
    assert not res.self_touch


def test_half_disk_zipper():
    for r in (0.5, 1.0, 2.0):
        res = map_out_curve(half_disk_arc(r, 128))
        assert res.total_cap == pytest.approx(r * r, rel=1e-2)


@pytest.mark.parametrize("alpha", [0.5, 2.0, 3.0])
def test_zipper_scaling(alpha):
    rng = np.random.default_rng(4)
    pts = np.concatenate([[0.0], np.cumsum(rng.normal(0, 0.05, 80) + 1j * np.abs(rng.normal(0.02, 0.05, 80)))])
    base = map_out_curve(pts).total_cap
    assert map_out_curve(alpha * pts).total_cap == pytest.approx(alpha**2 * base, rel=1e-3)


def test_zipper_refinement_is_second_order():
    errs = [abs(map_out_curve(half_disk_arc(1.0, n)).total_cap - 1.0) for n in (33, 65, 129)]
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.8)


def test_zipper_maps_curve_points_to_tip_images():
    rng = np.random.default_rng(6)
    pts = np.concatenate([[0.1], 0.1 + np.cumsum(rng.normal(0, 0.04, 50) + 0.03j)])
    res = map_out_curve(pts)
    for m in (0, 10, len(res.tips) - 1):
        k = res.point_index[m]
        w = invert(res.chain.prefix(m + 1), res.tips[m])
        assert abs(w - pts[k]) < 1e-8


def test_self_touch_is_flagged():
    # a loop returning to the real line and continuing
    up = half_disk_arc(1.0, 40)[::-1] + 1.0  # from 0 to 2 over the top
    more = 2.0 + 1j * np.linspace(0.05, 0.5, 10)
    res = map_out_curve(np.concatenate([up, more]))
    assert res.self_touch


def test_additivity_independent_of_order():
    rng = np.random.default_rng(9)
    a = np.concatenate([[-1.0], -1.0 + np.cumsum(rng.normal(0, 0.03, 60) + 0.02j)])
    b = np.concatenate([[1.0], 1.0 + np.cumsum(rng.normal(0, 0.03, 60) + 0.025j)])
    za = map_out_curve(a)
    zb = map_out_curve(b)
    ab = za.total_cap + map_out_curve(b, chain=za.chain).total_cap
    ba = zb.total_cap + map_out_curve(a, chain=zb.chain).total_cap
    assert ab == pytest.approx(ba, rel=1e-3)
    assert ab < za.total_cap + zb.total_cap  # interaction lowers joint capacity


def test_json_roundtrip():
    rng = np.random.default_rng(1)
    chain = random_chain(rng, 4).then(MapChain.slits([0.2], [0.01]))
    back = MapChain.from_json(chain.to_json())
    np.testing.assert_allclose(back.anchors, chain.anchors)
    np.testing.assert_allclose(back.hs, chain.hs)
    np.testing.assert_allclose(back.qs, chain.qs)
    assert back.total_cap == pytest.approx(chain.total_cap)


def test_slit_element_fields():
    e = SlitElement(0.5, 0.2)
    assert e.h == pytest.approx(2 * np.sqrt(0.2))
    assert e.tip == pytest.approx(0.5 + 2j * np.sqrt(0.2))
    g = SlitElement.geodesic(0.0, 0.8, 0.5)
    assert g.cap_increment == pytest.approx(element_cap(0.8, 0.5) / 2)
    with pytest.raises(ValueError):
        SlitElement(0.0, 0.1, "geodesic", 0.3, 1.0)


def test_hull_distances():
    s = HullSampler.slit(0.0, 1.0)
    assert s.distance(np.array([2.0 + 0.5j]))[0] == pytest.approx(2.0)
    assert s.distance(np.array([0.0 + 2.0j]))[0] == pytest.approx(1.0)
    p = HullSampler.polylines([slit_curve(0.0, 1.0, 11)], spacing=1e-3)
    z = np.array([0.3 + 0.5j, 0.0 + 1.4j])
    np.testing.assert_allclose(p.distance(z), s.distance(z), atol=1e-3)
    assert p.contains(np.array([0.5j]))[0]


@pytest.mark.parametrize("hull,target", [
    (HullSampler.slit(0.0, 1.0), 0.5),
    (HullSampler.half_disk(1.0), 1.0),
])
def test_mc_oracle_matches_closed_forms(hull, target):
    est = hcap_mc_oracle(hull, launch_height=10 * hull.height, walkers=100_000, seed=1)
    assert est.leaked == 0
    assert abs(est.estimate - target) <= 3 * est.stderr
    assert est.stderr < 0.02 * target


def test_mc_oracle_empty_hull():
    est = hcap_mc_oracle(HullSampler.empty(), walkers=1000)
    assert est.estimate == 0.0 and est.stderr == 0.0


def test_mc_oracle_agrees_with_zipper_on_random_curve():
    rng = np.random.default_rng(21)
    pts = np.concatenate([[0.0], np.cumsum(rng.normal(0, 0.04, 100) + 1j * np.abs(rng.normal(0.02, 0.04, 100)))])
    cap = map_out_curve(pts).total_cap
    est = hcap_mc_oracle(HullSampler.polylines([pts]), walkers=200_000, seed=2)
    assert abs(est.estimate - cap) <= 3 * est.stderr + 0.01 * cap


def test_mc_oracle_scaling():
    base = hcap_mc_oracle(HullSampler.half_disk(1.0), walkers=100_000, seed=4)
    big = hcap_mc_oracle(HullSampler.half_disk(1.0).scaled(2.0), walkers=100_000, seed=4)
    assert abs(big.estimate - 4 * base.estimate) <= 3 * np.hypot(big.stderr, 4 * base.stderr)


def test_read_curve_csv(tmp_path):
    (tmp_path / "c.csv").write_text("# slit\nre,im\n0,0\n0,0.5\n0,1\n")
    pts = read_curve_csv(tmp_path / "c.csv")
    np.testing.assert_array_equal(pts, [0, 0.5j, 1j])
    assert map_out_curve(pts).total_cap == pytest.approx(0.5)
    (tmp_path / "bad.csv").write_text("x,y\n0,0\n")
    with pytest.raises(ValueError):
        read_curve_csv(tmp_path / "bad.csv")
