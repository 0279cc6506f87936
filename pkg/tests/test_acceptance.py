"""Exit criteria 1-9, each at its stated tolerance and runtime budget.

Every test records one PASS/FAIL line (printed in the terminal summary) before
asserting, so a failing criterion is reported rather than hidden.
"""
import time

import numpy as np
import pytest
from scipy import stats

from multisle.conformal import (
    HullSampler, MapChain, half_disk_arc, hcap_mc_oracle, map_out_curve, slit_curve,
)
from multisle.diagnostics import bessel_law_check, classify_phase, reference_box, summarize
from multisle.gff import cross_variation_test, martingale_test
from multisle.loewner import LoewnerState, full_traces, full_traces_batch, swallow_times, trace_tips
from multisle.reparam import CurveFamily, capacity_partial, sample_family, solve_reparam
from multisle.sde import (
    SdeParams, drift_vector, residue_identity, simulate_dyson, simulate_dyson_ensemble,
)

pytestmark = pytest.mark.acceptance

# bias budget for criterion 1: hull = extrapolated traces on a dt = 2.5e-4 grid
C1_BIAS = 0.01


def zipper_union(curves):
    cap, chain = 0.0, None
    for c in curves:
        r = map_out_curve(c, chain=chain)
        cap += r.total_cap
        chain = r.chain
    return cap


def test_criterion_1_capacity_law(verdict):
    t0 = time.perf_counter()
    N, t = 3, 0.2
    target = 2 * N * t
    d = simulate_dyson(SdeParams(4.0, (-1.0, 0.0, 1.0), 2.5e-4, t, seed=2024))
    state = LoewnerState(d, [2j, -3 + 1j]).advance(t)
    curves = [np.asarray(tr.points) for tr in full_traces(d, richardson=True)]
    est = hcap_mc_oracle(HullSampler.polylines(curves), walkers=1_000_000, seed=1)
    bias = C1_BIAS * target
    tol = 3 * est.stderr + bias
    elapsed = time.perf_counter() - t0
    ok = (abs(est.estimate - target) <= tol and tol < 0.02 * target and est.leaked == 0
          and state.hcap_accum == pytest.approx(target) and elapsed < 120)
    verdict(1, ok, f"MC hcap {est.estimate:.4f} +- {est.stderr:.4f} vs {target} "
                   f"(tol {tol:.4f} = 3 SE + bias {bias:.4f}; zipper {zipper_union(curves):.4f}) "
                   f"in {elapsed:.0f}s")
    assert ok


def test_criterion_2_hcap_identities(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(21)
    walk = np.concatenate([[0.0], np.cumsum(rng.normal(0, 0.04, 100) + 1j * np.abs(rng.normal(0.02, 0.04, 100)))])
    other = 1.5 + walk[:60]
    rel = []
    # analytic chains: closed forms, additivity and scaling
    rel.append(abs(map_out_curve(slit_curve(0.2, 1.3, 65)).total_cap / (1.3**2 / 2) - 1))
    rel.append(abs(map_out_curve(half_disk_arc(1.0, 1025)).total_cap - 1.0))
    ab = zipper_union([walk, other])
    ba = zipper_union([other, walk])
    rel.append(abs(ab / ba - 1))
    chain = MapChain.slits([0.0, 0.5], [0.1, 0.2])
    rel.append(abs(chain.total_cap / (2 * 0.1 + 2 * 0.2) - 1))
    for pts in (slit_curve(0.0, 1.0, 33), half_disk_arc(1.0, 257), walk):
        base = map_out_curve(pts).total_cap
        for alpha in (0.5, 2.0, 3.0):
            rel.append(abs(map_out_curve(alpha * pts).total_cap / (alpha**2 * base) - 1))
    analytic_ok = max(rel) < 1e-3
    # MC oracle: closed forms, scaling and additivity within 3 SE
    z = []
    for hull, tgt in ((HullSampler.slit(0.0, 1.0), 0.5), (HullSampler.half_disk(1.0), 1.0)):
        e = hcap_mc_oracle(hull, walkers=200_000, seed=2)
        z.append((e.estimate - tgt) / e.stderr)
    b1 = hcap_mc_oracle(HullSampler.half_disk(1.0), walkers=200_000, seed=3)
    b2 = hcap_mc_oracle(HullSampler.half_disk(1.0).scaled(2.0), walkers=200_000, seed=4)
    z.append((b2.estimate - 4 * b1.estimate) / np.hypot(b2.stderr, 4 * b1.stderr))
    a, b = slit_curve(0.0, 1.0, 65), slit_curve(0.7, 0.6, 65)
    u = hcap_mc_oracle(HullSampler.polylines([a, b], spacing=1e-3), walkers=400_000, seed=3)
    z.append((u.estimate - zipper_union([a, b])) / u.stderr)
    mc_ok = max(abs(v) for v in z) <= 3.0
    elapsed = time.perf_counter() - t0
    ok = analytic_ok and mc_ok and elapsed < 60
    verdict(2, ok, f"max analytic rel err {max(rel):.2e} (< 1e-3); max |z| {max(abs(v) for v in z):.2f} "
                   f"(<= 3) in {elapsed:.0f}s")
    assert ok


def test_criterion_3_bessel_reduction(verdict):
    t0 = time.perf_counter()
    reps = [bessel_law_check(k, n_paths=5000, t=0.5, seed=11) for k in (2.0, 4.0, 8.0)]
    elapsed = time.perf_counter() - t0
    ok = all(r.ks_simulated[1] > 0.01 and r.ks_exact[1] > 0.01 for r in reps) and elapsed < 180
    detail = "; ".join(f"kappa={r.kappa:g} dim={r.dimension:g} p_sim={r.ks_simulated[1]:.3f} "
                       f"p_exact={r.ks_exact[1]:.3f}" for r in reps)
    verdict(3, ok, f"{detail} in {elapsed:.0f}s")
    assert ok


def test_criterion_4_drift_identities(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_d = worst_r = 0.0
    for _ in range(1000):
        x = np.sort(rng.normal(0, 2, rng.integers(2, 8)))
        direct, pf = drift_vector(x, rng.uniform(0.1, 8.0))
        worst_d = max(worst_d, np.max(np.abs(pf - direct)) / np.max(np.abs(direct)))
        z = complex(rng.normal(), abs(rng.normal()) + 0.05)
        lhs, rhs = residue_identity(z, x)
        worst_r = max(worst_r, abs(lhs - rhs) / max(abs(lhs), 1.0))
    elapsed = time.perf_counter() - t0
    ok = worst_d < 1e-12 and worst_r < 1e-12 and elapsed < 5
    verdict(4, ok, f"drift rel {worst_d:.1e}, residue rel {worst_r:.1e} on 1000 configs in {elapsed:.1f}s")
    assert ok


def phase_ensemble(kappa, n_paths=200, T=0.5, dt=1e-3, eps=0.02, tol=0.12):
    p = SdeParams(kappa, (-1.0, 1.0), dt, T, seed=1)
    e = simulate_dyson_ensemble(p, n_paths=n_paths)
    ks = np.arange(p.n_steps + 1)
    tr = full_traces_batch(e.values[e.accepted], p.times, ks, eps)
    box = reference_box(p.initial_positions)
    return summarize([classify_phase(list(t), tol, kappa, box) for t in tr])


def test_criterion_5_phase_trichotomy(verdict):
    t0 = time.perf_counter()
    s2, s6, s8 = (phase_ensemble(k) for k in (2.0, 6.0, 8.0))
    elapsed = time.perf_counter() - t0
    ok = (s2.frac_simple_disjoint >= 0.95 and s6.frac_hits_or_neighbor > 0.5
          and s8.mean_coverage > s6.mean_coverage > s2.mean_coverage and elapsed < 900)
    verdict(5, ok, f"kappa=2 simple&disjoint {s2.frac_simple_disjoint:.3f} (>= 0.95); kappa=6 hits "
                   f"{s6.frac_hits_or_neighbor:.3f} (> 0.5); coverage {s8.mean_coverage:.3f} > "
                   f"{s6.mean_coverage:.3f} > {s2.mean_coverage:.3f}; tol 0.12 in {elapsed:.0f}s")
    assert ok


def test_criterion_6_martingale_coupling(verdict):
    t0 = time.perf_counter()
    parts = []
    for N, X in ((1, (0.0,)), (2, (-1.0, 1.0))):
        m = martingale_test(4.0, N, X, 2j, 0.05, n_paths=10_000, seed=10 + N)
        c = cross_variation_test(4.0, N, X, 2j, -1 + 2j, 0.05, n_paths=10_000, seed=20 + N)
        parts.append((N, m, c))
    elapsed = time.perf_counter() - t0
    ok = all(m.passed and c.passed for _, m, c in parts) and elapsed < 600
    detail = "; ".join(f"N={N} mean {m.mean:+.4f} (3SE {3 * m.stderr:.4f}) cov-target {c.mean:+.5f} "
                       f"(3SE {3 * c.stderr:.5f})" for N, m, c in parts)
    verdict(6, ok, f"{detail} in {elapsed:.0f}s")
    assert ok


def test_criterion_7_reparametrization(verdict):
    t0 = time.perf_counter()
    one = sample_family(4.0, [0.3], 0.2, 2e-3, n_paths=5, seed=1)
    s1 = solve_reparam(one, 0.1, 0.01)
    dev1 = float(np.abs(s1.s[:, :, 0] - s1.times[None, :]).max())
    mir = sample_family(4.0, [-1.0, 1.0], 0.3, 2e-3, n_paths=10, seed=2, mode="mirror")
    sm = solve_reparam(mir, 0.1, 0.01)
    dev_sym = float(np.abs(sm.s[:, :, 0] - sm.s[:, :, 1]).max())
    fam = sample_family(4.0, [-1.0, 1.0], 0.25, 2e-3, n_paths=50, seed=3)
    sol = solve_reparam(fam, 0.1, 0.01)
    done = sol.complete
    target = 4.0 * sol.times[1:]
    cap_err = float(np.max(np.abs(sol.hcap[done, 1:] / target - 1)))
    rng = np.random.default_rng(0)
    s = rng.uniform(0.05, 0.9, (50, 2)) * fam.extent
    dual = max(float(np.max(np.abs(capacity_partial(fam, s, i) /
                                   capacity_partial(fam, s, i, "finite_diff") - 1))) for i in (1, 2))
    elapsed = time.perf_counter() - t0
    ok = (dev1 == 0.0 and dev_sym < 1e-9 and done.all() and cap_err < 0.01 and dual < 0.01
          and elapsed < 600)
    verdict(7, ok, f"N=1 |s-t| {dev1:.1e}; mirror |s1-s2| {dev_sym:.1e}; hcap rel err {cap_err:.2e} "
                   f"(< 1%); dual methods {dual:.2e} (< 1%) in {elapsed:.0f}s")
    assert ok


def test_criterion_8_weak_solution(verdict):
    t0 = time.perf_counter()
    t = 0.1
    fam = sample_family(4.0, [-1.0, 1.0], 0.25, 1e-3, n_paths=2000, seed=8)
    sol = solve_reparam(fam, t, 0.01)
    xt = sol.tilde_x[sol.complete, -1]
    d = simulate_dyson_ensemble(SdeParams(4.0, (-1.0, 1.0), 1e-3, t, seed=9), n_paths=2000)
    xd = d.values[d.accepted, :, -1]
    p1 = stats.ks_2samp(xt[:, 0], xd[:, 0]).pvalue
    p2 = stats.ks_2samp(xt[:, 1], xd[:, 1]).pvalue
    pg = stats.ks_2samp(xt[:, 1] - xt[:, 0], xd[:, 1] - xd[:, 0]).pvalue
    elapsed = time.perf_counter() - t0
    ok = p1 > 0.01 and len(xt) >= 1990 and elapsed < 1200
    verdict(8, ok, f"KS p(x1) {p1:.3f} (> 0.01); reported p(x2) {p2:.3f}, p(gap) {pg:.3f}; "
                   f"{len(xt)}/{fam.n_members} complete members in {elapsed:.0f}s")
    assert ok


def test_criterion_9_numerical_hygiene(verdict):
    t0 = time.perf_counter()
    # forward/backward trace consistency on every 10th grid point
    dt = 1e-3
    eps = 1.8 * np.sqrt(dt)
    worst = 0.0
    for seed in range(3):
        d = simulate_dyson(SdeParams(4.0, (-1.0, 1.0), dt, 0.3, seed=seed))
        ks = np.arange(10, 301, 10)
        for i in (1, 2):
            tau = swallow_times(d, 0.3, trace_tips(d.values, d.times, i, ks, eps)[0])
            worst = max(worst, float(np.max(np.abs(tau - d.times[ks]))))
    consistent = worst <= 2 * dt + 1e-12
    # zipper refinement against closed forms
    ns = (33, 65, 129)
    disk = [abs(map_out_curve(half_disk_arc(1.0, n)).total_cap - 1.0) for n in ns]
    rates = np.log2(np.array(disk[:-1]) / np.array(disk[1:]))
    slit = max(abs(map_out_curve(slit_curve(0.0, 1.0, n)).total_cap - 0.5) for n in ns)
    zipper_ok = np.all(rates > 1.8) and slit < (1.0 / ns[-1]) ** 2
    # Heun self-convergence of the reparametrization ODE
    fam = CurveFamily.from_curves([slit_curve(-0.3, 1.0, 800), slit_curve(0.3, 1.0, 800)])
    ref = solve_reparam(fam, 0.1, 0.025 / 16, tol=np.inf).s[0, -1]
    errs = [np.abs(solve_reparam(fam, 0.1, h, tol=np.inf).s[0, -1] - ref).max() for h in (0.025, 0.0125)]
    ode_rate = float(np.log2(errs[0] / errs[1]))
    elapsed = time.perf_counter() - t0
    ok = consistent and zipper_ok and ode_rate > 1.7
    verdict(9, ok, f"swallow offset {worst:.1e} (<= 2dt); half-disk zipper rates {np.round(rates, 2).tolist()}, "
                   f"slit err {slit:.1e}; Heun rate {ode_rate:.2f} in {elapsed:.0f}s")
    assert ok
