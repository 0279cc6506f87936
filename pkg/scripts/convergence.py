"""Refinement studies: zipper capacity, trace resolution, reparametrization ODE
and GFF calibration. Prints tables; nothing is written to disk."""
import argparse

import numpy as np

from multisle.conformal import half_disk_arc, map_out_curve, slit_curve
from multisle.gff import GridDomain, calibrate
from multisle.loewner import trace_tips
from multisle.reparam import CurveFamily, solve_reparam
from multisle.sde import SdeParams, simulate_dyson


def zipper():
    print("zipper: half-disk hcap error (exact 1) and slit hcap error (exact 0.5)")
    prev = None
    for n in (17, 33, 65, 129, 257, 513):
        e = abs(map_out_curve(half_disk_arc(1.0, n)).total_cap - 1.0)
        s = abs(map_out_curve(slit_curve(0.0, 1.0, n)).total_cap - 0.5)
        rate = "" if prev is None else f"{np.log2(prev / e):6.2f}"
        print(f"  n={n:4d}  disk {e:.3e} {rate:>6}  slit {s:.1e}")
        prev = e


def traces(seed=5):
    print("trace tip at t=0.2 (kappa=4, one curve): change when eps halves")
    d = simulate_dyson(SdeParams(4.0, (0.0,), 1e-4, 0.2, seed=seed))
    k = [len(d.times) - 1]
    prev = None
    for eps in (0.16, 0.08, 0.04, 0.02, 0.01):
        tip = trace_tips(d.values, d.times, 1, k, eps)[0, 0]
        diff = "" if prev is None else f"{abs(tip - prev):.3e}"
        print(f"  eps={eps:<5}  tip {tip.real:+.5f}{tip.imag:+.5f}i  {diff}")
        prev = tip


def heun():
    print("reparametrization ODE: Heun self-convergence on two slits at +-0.3")
    fam = CurveFamily.from_curves([slit_curve(-0.3, 1.0, 800), slit_curve(0.3, 1.0, 800)])
    ref = solve_reparam(fam, 0.1, 0.025 / 32, tol=np.inf).s[0, -1]
    prev = None
    for h in (0.025, 0.0125, 0.00625, 0.003125):
        e = np.abs(solve_reparam(fam, 0.1, h, tol=np.inf).s[0, -1] - ref).max()
        rate = "" if prev is None else f"{np.log2(prev / e):6.2f}"
        print(f"  dt={h:<9} err {e:.3e} {rate}")
        prev = e


def gff():
    print("GFF: continuum Green / discrete inverse at 1j, 0.5+1.5j as the box doubles (target 2 pi)")
    for L in (2.0, 4.0, 8.0, 16.0):
        r = calibrate(GridDomain(L, L, 0.1), [(1j, 0.5 + 1.5j)])[0]
        print(f"  L=H={L:<5} ratio {r:.4f}  / 2pi = {r / (2 * np.pi):.4f}")


STUDIES = {"zipper": zipper, "traces": traces, "heun": heun, "gff": gff}

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("study", nargs="*", help=", ".join(STUDIES))
    for name in ap.parse_args().study or list(STUDIES):
        STUDIES[name]()
