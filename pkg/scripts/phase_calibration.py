"""Phase diagnostics across kappa for two curves started at -1 and 1: fraction of
simple and disjoint paths, fraction hitting the real line or a neighbour, and
area coverage of the reference box."""
import argparse

import numpy as np

from multisle.diagnostics import classify_phase, reference_box, summarize
from multisle.loewner import full_traces_batch
from multisle.sde import SdeParams, simulate_dyson_ensemble


def run(kappas, paths, horizon, dt, eps, tol, seed):
    print(f"{'kappa':>6} {'simple':>8} {'hits':>8} {'neighbor':>9} {'coverage':>9}")
    for kappa in kappas:
        p = SdeParams(kappa, (-1.0, 1.0), dt, horizon, seed=seed)
        e = simulate_dyson_ensemble(p, n_paths=paths)
        tr = full_traces_batch(e.values[e.accepted], p.times, np.arange(p.n_steps + 1), eps)
        box = reference_box(p.initial_positions)
        s = summarize([classify_phase(list(t), tol, kappa, box) for t in tr])
        print(f"{kappa:6.2f} {s.frac_simple_disjoint:8.3f} {s.frac_hits_or_neighbor:8.3f} "
              f"{s.neighbor_rate:9.3f} {s.mean_coverage:9.4f}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--kappa", type=float, nargs="+", default=[2.0, 4.0, 6.0, 8.0])
    ap.add_argument("--paths", type=int, default=100)
    ap.add_argument("--horizon", type=float, default=0.5)
    ap.add_argument("--dt", type=float, default=1e-3)
    ap.add_argument("--eps", type=float, default=0.02)
    ap.add_argument("--tol", type=float, default=0.12)
    ap.add_argument("--seed", type=int, default=1)
    a = ap.parse_args()
    run(a.kappa, a.paths, a.horizon, a.dt, a.eps, a.tol, a.seed)
