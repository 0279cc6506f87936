"""Resolution-indexed phase diagnostics for traces and driver ensembles.

Every topological flag (simple, disjoint, hitting) is decided at an explicit
tolerance ``tol``, which must be at least three times the observed (median)
spacing between consecutive trace points.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree

from .errors import ResolutionTooCoarse
from .sde import SdeParams, bessel_marginal_cdf, simulate_bessel_ensemble, simulate_dyson_ensemble

# two points of one curve closer than tol count as a self-touch only when the
# arc between them leaves a box of diagonal LOOP_FACTOR * tol
LOOP_FACTOR = 6.0
# reference box for area coverage, relative to the outermost starting points
BOX_MARGIN = 1.5
BOX_HEIGHT = 2.0


def _points(trace) -> np.ndarray:
    return np.asarray(getattr(trace, "points", trace), dtype=complex)


def observed_spacing(traces) -> float:
    d = np.concatenate([np.abs(np.diff(_points(t))) for t in traces if len(_points(t)) > 1] or [[0.0]])
    return float(np.median(d))


def reference_box(starts) -> tuple[float, float, float]:
    starts = np.asarray(starts, dtype=float)
    return float(starts.min() - BOX_MARGIN), float(starts.max() + BOX_MARGIN), BOX_HEIGHT


@dataclass
class PhaseReport:
    kappa: float | None
    tol: float
    spacing: float
    self_intersects: np.ndarray  # (N,)
    hits_R: np.ndarray  # (N,)
    neighbor_hit: np.ndarray  # (N, N), symmetric, |i-j| = 1
    second_neighbor_hit: np.ndarray  # (N, N), |i-j| = 2
    min_distance: np.ndarray  # (N, N) cross-curve distances, inf on the diagonal
    area_coverage: float
    escape: float
    box: tuple = field(default=())

    @property
    def all_simple(self) -> bool:
        return not bool(self.self_intersects.any())

    @property
    def all_disjoint(self) -> bool:
        return bool(np.all(self.min_distance > self.tol))

    def to_dict(self) -> dict:
        d = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}
        d["min_distance"] = [[None if not np.isfinite(x) else x for x in row]
                             for row in self.min_distance.tolist()]
        d["all_simple"] = self.all_simple
        d["all_disjoint"] = self.all_disjoint
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


class _RangeBox:
    """Sparse tables answering bounding-box queries over index ranges in O(1)."""

    def __init__(self, p: np.ndarray):
        self.levels = [(p.real, p.real, p.imag, p.imag)]
        k = 1
        while 2 * k <= len(p):
            x0, x1, y0, y1 = self.levels[-1]
            self.levels.append((np.minimum(x0[:-k], x0[k:]), np.maximum(x1[:-k], x1[k:]),
                                np.minimum(y0[:-k], y0[k:]), np.maximum(y1[:-k], y1[k:])))
            k *= 2

    def diameter(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Bounding-box diagonal of points lo..hi (inclusive)."""
        n = hi - lo + 1
        lev = np.floor(np.log2(n)).astype(int)
        out = np.empty(len(lo))
        for L in np.unique(lev):
            m = lev == L
            x0, x1, y0, y1 = self.levels[L]
            a, b = lo[m], hi[m] - (1 << L) + 1
            w = np.maximum(x1[a], x1[b]) - np.minimum(x0[a], x0[b])
            h = np.maximum(y1[a], y1[b]) - np.minimum(y0[a], y0[b])
            out[m] = np.hypot(w, h)
        return out


def _self_touch(p: np.ndarray, tol: float) -> bool:
    if len(p) < 3:
        return False
    tree = cKDTree(np.column_stack([p.real, p.imag]))
    pairs = tree.query_pairs(tol, output_type="ndarray")
    if len(pairs) == 0:
        return False
    lo, hi = pairs.min(axis=1), pairs.max(axis=1)
    return bool(np.any(_RangeBox(p).diameter(lo, hi) > LOOP_FACTOR * tol))


def _hits_real_line(p: np.ndarray, tol: float) -> bool:
    # points within 3 tol of the starting point are the curve's own foot
    away = np.abs(p - p[0]) > 3.0 * tol
    return bool(np.any(away & (p.imag < tol)))


def classify_phase(traces, tol: float, kappa: float | None = None, box=None) -> PhaseReport:
    """Phase flags for one path's N traces (``Trace`` objects or point arrays)."""
    pts = [_points(t) for t in traces]
    spacing = observed_spacing(pts)
    if tol < 3.0 * spacing:
        raise ResolutionTooCoarse(f"tol {tol:.3g} is below 3x the observed spacing {spacing:.3g}")
    n = len(pts)
    selfs = np.array([_self_touch(p, tol) for p in pts])
    hits = np.array([_hits_real_line(p, tol) for p in pts])
    trees = [cKDTree(np.column_stack([p.real, p.imag])) for p in pts]
    dist = np.full((n, n), np.inf)
    for i in range(n):
        for j in range(i + 1, n):
            d, _ = trees[j].query(np.column_stack([pts[i].real, pts[i].imag]))
            dist[i, j] = dist[j, i] = float(d.min())
    idx = np.arange(n)
    sep = np.abs(idx[:, None] - idx[None, :])
    close = dist <= tol
    box = tuple(box) if box is not None else reference_box([p[0].real for p in pts])
    return PhaseReport(kappa, float(tol), spacing, selfs, hits, close & (sep == 1),
                       close & (sep == 2), dist, area_coverage(pts, tol, box),
                       float(max(np.abs(p).max() for p in pts)), box)


def area_coverage(traces, tol: float, box) -> float:
    """Fraction of the box's tol-sized cells whose centre is within tol of a trace point."""
    x0, x1, h = box
    nx = max(1, int(round((x1 - x0) / tol)))
    ny = max(1, int(round(h / tol)))
    cx = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    cy = (np.arange(ny) + 0.5) * h / ny
    centres = np.array(np.meshgrid(cx, cy, indexing="ij")).reshape(2, -1).T
    allp = np.concatenate([_points(t) for t in traces])
    tree = cKDTree(np.column_stack([allp.real, allp.imag]))
    d, _ = tree.query(centres, distance_upper_bound=tol * (1 + 1e-12))
    return float(np.mean(d <= tol))


@dataclass
class EnsemblePhase:
    kappa: float | None
    tol: float
    n_paths: int
    frac_simple_disjoint: float
    frac_hits_or_neighbor: float
    neighbor_rate: float
    second_neighbor_rate: float
    mean_coverage: float
    mean_escape: float

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(reports: list[PhaseReport]) -> EnsemblePhase:
    """Ensemble rates; the thresholds applied to them are acceptance choices."""
    n = len(reports)
    sd = np.mean([r.all_simple and r.all_disjoint for r in reports])
    hn = np.mean([bool(r.hits_R.any() or r.neighbor_hit.any()) for r in reports])
    nb = np.mean([bool(r.neighbor_hit.any()) for r in reports])
    snb = np.mean([bool(r.second_neighbor_hit.any()) for r in reports])
    return EnsemblePhase(reports[0].kappa if n else None, reports[0].tol if n else float("nan"), n,
                         float(sd), float(hn), float(nb), float(snb),
                         float(np.mean([r.area_coverage for r in reports])),
                         float(np.mean([r.escape for r in reports])))


def write_summary_csv(path, summaries: list[EnsemblePhase]) -> None:
    rows = [s.to_dict() for s in summaries]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def neighbor_structure(traces_per_path, tol: float) -> dict:
    """Neighbour and second-neighbour hit matrices per path plus ensemble rates."""
    reps = [classify_phase(tr, tol) for tr in traces_per_path]
    nb = np.array([r.neighbor_hit for r in reps])
    snb = np.array([r.second_neighbor_hit for r in reps])
    return {"neighbor_hit": nb, "second_neighbor_hit": snb,
            "neighbor_rate": float(np.mean(nb.any(axis=(1, 2)))),
            "second_neighbor_rate": float(np.mean(snb.any(axis=(1, 2)))),
            "all_false": float(np.mean(~nb.any(axis=(1, 2)) & ~snb.any(axis=(1, 2)))),
            "tol": tol}


# ---------------------------------------------------------------------------
# driver-level checks
# ---------------------------------------------------------------------------

def collision_scan(ensemble) -> dict:
    """Minimal consecutive gap over time per path, and the rejection rate.

    Accepts a ``DysonEnsemble`` (rejected paths counted) or an array (P, N, T).
    """
    values = getattr(ensemble, "values", ensemble)
    accepted = getattr(ensemble, "accepted", np.ones(values.shape[0], dtype=bool))
    P, N, _ = values.shape
    if N < 2:
        gaps = np.full(P, np.inf)
    else:
        with np.errstate(invalid="ignore"):
            gaps = np.nanmin(np.diff(values[accepted], axis=1), axis=(1, 2))
    finite = gaps[np.isfinite(gaps)]
    q = np.quantile(finite, [0.0, 0.01, 0.5]) if len(finite) else np.full(3, np.inf)
    return {"n_paths": int(P), "rejection_rate": float(1.0 - accepted.mean()),
            "min_gap": float(q[0]), "q01_gap": float(q[1]), "median_gap": float(q[2]),
            "gaps": gaps}


@dataclass
class BesselLawReport:
    kappa: float
    dimension: float
    t: float
    ks_simulated: tuple  # (statistic, pvalue) against a simulated Bessel ensemble
    ks_exact: tuple  # against the exact noncentral chi marginal
    n_paths: int

    def passed(self, level: float = 0.01) -> bool:
        return self.ks_simulated[1] > level

    def to_dict(self) -> dict:
        return asdict(self)


def bessel_law_check(kappa: float, n_paths: int = 5000, t: float = 0.5, dt: float = 1e-3,
                     seed: int = 0, positions=(0.0, 1.0)) -> BesselLawReport:
    """Scaled gap (X2 - X1)/sqrt(2 kappa) of a two-particle system against Bessel(8/kappa + 1)."""
    p = SdeParams(kappa, tuple(positions), dt, t, seed)
    ens = simulate_dyson_ensemble(p, n_paths=n_paths)
    scale = np.sqrt(2.0 * kappa)
    gap = (ens.values[ens.accepted, 1, -1] - ens.values[ens.accepted, 0, -1]) / scale
    dim = 8.0 / kappa + 1.0
    start = (positions[1] - positions[0]) / scale
    bes = simulate_bessel_ensemble(dim, start, dt, t, seed=seed + 7919, n_paths=n_paths)
    r1 = stats.ks_2samp(gap, bes.marginal(t))
    r2 = stats.kstest(gap, bessel_marginal_cdf(dim, start, t))
    return BesselLawReport(kappa, dim, t, (float(r1.statistic), float(r1.pvalue)),
                           (float(r2.statistic), float(r2.pvalue)), int(len(gap)))


def escape_trend(traces_batch, times, ks, checkpoints) -> np.ndarray:
    """Ensemble mean of max |trace point| up to each checkpoint time.

    ``traces_batch`` is (P, N, K) sampled at grid indices ``ks`` of ``times``.
    """
    t_of = np.asarray(times)[np.asarray(ks)]
    out = []
    for T in checkpoints:
        sel = t_of <= T + 1e-12
        out.append(float(np.abs(traces_batch[:, :, sel]).max(axis=(1, 2)).mean()))
    return np.array(out)
