"""Fusing individually capacity-parametrized curves into one multiple chain.

Every curve is stored as a polyline of trace points together with its own
mapping-out chain (the geodesic zipper of those points), so the capacity
parameter ``s_i`` of a curve is half the half-plane capacity of its polyline
hull. All operations are batched over ensemble members: arrays carry a leading
axis ``P`` and chains are padded with identity elements.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .conformal import (
    MapChain, batch_apply, batch_boundary_derivative, batch_invert, batch_zipper, element_cap,
    element_inverse, element_tip_image, partial_height,
)
from .errors import CurveExhausted, DerivativeBlowup, InvalidParams
from .sde import flowline_batch

CP_FLOOR = 1e-6
FD_REL_STEP = 1e-3
SWALLOW_TOL = 1e-12
ODE_TOL = 3e-4
MAX_HALVINGS = 8


# ---------------------------------------------------------------------------
# curve families
# ---------------------------------------------------------------------------

def _slit_tips(xi: np.ndarray, ds: float):
    """Vertical-slit chain of the drivers ``xi`` (P, T) and its tip polylines.

    Element k is a slit of capacity increment ``ds`` at the mid-step driver
    value; returns anchors (P, K), heights (K,) and points (P, K+1) where
    point k is the tip after k elements (point 0 the starting point).
    """
    anchors = 0.5 * (xi[:, :-1] + xi[:, 1:])
    P, K = anchors.shape
    h = 2.0 * np.sqrt(ds)
    tips = np.zeros((P, K), dtype=complex)
    for e in range(K - 1, -1, -1):
        if e + 1 < K:
            tips[:, e + 1:] = element_inverse(tips[:, e + 1:], anchors[:, e, None], 0.0, h)
        tips[:, e] = anchors[:, e] + 1j * h
    pts = np.concatenate([xi[:, :1].astype(complex), tips], axis=1)
    return anchors, h, pts


@dataclass
class CurveFamily:
    """N curves for each of P ensemble members.

    ``points[i]`` is (P, M_i) with column 0 the starting point on the real
    line; ``anchors/qs/hs[i]`` (P, M_i - 1) is the zipper chain mapping the
    polyline out, element k ending at point k + 1.
    """
    points: list
    anchors: list
    qs: list
    hs: list
    kappa: float | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self._cum = [np.cumsum(np.where(h > 0, element_cap(q, h), 0.0), axis=1) / 2.0
                     for q, h in zip(self.qs, self.hs)]

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def n_members(self) -> int:
        return self.points[0].shape[0]

    @property
    def starts(self) -> np.ndarray:
        return np.stack([p[:, 0].real for p in self.points], axis=1)

    def cumulative(self, i: int) -> np.ndarray:
        """Own capacity parameter at the end of each element of curve ``i`` (1-based)."""
        return self._cum[i - 1]

    @property
    def extent(self) -> np.ndarray:
        """(P, N) largest capacity parameter stored for each curve."""
        return np.stack([c[:, -1] if c.shape[1] else np.zeros(self.n_members) for c in self._cum],
                        axis=1)

    def member(self, k: int) -> "CurveFamily":
        sl = slice(k, k + 1)
        return CurveFamily([p[sl] for p in self.points], [a[sl] for a in self.anchors],
                           [q[sl] for q in self.qs], [h[sl] for h in self.hs], self.kappa,
                           {**self.provenance, "member": int(k)})

    def select(self, rows) -> "CurveFamily":
        rows = np.asarray(rows)
        return CurveFamily([p[rows] for p in self.points], [a[rows] for a in self.anchors],
                           [q[rows] for q in self.qs], [h[rows] for h in self.hs], self.kappa,
                           dict(self.provenance))

    def trace(self, i: int, k: int = 0):
        from .loewner import Trace

        c = self._cum[i - 1][k]
        return Trace(i, np.concatenate([[0.0], c]), self.points[i - 1][k].copy(),
                     np.zeros(len(c) + 1))

    @classmethod
    def from_curves(cls, curves, kappa=None, provenance=None) -> "CurveFamily":
        """Family from polylines: a list over curves of (M,) or (P, M) arrays."""
        pts, an, qq, hh = [], [], [], []
        for c in curves:
            c = np.atleast_2d(np.asarray(c, dtype=complex))
            if np.any(np.abs(c[:, 0].imag) > 0):
                raise InvalidParams("curves must start on the real line")
            z = batch_zipper(c, np.ones(c.shape, dtype=bool))
            pts.append(c)
            an.append(z.anchors[:, 1:])
            qq.append(z.qs[:, 1:])
            hh.append(z.hs[:, 1:])
        return cls(pts, an, qq, hh, kappa, dict(provenance or {}))

    def check_parametrization(self, i: int, s) -> np.ndarray:
        """Zipper capacity of curve ``i`` cut at ``s`` (P,), to compare with 2s."""
        s = np.broadcast_to(np.asarray(s, dtype=float), (self.n_members,))
        cut = _cut(self, i, s)
        pts, mask = _points_upto(self, i, cut)
        return batch_zipper(pts, mask).total_cap


def sample_family(kappa: float, starts, horizon: float, ds: float, n_paths: int = 1,
                  seed: int = 0, mode: str = "conditional", first_path_id: int = 0) -> CurveFamily:
    """Sample flow-line families driven by SLE(kappa; 2, ..., 2) drivers.

    ``mode``:
      - ``conditional``: the joint law of flow lines of one field. Curve 1 is
        grown in the half-plane; curve k is grown in the coordinates where
        curves 1..k-1 have been mapped out, with force points at their tip
        images and at the images of the remaining starting points, then
        mapped back.
      - ``independent``: every curve is grown in the half-plane with force
        points at the other starting points, with independent noise.
      - ``mirror``: N = 2 only; curve 2 is driven by the mirrored noise of
        curve 1, so symmetric starting points give mirror-image curves.

    ``horizon`` is the driver capacity each curve is grown to; the capacity
    of a mapped-back curve is at least its mapped capacity.
    """
    x = np.asarray(starts, dtype=float)
    n = len(x)
    if np.any(np.diff(x) <= 0):
        raise InvalidParams("starting points must be strictly increasing")
    if mode == "mirror" and n != 2:
        raise InvalidParams("mirror mode needs exactly two curves")
    n_steps = int(round(horizon / ds))
    if n_steps < 1:
        raise InvalidParams("horizon shorter than one step")
    ids = np.arange(first_path_id, first_path_id + n_paths)
    accepted = np.ones(n_paths, dtype=bool)
    curves = []
    if mode in ("independent", "mirror"):
        x0 = np.tile(x, (n_paths, 1))
        for i in range(1, n + 1):
            stream = 0 if mode == "mirror" else i - 1
            v, acc = flowline_batch(i, kappa, x0, ds, n_steps, seed, ids, stream=stream,
                                    mirror=(mode == "mirror" and i == 2))
            accepted &= acc
            curves.append(_slit_tips(np.nan_to_num(v[:, i - 1, :]), ds)[2])
    elif mode == "conditional":
        ga = np.zeros((n_paths, 0))
        gh = np.zeros((n_paths, 0))
        tip_images = []
        for i in range(1, n + 1):
            gq = np.zeros_like(ga)
            tips = [batch_apply(ga[:, k + 1:], gq[:, k + 1:], gh[:, k + 1:], t[:, None])[0][:, 0].real
                    for k, t in tip_images]
            rest = batch_apply(ga, gq, gh, np.tile(x[i - 1:], (n_paths, 1)).astype(complex))[0].real
            x0 = np.concatenate([np.stack(tips, axis=1) if tips else np.zeros((n_paths, 0)), rest],
                                axis=1)
            v, acc = flowline_batch(i, kappa, np.where(accepted[:, None], x0, np.arange(n)), ds,
                                    n_steps, seed, ids, stream=i - 1)
            accepted &= acc
            anchors, h, mapped = _slit_tips(np.nan_to_num(v[:, i - 1, :]), ds)
            curves.append(batch_invert(ga, gq, gh, mapped))
            tip_images.append((ga.shape[1] + anchors.shape[1] - 1, anchors[:, -1]))
            ga = np.concatenate([ga, anchors], axis=1)
            gh = np.concatenate([gh, np.full(anchors.shape, h)], axis=1)
    else:
        raise InvalidParams(f"unknown mode {mode!r}")
    fam = CurveFamily.from_curves(curves, kappa, {
        "seed": int(seed), "path_ids": ids.tolist(), "mode": mode, "ds": ds,
        "horizon": horizon, "starts": x.tolist(), "accepted": accepted.tolist()})
    return fam if accepted.all() else fam.select(np.flatnonzero(accepted))


# ---------------------------------------------------------------------------
# cutting curves at a capacity parameter
# ---------------------------------------------------------------------------

@dataclass
class _Cut:
    m: np.ndarray  # number of complete elements
    y: np.ndarray  # partial height of element m (0 if none)
    q: np.ndarray  # its circle parameter
    u: np.ndarray  # its anchor
    xi: np.ndarray  # image of the tip under the own chain


def _cut(fam: CurveFamily, i: int, s: np.ndarray, strict: bool = True) -> _Cut:
    cum = fam.cumulative(i)
    an, qs, hs = fam.anchors[i - 1], fam.qs[i - 1], fam.hs[i - 1]
    P, K = cum.shape
    rows = np.arange(P)
    s = np.maximum(s, 0.0)
    m = np.sum(cum <= s[:, None], axis=1)
    if K == 0:
        if strict and np.any(s > 0):
            raise CurveExhausted(f"curve {i} has no extent")
        z = np.zeros(P)
        return _Cut(m, z, z, fam.points[i - 1][:, 0].real, fam.points[i - 1][:, 0].real)
    over = m >= K
    excess = s - cum[:, -1]
    if strict and np.any(over & (excess > 1e-12 * np.maximum(1.0, s))):
        raise CurveExhausted(f"capacity {float(np.max(s)):.6g} beyond curve {i} "
                             f"extent {float(np.min(cum[:, -1])):.6g}")
    mc = np.minimum(m, K - 1)
    prev = np.where(mc > 0, cum[rows, np.maximum(mc - 1, 0)], 0.0)
    q = qs[rows, mc]
    y = np.where(over, hs[rows, K - 1], partial_height(q, 2.0 * (s - prev)))
    y = np.where(over | (hs[rows, mc] > 0), np.minimum(y, hs[rows, mc]), 0.0)
    u = an[rows, mc]
    xi = u + element_tip_image(q, y)
    # before the first element the tip is the starting point
    xi = np.where((m == 0) & (y == 0), fam.points[i - 1][:, 0].real, xi)
    return _Cut(np.where(over, K - 1, m), y, q, u, xi)


def _own_chain(fam: CurveFamily, i: int, cut: _Cut):
    """Padded own chain of curve ``i`` up to the cut (complete + partial element)."""
    an, qs, hs = fam.anchors[i - 1], fam.qs[i - 1], fam.hs[i - 1]
    width = int(min(an.shape[1], cut.m.max() + 1)) if an.shape[1] else 0
    col = np.arange(width)[None, :]
    m = cut.m[:, None]
    full = col < m
    part = col == m
    a = np.where(full, an[:, :width], np.where(part, cut.u[:, None], 0.0))
    q = np.where(full, qs[:, :width], np.where(part, cut.q[:, None], 0.0))
    h = np.where(full, hs[:, :width], np.where(part, cut.y[:, None], 0.0))
    return a, q, h


def _points_upto(fam: CurveFamily, i: int, cut: _Cut):
    """Polyline of curve ``i`` up to the cut with the partial tip appended."""
    pts = fam.points[i - 1]
    an, qs, hs = fam.anchors[i - 1], fam.qs[i - 1], fam.hs[i - 1]
    width = int(min(pts.shape[1], cut.m.max() + 2))
    out = pts[:, :width].copy()
    col = np.arange(width)[None, :]
    mask = col <= cut.m[:, None]
    has_part = (cut.y > 0) & (cut.m + 1 < pts.shape[1])
    if has_part.any():
        # partial tip: the point at height y on the arc of element m, pulled back
        # through the complete elements
        t = 1j * cut.y
        zeta = t / (1.0 + cut.q * t)
        w = (cut.u + zeta)[:, None]
        k_end = int(cut.m.max())
        keep = np.arange(k_end)[None, :] < cut.m[:, None]
        tip = batch_invert(np.where(keep, an[:, :k_end], 0.0), np.where(keep, qs[:, :k_end], 0.0),
                           np.where(keep, hs[:, :k_end], 0.0), w)[:, 0]
        rows = np.flatnonzero(has_part)
        out[rows, cut.m[rows] + 1] = tip[rows]
        mask[rows, cut.m[rows] + 1] = True
    return out, mask


# ---------------------------------------------------------------------------
# capacity derivative
# ---------------------------------------------------------------------------

@dataclass
class _Pipeline:
    """Own chain of curve i followed by the zipper of the other curves' images."""
    cut: _Cut
    own: tuple
    zip: object
    s_i: np.ndarray

    @property
    def hcap(self) -> np.ndarray:
        return 2.0 * self.s_i + self.zip.total_cap


def _pipeline(fam: CurveFamily, s: np.ndarray, i: int, strict: bool = True) -> _Pipeline:
    cut = _cut(fam, i, s[:, i - 1], strict)
    own = _own_chain(fam, i, cut)
    blocks, masks, starts = [], [], []
    col = 0
    for j in range(1, fam.n + 1):
        if j == i:
            continue
        cj = _cut(fam, j, s[:, j - 1], strict)
        pts, mask = _points_upto(fam, j, cj)
        w, lowest = batch_apply(*own, pts)
        scale = np.maximum(1.0, np.abs(w).max(axis=1, initial=0.0))[:, None]
        swallowed = lowest <= SWALLOW_TOL * scale
        swallowed[:, 0] = False
        w[:, 0] = w[:, 0].real
        blocks.append(w)
        masks.append(mask & ~swallowed)
        starts.append(col)
        col += w.shape[1]
    if blocks:
        z = batch_zipper(np.concatenate(blocks, axis=1), np.concatenate(masks, axis=1), starts)
    else:
        P = fam.n_members
        z = batch_zipper(np.zeros((P, 0), dtype=complex), np.zeros((P, 0), dtype=bool))
    return _Pipeline(cut, own, z, s[:, i - 1])


def _fd_partial(fam: CurveFamily, s: np.ndarray, i: int, base=None) -> np.ndarray:
    scale = np.maximum(s.max(axis=1), 1e-3)
    d = FD_REL_STEP * scale
    up = s.copy()
    up[:, i - 1] += d
    hu = _pipeline(fam, up, i).hcap
    lo = s.copy()
    lo[:, i - 1] -= d
    neg = lo[:, i - 1] < 0
    lo[:, i - 1] = np.maximum(lo[:, i - 1], 0.0)
    hl = _pipeline(fam, lo, i).hcap
    span = np.where(neg, d + s[:, i - 1], 2.0 * d)
    return (hu - hl) / span


def _fprime_partial(fam: CurveFamily, s: np.ndarray, i: int, pipe: _Pipeline | None = None,
                    foot_tol: float = 1e-9):
    pipe = pipe or _pipeline(fam, s, i)
    z = pipe.zip
    d, at_foot = batch_boundary_derivative(z.anchors, z.qs, z.hs, pipe.cut.xi, foot_tol)
    return 2.0 * d * d, at_foot, pipe


def capacity_partial(curves: CurveFamily, s, i: int, method: str = "fprime",
                     report: dict | None = None):
    """Derivative of the combined hull capacity in the own parameter of curve ``i``.

    ``s`` is an N-vector (applied to every member) or a (P, N) array; returns
    a float for single-member families, otherwise a (P,) array. Members where
    the tip image sits on a foot of the mapped hull fall back to the finite
    difference; their count is added to ``report['touch_degenerate']``.
    """
    s = _as_s(curves, s)
    if not 1 <= i <= curves.n:
        raise InvalidParams(f"curve index {i} outside 1..{curves.n}")
    if method == "fprime":
        val, at_foot, _ = _fprime_partial(curves, s, i)
        if at_foot.any():
            rows = np.flatnonzero(at_foot)
            val[rows] = _fd_partial(curves.select(rows), s[rows], i)
            if report is not None:
                report["touch_degenerate"] = report.get("touch_degenerate", 0) + len(rows)
    elif method == "finite_diff":
        val = _fd_partial(curves, s, i)
    else:
        raise InvalidParams(f"unknown method {method!r}")
    if curves.n_members == 1:
        return float(val[0])
    return val


def _as_s(fam: CurveFamily, s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.ndim == 1:
        s = np.tile(s, (fam.n_members, 1))
    if s.shape != (fam.n_members, fam.n):
        raise InvalidParams(f"s has shape {s.shape}, expected {(fam.n_members, fam.n)}")
    return s.copy()


def combined_state(fam: CurveFamily, s):
    """Combined-hull capacity and tip images at parameters ``s``.

    Returns (hcap (P,), tilde_X (P, N)).
    """
    s = _as_s(fam, s)
    pipes = [_pipeline(fam, s, i) for i in range(1, fam.n + 1)]
    return pipes[0].hcap, np.stack([_tip_image(p) for p in pipes], axis=1)


def combined_chain(fam: CurveFamily, s, member: int = 0) -> MapChain:
    """Mapping-out chain of the combined hull for one member."""
    s = _as_s(fam, s)
    pipe = _pipeline(fam, s, 1)
    a, q, h = pipe.own
    z = pipe.zip
    an = np.concatenate([a[member], z.anchors[member]])
    qq = np.concatenate([q[member], z.qs[member]])
    hh = np.concatenate([h[member], z.hs[member]])
    keep = hh > 0
    return MapChain(an[keep], hh[keep], qq[keep])


def _tip_image(pipe: _Pipeline) -> np.ndarray:
    """X~_i: the own tip image pushed through the map-out of the other curves."""
    z = pipe.zip
    w = batch_apply(z.anchors, z.qs, z.hs, pipe.cut.xi[:, None].astype(complex))[0]
    return w[:, 0].real


# ---------------------------------------------------------------------------
# the ODE
# ---------------------------------------------------------------------------

@dataclass
class ReparamSolution:
    times: np.ndarray  # (K,)
    s: np.ndarray  # (P, K, N)
    tilde_x: np.ndarray  # (P, K, N)
    hcap: np.ndarray  # (P, K)
    partials: np.ndarray  # (P, K, N) capacity derivatives at the nodes
    complete: np.ndarray  # (P,) False where the curves ran out before the horizon
    touch_degenerate: int = 0
    family: CurveFamily | None = field(default=None, repr=False)
    halvings: int = 0

    @property
    def n(self) -> int:
        return self.s.shape[2]

    def summand_residual(self) -> np.ndarray:
        """(d hcap / d s_i)(ds_i/dt) - 2 at interior nodes, ds/dt by central differences."""
        dt = np.diff(self.times)
        rate = (self.s[:, 2:] - self.s[:, :-2]) / (dt[1:] + dt[:-1])[None, :, None]
        return self.partials[:, 1:-1] * rate - 2.0

    def combined_chain(self, node: int = -1, member: int = 0) -> MapChain:
        if self.family is None:
            raise InvalidParams("solution carries no curve family")
        return combined_chain(self.family.member(member), self.s[member, node])

    def to_json(self) -> str:
        return json.dumps({
            "times": self.times.tolist(), "s": self.s.tolist(), "tilde_x": self.tilde_x.tolist(),
            "hcap": self.hcap.tolist(), "partials": self.partials.tolist(),
            "complete": self.complete.tolist(), "touch_degenerate": self.touch_degenerate,
        })

    @classmethod
    def from_json(cls, text: str) -> "ReparamSolution":
        d = json.loads(text)
        return cls(np.array(d["times"]), np.array(d["s"]), np.array(d["tilde_x"]),
                   np.array(d["hcap"]), np.array(d["partials"]), np.array(d["complete"], dtype=bool),
                   int(d["touch_degenerate"]))

    def write_csv(self, path, header: dict | None = None) -> None:
        """One row per (member, node): member, t, X~_1..X~_N."""
        with open(path, "w", newline="") as fh:
            if header:
                fh.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
            w = csv.writer(fh)
            w.writerow(["member", "t"] + [f"x{i + 1}" for i in range(self.n)])
            for p in range(self.s.shape[0]):
                for k, t in enumerate(self.times):
                    w.writerow([p, repr(float(t))] + [repr(float(v)) for v in self.tilde_x[p, k]])


def _rates(fam, s, method, report):
    """ds/dt = 2 / partial for every curve, plus hcap and tilde X at ``s``."""
    P, N = s.shape
    cp = np.empty((P, N))
    xt = np.empty((P, N))
    hcap = None
    for i in range(1, N + 1):
        if method == "fprime":
            val, at_foot, pipe = _fprime_partial(fam, s, i)
            if at_foot.any():
                rows = np.flatnonzero(at_foot)
                val[rows] = _fd_partial(fam.select(rows), s[rows], i)
                report["touch_degenerate"] += len(rows)
        else:
            pipe = _pipeline(fam, s, i)
            val = _fd_partial(fam, s, i)
        if i == 1:
            hcap = pipe.hcap
        xt[:, i - 1] = _tip_image(pipe)
        cp[:, i - 1] = val
    if np.any(cp < CP_FLOOR):
        bad = np.argwhere(cp < CP_FLOOR)[0]
        raise DerivativeBlowup(f"capacity derivative {cp[tuple(bad)]:.3g} below floor "
                               f"for curve {bad[1] + 1} of member {bad[0]} at s={s[bad[0]].tolist()}")
    return 2.0 / cp, cp, hcap, xt


def _heun(fam, s, rate, dt, extent, tol, depth, report, method):
    """One Heun step of length ``dt`` for every member, halved recursively
    where the two slopes disagree. Members running off their curves get NaN."""
    out = np.full_like(s, np.nan)
    pred = s + dt * rate
    ok = np.all(pred <= extent, axis=1)
    if not ok.any():
        return out
    rows = np.flatnonzero(ok)
    sub = fam.select(rows) if len(rows) < fam.n_members else fam
    rate2, *_ = _rates(sub, pred[rows], method, report)
    err = 0.5 * dt * np.max(np.abs(rate2 - rate[rows]), axis=1)
    nxt = s[rows] + 0.5 * dt * (rate[rows] + rate2)
    bad = (err > tol) & (depth < MAX_HALVINGS)
    out[rows[~bad]] = nxt[~bad]
    if bad.any():
        report["halvings"] += int(bad.sum())
        b = rows[bad]
        fb = fam.select(b)
        mid = _heun(fb, s[b], rate[b], dt / 2, extent[b], tol, depth + 1, report, method)
        live = np.all(np.isfinite(mid), axis=1)
        if live.any():
            lb = np.flatnonzero(live)
            fl = fb.select(lb)
            rate_mid, *_ = _rates(fl, mid[lb], method, report)
            out[b[lb]] = _heun(fl, mid[lb], rate_mid, dt / 2, extent[b[lb]], tol, depth + 1,
                               report, method)
    return out


def solve_reparam(curves: CurveFamily, horizon: float, dt: float, method: str = "fprime",
                  tol: float = ODE_TOL) -> ReparamSolution:
    """Integrate ds_i/dt = 2 / (d hcap / d s_i) with Heun's method from s = 0.

    Node steps are halved per member while the local error estimate exceeds
    ``tol`` (absolute, in units of s). Members whose curves are too short stop
    early; their remaining nodes are NaN and ``complete`` is False for them.
    """
    if dt <= 0 or horizon <= 0:
        raise InvalidParams("horizon and dt must be positive")
    n_steps = int(round(horizon / dt))
    # accumulated like the Heun updates, so a unit rate reproduces the grid bit for bit
    times = np.concatenate([[0.0], np.cumsum(np.full(n_steps, dt))])
    P, N = curves.n_members, curves.n
    s_out = np.full((P, n_steps + 1, N), np.nan)
    x_out = np.full((P, n_steps + 1, N), np.nan)
    h_out = np.full((P, n_steps + 1), np.nan)
    c_out = np.full((P, n_steps + 1, N), np.nan)
    report = {"touch_degenerate": 0, "halvings": 0}
    extent = curves.extent
    rows = np.arange(P)
    s = np.zeros((P, N))
    rate, cp, hcap, xt = _rates(curves, s, method, report)
    for k in range(n_steps + 1):
        s_out[rows, k], c_out[rows, k] = s, cp
        h_out[rows, k], x_out[rows, k] = hcap, xt
        if k == n_steps:
            break
        sub = curves.select(rows)
        nxt = _heun(sub, s, rate, dt, extent[rows], tol, 0, report, method)
        live = np.all(np.isfinite(nxt), axis=1)
        rows, s = rows[live], nxt[live]
        if not len(rows):
            break
        rate, cp, hcap, xt = _rates(curves.select(rows), s, method, report)
    complete = ~np.isnan(s_out[:, -1, 0])
    return ReparamSolution(times, s_out, x_out, h_out, c_out, complete,
                           report["touch_degenerate"], curves, report["halvings"])


# ---------------------------------------------------------------------------
# weak-solution harness
# ---------------------------------------------------------------------------

@dataclass
class WeakSolutionReport:
    t: float
    ks: dict  # label -> (statistic, pvalue)
    qv_ratio: float | None
    n_a: int
    n_b: int

    def passed(self, level: float = 0.01) -> bool:
        return all(p > level for _, p in self.ks.values())

    def to_dict(self) -> dict:
        return {"t": self.t, "ks": {k: {"statistic": float(a), "pvalue": float(b)}
                                    for k, (a, b) in self.ks.items()},
                "qv_ratio": self.qv_ratio, "n_a": self.n_a, "n_b": self.n_b}


def weak_solution_check(ensemble_a, ensemble_b, t: float, times_a=None, kappa=None) -> WeakSolutionReport:
    """Compare the laws of fused tip images and direct Dyson drivers at time ``t``.

    ``ensemble_a`` / ``ensemble_b`` are (P, N) samples at ``t`` or (P, K, N)
    paths on the grid ``times_a`` (shared). With paths and ``kappa`` the mean
    realized quadratic variation of each coordinate is reported relative to
    kappa * t.
    """
    a = np.asarray(ensemble_a, dtype=float)
    b = np.asarray(ensemble_b, dtype=float)
    qv = None
    if a.ndim == 3:
        times_a = np.asarray(times_a)
        k = int(np.argmin(np.abs(times_a - t)))
        if kappa is not None:
            inc = np.diff(a[:, :k + 1], axis=1) ** 2
            qv = float(inc.sum(axis=1).mean() / (kappa * times_a[k]))
        a = a[:, k]
        b = b[:, k] if b.ndim == 3 else b
    a = a[np.all(np.isfinite(a), axis=1)]
    b = b[np.all(np.isfinite(b), axis=1)]
    ks = {}
    for i in range(a.shape[1]):
        r = stats.ks_2samp(a[:, i], b[:, i])
        ks[f"x{i + 1}"] = (float(r.statistic), float(r.pvalue))
    for i in range(a.shape[1] - 1):
        r = stats.ks_2samp(a[:, i + 1] - a[:, i], b[:, i + 1] - b[:, i])
        ks[f"gap{i + 1}"] = (float(r.statistic), float(r.pvalue))
    return WeakSolutionReport(float(t), ks, qv, len(a), len(b))
