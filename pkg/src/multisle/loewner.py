"""Forward and reverse multiple Loewner flows driven by sampled paths.

All flows are vectorised over ensemble members ("paths") and tracked points.
Driver arrays have shape ``(P, N, T)`` on a uniform grid and are linearly
interpolated in between.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .conformal import MapChain
from .errors import ReverseBlowup
from .sde import DrivingPaths

RK_TOL = 1e-3
MAX_HALVINGS = 16


def swallow_threshold(dt: float) -> float:
    return max(10.0 * np.finfo(float).eps, 2.0 * np.sqrt(dt))


def default_eps(dt: float) -> float:
    return 4.0 * np.sqrt(dt)


def _as_batch(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.ndim == 2:
        v = v[None]
    if v.ndim != 3:
        raise ValueError("driver values must have shape (N, T) or (P, N, T)")
    return v


def _velocity(g, x):
    """sum_j 2 / (g - x_j) for g of shape (P, M) and x of shape (P, N)."""
    return np.sum(2.0 / (g[:, :, None] - x[:, None, :]), axis=2)


def _dist(g, x):
    return np.min(np.abs(g[:, :, None] - x[:, None, :]), axis=2)


class _Flow:
    """Adaptive midpoint integrator for ``dg/dt = sign * sum 2/(g - X(t))``.

    ``xa`` and ``xb`` are the drivers at the two ends of the current grid
    interval; a step from ``t0`` to ``t0 + h`` (``t0`` measured from the
    interval start in units of the interval) uses linear interpolation.
    Steps whose midpoint and Euler predictions differ by more than
    ``RK_TOL`` times the distance to the nearest driver are halved.
    """

    def __init__(self, sign: float, dt: float, track_log_deriv: bool = False):
        self.sign = sign
        self.dt = dt
        self.track = track_log_deriv

    def _x(self, xa, xb, s):
        return xa + (xb - xa) * s

    def step(self, g, lg, xa, xb, s0, ds, depth=0):
        lg_in = lg
        h = self.sign * ds * self.dt
        x0 = self._x(xa, xb, s0)
        xm = self._x(xa, xb, s0 + 0.5 * ds)
        k1 = _velocity(g, x0)
        gm = g + 0.5 * h * k1
        k2 = _velocity(gm, xm)
        g_new = g + h * k2
        d = _dist(g, x0)
        err = np.abs(h * (k2 - k1))
        bad = ~(err <= RK_TOL * d)
        if self.track:
            lg = lg - h * np.sum(2.0 / (gm[:, :, None] - xm[:, None, :]) ** 2, axis=2)
        if depth < MAX_HALVINGS and np.any(bad):
            r, c = np.nonzero(bad)
            gs = g[r, c][:, None]
            ls = None if lg is None else lg_in[r, c][:, None]
            g1, l1 = self.step(gs, ls, xa[r], xb[r], s0, 0.5 * ds, depth + 1)
            g2, l2 = self.step(g1, l1, xa[r], xb[r], s0 + 0.5 * ds, 0.5 * ds, depth + 1)
            g_new[r, c] = g2[:, 0]
            if self.track:
                lg[r, c] = l2[:, 0]
        return g_new, lg


def flow_points(values, times, z0, t_end: float, threshold: float | None = None,
                log_derivative: bool = False):
    """Forward multiple Loewner flow of the points ``z0`` up to ``t_end``.

    ``values`` has shape ``(P, N, T)`` (or ``(N, T)``), ``z0`` shape ``(P, M)``
    or ``(M,)`` (shared by all paths). Returns ``(g, tau, log_gprime)`` where
    swallowed points keep their last image and carry their swallow time in
    ``tau`` (NaN while alive). ``log_gprime`` is ``None`` unless requested.
    """
    v = _as_batch(values)
    times = np.asarray(times, dtype=float)
    P = v.shape[0]
    z0 = np.asarray(z0, dtype=complex)
    g = np.broadcast_to(z0, (P, z0.shape[-1])).copy() if z0.ndim == 1 else z0.copy()
    dt = float(times[1] - times[0])
    thr = swallow_threshold(dt) if threshold is None else threshold
    tau = np.full(g.shape, np.nan)
    lg = np.zeros(g.shape, dtype=complex) if log_derivative else None
    alive = g.imag > 0
    tau[~alive] = 0.0
    flow = _Flow(+1.0, dt, log_derivative)
    k_end = int(np.floor(t_end / dt + 1e-9))
    frac = t_end / dt - k_end
    for k in range(k_end + (1 if frac > 1e-9 else 0)):
        ds = 1.0 if k < k_end else frac
        rows = np.nonzero(np.any(alive, axis=1))[0]
        if len(rows) == 0:
            break
        xa = v[rows, :, k]
        xb = v[rows, :, k + 1]
        sub = g[rows]
        sub_alive = alive[rows]
        # frozen points are parked far away so they do not slow the step control
        parked = np.where(sub_alive, sub, 1e6j)
        sub_lg = None if lg is None else lg[rows]
        gn, lgn = flow.step(parked, sub_lg, xa, xb, 0.0, ds)
        gn = np.where(sub_alive, gn, sub)
        t_now = times[k] + ds * dt
        x_now = xa + (xb - xa) * ds
        swallowed = sub_alive & ((_dist(gn, x_now) < thr) | ~np.isfinite(gn) | (gn.imag <= 0))
        tau_rows = tau[rows]
        tau_rows[swallowed] = t_now
        tau[rows] = tau_rows
        gn = np.where(swallowed & ~np.isfinite(gn), sub, gn)
        g[rows] = gn
        if lg is not None:
            lg[rows] = np.where(sub_alive, lgn, sub_lg)
        alive[rows] = sub_alive & ~swallowed
    return g, tau, lg


@dataclass
class LoewnerState:
    """Tracked points under the forward flow of one set of drivers."""

    drivers: DrivingPaths
    z0: np.ndarray
    g: np.ndarray = None
    tau: np.ndarray = None
    time: float = 0.0
    hcap_accum: float = 0.0
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.z0 = np.atleast_1d(np.asarray(self.z0, dtype=complex))
        if self.g is None:
            self.g = self.z0.copy()
        if self.tau is None:
            self.tau = np.where(self.z0.imag > 0, np.nan, 0.0)

    @property
    def alive(self) -> np.ndarray:
        return np.isnan(self.tau)

    def advance(self, until: float) -> "LoewnerState":
        return advance(self, until)


def advance(state: LoewnerState, until: float) -> LoewnerState:
    """Integrate alive points from ``state.time`` to ``until`` in place."""
    drv = state.drivers
    if until <= state.time:
        raise ValueError("until must exceed the current time")
    if until > drv.times[-1] + 1e-12:
        raise ValueError("until exceeds the driver horizon")
    # restrict the drivers to [state.time, until] on the same grid
    dt = drv.dt
    k0 = int(round(state.time / dt))
    if abs(k0 * dt - state.time) > 1e-9 * max(1.0, state.time):
        raise ValueError("advance must start on a grid time")
    vals = drv.values[:, k0:]
    times = drv.times[k0:] - drv.times[k0]
    alive = state.alive
    g, tau, _ = flow_points(vals, times, state.g[alive][None, :], until - state.time)
    new_g = state.g.copy()
    new_g[alive] = g[0]
    new_tau = state.tau.copy()
    new_tau[alive] = np.where(np.isnan(tau[0]), np.nan, tau[0] + state.time)
    state.g = new_g
    state.tau = new_tau
    state.hcap_accum += 2.0 * drv.n * (until - state.time)
    state.time = until
    return state


def swallow_grid(drivers: DrivingPaths, t: float, grid) -> np.ndarray:
    """Boolean mask of grid points swallowed by time ``t``."""
    grid = np.asarray(grid, dtype=complex)
    if t <= 0:
        return np.zeros(grid.shape, dtype=bool)
    _, tau, _ = flow_points(drivers.values, drivers.times, grid.ravel()[None, :], t)
    return (~np.isnan(tau[0])).reshape(grid.shape)


def write_mask_csv(path, grid, mask, header: dict | None = None) -> None:
    """Hull grid dump: one row per grid point with ``re, im, swallowed`` (0/1)."""
    grid = np.asarray(grid, dtype=complex).ravel()
    mask = np.asarray(mask, dtype=bool).ravel()
    with open(path, "w", newline="") as fh:
        if header:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
        w = csv.writer(fh)
        w.writerow(["re", "im", "swallowed"])
        for z, m in zip(grid, mask):
            w.writerow([repr(float(z.real)), repr(float(z.imag)), int(m)])


def swallow_times(drivers: DrivingPaths, t: float, points) -> np.ndarray:
    pts = np.asarray(points, dtype=complex)
    _, tau, _ = flow_points(drivers.values, drivers.times, pts.ravel()[None, :], t)
    return tau[0].reshape(pts.shape)


# ---------------------------------------------------------------------------
# reverse flow and traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trace:
    index: int  # 1-based curve index
    times: np.ndarray
    points: np.ndarray
    eps: np.ndarray

    def __post_init__(self):
        for name in ("times", "points", "eps"):
            a = np.array(getattr(self, name))
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def spacing(self) -> np.ndarray:
        return np.abs(np.diff(self.points))

    def to_csv(self, path, header: dict | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
            w = csv.writer(fh)
            w.writerow(["t", "re", "im", "eps"])
            for t, p, e in zip(self.times, self.points, self.eps):
                w.writerow([repr(float(t)), repr(float(p.real)), repr(float(p.imag)), repr(float(e))])

    @classmethod
    def from_csv(cls, path, index: int = 1) -> "Trace":
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
        if not rows or rows[0] != ["t", "re", "im", "eps"]:
            raise ValueError(f"{path}: expected header t,re,im,eps")
        arr = np.array(rows[1:], dtype=float).reshape(-1, 4)
        return cls(index, arr[:, 0], arr[:, 1] + 1j * arr[:, 2], arr[:, 3])


def _reverse_sweep(v, times, starts, start_k, guard: float):
    """Evolve points backwards in absolute time with ``dz = -sum 2/(z - X) dt``.

    ``starts`` (P, M) are injected at grid index ``start_k`` (M,) and carried
    down to time 0. Returns the final points (P, M).
    """
    P, N, T = v.shape
    M = starts.shape[1]
    dt = float(times[1] - times[0])
    z = starts.astype(complex).copy()
    flow = _Flow(-1.0, dt)
    order = np.argsort(-start_k, kind="stable")
    active = np.zeros(M, dtype=bool)
    ptr = 0
    for k in range(int(start_k.max()), 0, -1):
        while ptr < M and start_k[order[ptr]] >= k:
            active[order[ptr]] = True
            ptr += 1
        cols = np.nonzero(active)[0]
        if len(cols) == 0:
            continue
        # interval [t_{k-1}, t_k] traversed backwards: interpolate from X_k to X_{k-1}
        zn, _ = flow.step(z[:, cols], None, v[:, :, k], v[:, :, k - 1], 0.0, 1.0)
        z[:, cols] = zn
        bad = ~np.isfinite(zn) | (np.abs(zn) > guard)
        if np.any(bad):
            raise ReverseBlowup(f"reverse flow left the guard box near t={times[k]:.6g}")
    return z


def _tip_starts(v, ks, i, eps):
    return v[:, i - 1, ks] + 1j * eps


def trace_tips(values, times, i: int, ks, eps: float, guard: float | None = None,
               richardson: bool = False):
    """Tips ``g_{t_k}^{-1}(X_i(t_k) + i eps)`` for grid indices ``ks``; shape (P, len(ks))."""
    v = _as_batch(values)
    times = np.asarray(times, dtype=float)
    ks = np.atleast_1d(np.asarray(ks, dtype=np.int64))
    if eps <= 0:
        raise ValueError("eps must be positive")
    if guard is None:
        span = float(np.max(np.abs(v))) + 1.0
        guard = 1e3 * (span + np.sqrt(times[-1]) + eps)
    out = _reverse_sweep(v, times, _tip_starts(v, ks, i, eps), ks, guard)
    if richardson:
        half = _reverse_sweep(v, times, _tip_starts(v, ks, i, 0.5 * eps), ks, guard)
        out = 2.0 * half - out
    return out


def trace_tip(drivers: DrivingPaths, i: int, t: float, eps: float | None = None,
              richardson: bool = False) -> complex:
    """``g_t^{-1}(X_i(t) + i eps)``, a point near the tip of curve ``i`` at time ``t``."""
    if not 1 <= i <= drivers.n:
        raise ValueError("curve index out of range")
    dt = drivers.dt
    k = int(round(t / dt))
    if abs(k * dt - t) > 1e-9 * max(1.0, t) or k > len(drivers.times) - 1:
        raise ValueError("t must be a grid time within the horizon")
    if eps is None:
        eps = default_eps(dt)
    if k == 0:
        return complex(drivers.values[i - 1, 0] + 1j * eps)
    return complex(trace_tips(drivers.values, drivers.times, i, [k], eps,
                              richardson=richardson)[0, 0])


def full_traces_batch(values, times, ks, eps: float, richardson: bool = False):
    """Traces of every curve for every path; returns array (P, N, len(ks)).

    Index ``k = 0`` gives the starting point ``X_i(0)`` itself.
    """
    v = _as_batch(values)
    ks = np.asarray(ks, dtype=np.int64)
    P, N, _ = v.shape
    out = np.empty((P, N, len(ks)), dtype=complex)
    pos = ks > 0
    for i in range(1, N + 1):
        out[:, i - 1, ~pos] = v[:, i - 1, 0][:, None]
        if np.any(pos):
            out[:, i - 1, pos] = trace_tips(v, times, i, ks[pos], eps, richardson=richardson)
    return out


def full_traces(drivers: DrivingPaths, times=None, eps: float | None = None,
                richardson: bool = False) -> list[Trace]:
    """All ``N`` traces of one set of drivers sampled at grid ``times``."""
    dt = drivers.dt
    if times is None:
        ks = np.arange(len(drivers.times))
    else:
        ks = np.rint(np.asarray(times, dtype=float) / dt).astype(np.int64)
        if np.any(np.abs(ks * dt - np.asarray(times)) > 1e-9) or ks.max() >= len(drivers.times):
            raise ValueError("trace times must lie on the driver grid")
    if eps is None:
        eps = default_eps(dt)
    pts = full_traces_batch(drivers.values, drivers.times, ks, eps, richardson)[0]
    ts = drivers.times[ks]
    return [Trace(i + 1, ts, pts[i], np.where(ks > 0, eps, 0.0)) for i in range(drivers.n)]


# ---------------------------------------------------------------------------
# chains and export
# ---------------------------------------------------------------------------

def chain_from_drivers(drivers: DrivingPaths, t: float | None = None) -> MapChain:
    """Slit-splitting approximation of ``g_t``: per grid step one vertical slit
    of capacity ``2 dt`` at each driver's mid-step position."""
    dt = drivers.dt
    k_end = len(drivers.times) - 1 if t is None else int(round(t / dt))
    v = drivers.values[:, : k_end + 1]
    mid = 0.5 * (v[:, 1:] + v[:, :-1])
    anchors = mid.T.reshape(-1)
    return MapChain.slits(anchors, np.full(anchors.shape, dt))


def traces_to_svg(traces: list[Trace], caption: str = "", size: int = 480) -> str:
    from .cli_io import render_polylines

    return render_polylines([np.asarray(t.points) for t in traces], caption=caption, size=size)
