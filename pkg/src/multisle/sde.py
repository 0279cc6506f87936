"""Driving processes: time-changed Dyson Brownian motion, SLE(kappa, rho)
flow-line drivers and reference Bessel processes.

All integrators are Euler-Maruyama on a uniform stored grid. A stored step
is split recursively (Brownian bridge refinement) whenever it would change
a gap by more than half its size (this includes any reordering) or carry a
gap into the zone below ``collision_guard``. Refined sub-steps are not
stored. At the minimum sub-step ``dt * 2**-20`` the drift-implicit Euler
step is used instead; it stays inside the ordered chamber by construction,
so ``GapCollapse`` is only raised if that solve fails.

Randomness is drawn from one Philox stream per ``(seed, path_id)`` so an
ensemble gives the same path ``k`` whether it is simulated alone, in a
batch, or in a worker process.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateInput, GapCollapse, InvalidParams

MAX_DEPTH = 20
SHRINK = 0.5
_CHUNK = 256


@dataclass(frozen=True)
class SdeParams:
    kappa: float
    initial_positions: tuple
    dt: float
    horizon: float
    seed: int = 0
    collision_guard: float | None = None

    def __post_init__(self):
        x = tuple(float(v) for v in np.atleast_1d(self.initial_positions))
        object.__setattr__(self, "initial_positions", x)
        if not (0.0 < self.kappa <= 8.0):
            raise InvalidParams(f"kappa must lie in (0, 8], got {self.kappa}")
        if len(x) == 0:
            raise InvalidParams("need at least one particle")
        if any(b <= a for a, b in zip(x, x[1:])):
            raise InvalidParams("initial_positions must be strictly increasing")
        if not (0.0 < self.dt < self.horizon):
            raise InvalidParams("need 0 < dt < horizon")
        if not (0 <= int(self.seed) < 2**64):
            raise InvalidParams("seed must be an unsigned 64-bit integer")
        if self.collision_guard is None:
            gap = np.mean(np.diff(x)) if len(x) > 1 else 1.0
            object.__setattr__(self, "collision_guard", 1e-4 * float(gap))
        elif self.collision_guard <= 0:
            raise InvalidParams("collision_guard must be positive")

    @property
    def n_particles(self) -> int:
        return len(self.initial_positions)

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def to_dict(self) -> dict:
        return {
            "kappa": self.kappa,
            "n_particles": self.n_particles,
            "initial_positions": list(self.initial_positions),
            "dt": self.dt,
            "horizon": self.horizon,
            "seed": int(self.seed),
            "collision_guard": self.collision_guard,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SdeParams":
        d = dict(d)
        n = d.pop("n_particles", None)
        if n is not None and n != len(d["initial_positions"]):
            raise InvalidParams("n_particles does not match initial_positions")
        return cls(**d)


@dataclass(frozen=True)
class DrivingPaths:
    """One realisation of N driving functions on the stored grid.

    ``values`` has shape ``(N, len(times))``.
    """

    times: np.ndarray
    values: np.ndarray
    params: SdeParams
    kind: str = "dyson"
    path_id: int = 0

    def __post_init__(self):
        self.times.setflags(write=False)
        self.values.setflags(write=False)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def at(self, t: float) -> np.ndarray:
        """Driver positions at time ``t`` (linear interpolation)."""
        return interpolate(self.times, self.values, t)

    def truncate(self, t: float) -> "DrivingPaths":
        k = int(round(t / self.dt))
        return DrivingPaths(self.times[: k + 1].copy(), self.values[:, : k + 1].copy(),
                            self.params, self.kind, self.path_id)

    def to_csv(self, path, header: dict | None = None) -> None:
        """Columns ``t, x1..xN``; an optional ``# key=value`` comment line first."""
        with open(path, "w", newline="") as fh:
            if header:
                fh.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
            fh.write(",".join(["t"] + [f"x{i + 1}" for i in range(self.n)]) + "\n")
            for j, t in enumerate(self.times):
                fh.write(",".join([repr(float(t))] + [repr(float(v)) for v in self.values[:, j]]) + "\n")

    @classmethod
    def from_csv(cls, path, kappa: float = 8.0) -> "DrivingPaths":
        with open(path) as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        cols = lines[0].strip().split(",") if lines else []
        if not cols or cols[0] != "t" or cols[1:] != [f"x{i + 1}" for i in range(len(cols) - 1)]:
            raise ValueError(f"{path}: expected header t,x1..xN")
        arr = np.loadtxt(lines[1:], delimiter=",", ndmin=2)
        return drivers_from_array(arr[:, 0], arr[:, 1:].T, kappa=kappa, kind="csv")

    def save(self, path) -> None:
        """Columnar binary record (``.npz``) carrying the grid, values and parameters."""
        np.savez(path, times=self.times, values=self.values, kind=self.kind,
                 path_id=self.path_id, params=json.dumps(self.params.to_dict()))

    @classmethod
    def load(cls, path) -> "DrivingPaths":
        with np.load(path) as f:
            params = SdeParams.from_dict(json.loads(str(f["params"])))
            return cls(f["times"].copy(), f["values"].copy(), params, str(f["kind"]), int(f["path_id"]))


def constant_drivers(positions: Sequence[float], dt: float, horizon: float) -> DrivingPaths:
    """Drivers frozen at ``positions``; used for closed-form checks."""
    params = SdeParams(kappa=8.0, initial_positions=tuple(positions), dt=dt, horizon=horizon)
    times = params.times
    values = np.repeat(np.asarray(params.initial_positions)[:, None], len(times), axis=1)
    return DrivingPaths(times, values, params, kind="constant")


def drivers_from_array(times, values, kappa=8.0, kind="custom") -> DrivingPaths:
    times = np.asarray(times, dtype=float)
    values = np.atleast_2d(np.asarray(values, dtype=float))
    params = SdeParams(kappa=kappa, initial_positions=tuple(np.sort(values[:, 0])),
                       dt=float(times[1] - times[0]), horizon=float(times[-1]))
    return DrivingPaths(times.copy(), values.copy(), params, kind=kind)


def mirror_drivers(paths: DrivingPaths) -> DrivingPaths:
    """x -> -x with the particle order reversed."""
    p = paths.params
    mp = SdeParams(p.kappa, tuple(-np.asarray(p.initial_positions)[::-1]), p.dt, p.horizon,
                   p.seed, p.collision_guard)
    return DrivingPaths(paths.times.copy(), -paths.values[::-1].copy(), mp, paths.kind, paths.path_id)


def interpolate(times: np.ndarray, values: np.ndarray, t: float) -> np.ndarray:
    dt = times[1] - times[0]
    u = t / dt
    k = int(np.floor(u))
    if k >= len(times) - 1:
        return values[..., -1].copy()
    if k < 0:
        return values[..., 0].copy()
    w = u - k
    return (1.0 - w) * values[..., k] + w * values[..., k + 1]


# ---------------------------------------------------------------------------
# drifts
# ---------------------------------------------------------------------------

def _pairwise_inverse(x: np.ndarray) -> np.ndarray:
    """Row-wise matrix 1/(x_i - x_j) with zero diagonal; x has shape (m, N)."""
    diff = x[:, :, None] - x[:, None, :]
    n = x.shape[1]
    idx = np.arange(n)
    diff[:, idx, idx] = np.inf
    return 1.0 / diff


def dyson_drift(x: np.ndarray) -> np.ndarray:
    """Interaction drift sum_{j != i} 4 / (x_i - x_j), row-wise."""
    return 4.0 * _pairwise_inverse(np.asarray(x, dtype=float)).sum(axis=2)


def drift_vector(positions, kappa: float = 4.0) -> tuple[np.ndarray, np.ndarray]:
    """Dyson drift in direct and partition-function form.

    Returns ``(direct, via_partition_function)`` where ``direct`` is
    ``sum_{j != i} 4 / (x_i - x_j)`` and the second form is
    ``kappa * d/dx_i log Z + sum_{j != i} 2 / (x_i - x_j)`` with
    ``Z = prod_{i<j} |x_i - x_j|^(2/kappa)``.
    """
    x = np.asarray(positions, dtype=float)
    if np.any(np.diff(np.sort(x)) == 0):
        raise DegenerateInput("positions must be distinct")
    n = len(x)
    direct = np.zeros(n)
    bare = np.zeros(n)
    for i in range(n):
        for j in range(n):
            if j != i:
                direct[i] += 4.0 / (x[i] - x[j])
                bare[i] += 2.0 / (x[i] - x[j])
    grad_log_z = np.zeros(n)
    for a in range(n):
        for b in range(a + 1, n):
            w = (2.0 / kappa) / (x[a] - x[b])
            grad_log_z[a] += w
            grad_log_z[b] -= w
    return direct, kappa * grad_log_z + bare


def partition_log_z(x, kappa: float) -> float:
    x = np.asarray(x, dtype=float)
    i, j = np.triu_indices(len(x), 1)
    return (2.0 / kappa) * float(np.sum(np.log(np.abs(x[i] - x[j]))))


class PairDrift:
    """Drift ``D_i(x) = sum_j C_ij / (x_i - x_j)`` for a symmetric matrix ``C``.

    Every such drift is minus the gradient of the convex energy
    ``-sum_{i<j} C_ij log|x_i - x_j|`` on the ordered chamber, which is what
    makes the drift-implicit step below well posed.
    """

    def __init__(self, coupling: np.ndarray):
        self.c = np.asarray(coupling, dtype=float)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (self.c[None] * _pairwise_inverse(x)).sum(axis=2)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        inv2 = _pairwise_inverse(x) ** 2
        off = self.c[None] * inv2
        jac = off.copy()
        n = x.shape[1]
        idx = np.arange(n)
        jac[:, idx, idx] = -off.sum(axis=2)
        return jac

    def energy(self, x: np.ndarray) -> np.ndarray:
        i, j = np.triu_indices(x.shape[1], 1)
        return -(self.c[i, j][None] * np.log(x[:, j] - x[:, i])).sum(axis=1)

    def implicit_step(self, x, a, h, tol=1e-13, max_iter=200):
        """Solve ``y = a + h D(y)`` inside the ordered chamber by damped Newton.

        ``x`` is an ordered starting guess; returns ``(y, converged)``.
        """
        y = x.copy()
        n = x.shape[1]
        eye = np.eye(n)[None]
        done = np.zeros(len(x), dtype=bool)

        def phi(v):
            return 0.5 * np.sum((v - a) ** 2, axis=1) / h + self.energy(v)

        scale = 1.0 + np.max(np.abs(a), axis=1)
        for _ in range(max_iter):
            f = y - a - h * self(y)
            done = np.max(np.abs(f), axis=1) <= tol * scale
            if done.all():
                break
            jac = eye - h * self.jacobian(y)
            delta = np.linalg.solve(jac, f[..., None])[..., 0]
            delta[done] = 0.0
            lam = np.ones(len(x))
            p0 = phi(y)
            for _ in range(60):
                cand = y - lam[:, None] * delta
                ordered = np.all(np.diff(cand, axis=1) > 0, axis=1)
                with np.errstate(invalid="ignore"):
                    better = ordered & (phi(np.where(ordered[:, None], cand, y)) <= p0 + 1e-15 * np.abs(p0))
                if better.all():
                    break
                lam = np.where(better, lam, 0.5 * lam)
            y = y - lam[:, None] * delta
        return y, done


def dyson_coupling(n: int) -> np.ndarray:
    c = np.full((n, n), 4.0)
    np.fill_diagonal(c, 0.0)
    return c


def flowline_coupling(n: int, slot: int) -> np.ndarray:
    """Pair couplings of the SLE(kappa; 2, ..., 2) system.

    State rows hold the force points and the driving point in increasing order,
    the driving point sitting at column ``slot``.
    """
    c = np.zeros((n, n))
    c[slot, :] = 2.0
    c[:, slot] = 2.0
    c[slot, slot] = 0.0
    return c


def flowline_drift(slot: int, n: int) -> PairDrift:
    return PairDrift(flowline_coupling(n, slot))


class BesselDrift:
    def __init__(self, dim: float):
        self.c = 0.5 * (dim - 1.0)

    def __call__(self, r):
        return self.c / r

    def implicit_step(self, x, a, h):
        # y = a + h c / y has exactly one positive root when c > 0
        y = 0.5 * (a + np.sqrt(a * a + 4.0 * h * self.c))
        return y, np.ones(len(x), dtype=bool)


def bessel_drift(dim: float) -> BesselDrift:
    return BesselDrift(dim)


def _consecutive_gaps(x: np.ndarray) -> np.ndarray:
    return np.diff(x, axis=1)


def _positive_gap(x: np.ndarray) -> np.ndarray:
    return x


# ---------------------------------------------------------------------------
# generic guarded Euler-Maruyama
# ---------------------------------------------------------------------------

def path_generators(seed: int, path_ids: Sequence[int], stream: int = 0):
    """Main and refinement generators for each path id.

    ``stream`` > 0 selects an independent family of generators for the same
    path ids (used when several noise sources drive one ensemble member).
    """
    main, refine = [], []
    for pid in path_ids:
        key = (int(pid),) if stream == 0 else (int(pid), int(stream))
        ss = np.random.SeedSequence(int(seed), spawn_key=key)
        a, b = ss.spawn(2)
        main.append(np.random.Generator(np.random.Philox(a)))
        refine.append(np.random.Generator(np.random.Philox(b)))
    return main, refine


@dataclass
class _Integration:
    values: np.ndarray
    accepted: np.ndarray
    collapse_time: np.ndarray
    refinements: np.ndarray
    hit_floor: np.ndarray
    implicit: np.ndarray


class _GuardedEM:
    def __init__(self, drift, sigma, gaps, guard, floor, max_depth=MAX_DEPTH,
                 reflect=False, mirror=False):
        self.drift = drift
        self.sigma = np.asarray(sigma, dtype=float)
        self.noisy = self.sigma != 0.0
        self.gaps = gaps
        self.guard = guard
        self.floor = floor
        self.max_depth = max_depth
        self.reflect = reflect
        self.mirror = mirror

    def _bridge_normals(self, gens, rows, d):
        z = np.stack([gens[r].standard_normal(d) for r in rows])
        return z[:, ::-1] * -1.0 if self.mirror else z

    def step(self, x, dw, h, rows, depth, gens, stats):
        """Advance ``x`` (m, d) by ``h`` given Brownian increments ``dw``.

        Returns the new state and a boolean vector of rows that failed.
        """
        y = x + self.drift(x) * h + self.sigma * dw
        g_old = self.gaps(x)
        g_new = self.gaps(y)
        if g_new.shape[1] == 0:
            return y, np.zeros(len(x), dtype=bool)
        entering = (g_new < self.guard) & (g_old >= self.guard)
        bad = np.any(entering | (np.abs(g_new - g_old) > SHRINK * g_old), axis=1)
        failed = np.zeros(len(x), dtype=bool)
        if not bad.any():
            return y, failed
        if depth >= self.max_depth:
            # minimum sub-step: fall back to the drift-implicit step for the
            # offending rows, which cannot reorder the particles
            b = np.flatnonzero(bad)
            stats["implicit"][rows[b]] += 1
            a = x[b] + self.sigma * dw[b]
            yb, conv = self.drift.implicit_step(x[b], a, h)
            gb = self.gaps(yb)
            ok = conv & np.all(gb > self.floor, axis=1)
            if self.reflect:
                low = ~ok
                if low.any():
                    yb[low] = np.maximum(np.abs(a[low]), self.floor)
                    stats["hit_floor"][rows[b][low]] = True
                y[b] = yb
                return y, failed
            y[b] = yb
            stats["hit_floor"][rows[b][~ok]] = True
            failed[b[~ok]] = True
            return y, failed
        b = np.flatnonzero(bad)
        stats["refinements"][rows[b]] += 1
        d = x.shape[1]
        z = np.zeros((len(b), d))
        nd = int(self.noisy.sum())
        if nd:
            zz = self._bridge_normals(gens, rows[b], nd)
            z[:, self.noisy] = zz
        dw1 = 0.5 * dw[b] + np.sqrt(h / 4.0) * z
        dw2 = dw[b] - dw1
        x1, f1 = self.step(x[b], dw1, h / 2, rows[b], depth + 1, gens, stats)
        keep = ~f1
        x2 = x1.copy()
        f2 = f1.copy()
        if keep.any():
            k = np.flatnonzero(keep)
            x2k, f2k = self.step(x1[k], dw2[k], h / 2, rows[b][k], depth + 1, gens, stats)
            x2[k] = x2k
            f2[k] = f2k
        y[b] = x2
        failed[b] = f2
        return y, failed

    def run(self, x0, dt, n_steps, main, refine) -> _Integration:
        m, d = x0.shape
        out = np.empty((m, d, n_steps + 1))
        out[:, :, 0] = x0
        x = x0.copy()
        alive = np.ones(m, dtype=bool)
        ctime = np.full(m, np.nan)
        stats = {"refinements": np.zeros(m, dtype=np.int64), "hit_floor": np.zeros(m, dtype=bool),
                 "implicit": np.zeros(m, dtype=np.int64)}
        nd = int(self.noisy.sum())
        sq = np.sqrt(dt)
        rows_all = np.arange(m)
        k = 0
        while k < n_steps:
            c = min(_CHUNK, n_steps - k)
            if nd:
                zc = np.stack([g.standard_normal((c, nd)) for g in main])  # (m, c, nd)
                if self.mirror:
                    zc = -zc[:, :, ::-1]
            for j in range(c):
                dw = np.zeros((m, d))
                if nd:
                    dw[:, self.noisy] = zc[:, j, :] * sq
                rows = rows_all[alive]
                y, failed = self.step(x[alive], dw[alive], dt, rows, 0, refine, stats)
                x[alive] = y
                if failed.any():
                    dead = rows[failed]
                    alive[dead] = False
                    ctime[dead] = (k + j + 1) * dt
                out[:, :, k + j + 1] = x
            k += c
        for r in np.flatnonzero(~alive):
            out[r, :, int(round(ctime[r] / dt)):] = np.nan
        return _Integration(out, alive, ctime, stats["refinements"], stats["hit_floor"],
                            stats["implicit"])


def _floor_for(x0: np.ndarray) -> float:
    scale = max(1.0, float(np.max(np.abs(x0))))
    return 64.0 * np.finfo(float).eps * scale


# ---------------------------------------------------------------------------
# Dyson
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DysonEnsemble:
    times: np.ndarray
    values: np.ndarray  # (P, N, T)
    accepted: np.ndarray
    path_ids: np.ndarray
    params: SdeParams
    collapse_time: np.ndarray
    refinements: np.ndarray
    kind: str = "dyson"

    @property
    def rejection_rate(self) -> float:
        return float(1.0 - self.accepted.mean())

    def path(self, k: int) -> DrivingPaths:
        if not self.accepted[k]:
            raise GapCollapse("path was rejected", path_id=int(self.path_ids[k]),
                              time=float(self.collapse_time[k]))
        return DrivingPaths(self.times.copy(), self.values[k].copy(), self.params, self.kind,
                            int(self.path_ids[k]))

    def accepted_paths(self):
        return [self.path(k) for k in np.flatnonzero(self.accepted)]

    def manifest(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "kind": self.kind,
            "path_ids": [int(p) for p in self.path_ids],
            "n_paths": int(len(self.path_ids)),
            "rejected": int((~self.accepted).sum()),
            "rejected_ids": [int(p) for p in self.path_ids[~self.accepted]],
            "refinements": int(self.refinements.sum()),
        }


def _path_ids(n_paths, first_path_id, path_ids):
    if path_ids is None:
        return np.arange(first_path_id, first_path_id + n_paths, dtype=np.int64)
    return np.asarray(path_ids, dtype=np.int64)


def simulate_dyson_ensemble(params: SdeParams, n_paths: int = 1, first_path_id: int = 0,
                            path_ids=None, mirror: bool = False) -> DysonEnsemble:
    """Simulate ``n_paths`` independent copies of the time-changed Dyson system.

    ``mirror=True`` negates every Brownian increment and reverses the particle
    order; combined with mirrored initial positions it produces the exact mirror
    image of the unmirrored path with the same seed.
    """
    ids = _path_ids(n_paths, first_path_id, path_ids)
    main, refine = path_generators(params.seed, ids)
    n = params.n_particles
    x0 = np.tile(np.asarray(params.initial_positions), (len(ids), 1))
    em = _GuardedEM(PairDrift(dyson_coupling(n)), np.full(n, np.sqrt(params.kappa)), _consecutive_gaps,
                    params.collision_guard, _floor_for(x0), mirror=mirror)
    res = em.run(x0, params.dt, params.n_steps, main, refine)
    return DysonEnsemble(params.times, res.values, res.accepted, ids, params,
                         res.collapse_time, res.refinements)


def simulate_dyson(params: SdeParams, path_id: int = 0, mirror: bool = False) -> DrivingPaths:
    """Single Dyson path; raises ``GapCollapse`` if the path is rejected."""
    ens = simulate_dyson_ensemble(params, path_ids=[path_id], mirror=mirror)
    return ens.path(0)


# ---------------------------------------------------------------------------
# SLE(kappa, rho) flow-line drivers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowLineDriving:
    index: int  # 1-based
    xi: np.ndarray
    zeta: np.ndarray  # (N-1, T), in increasing order of the original positions
    times: np.ndarray
    params: SdeParams
    path_id: int = 0

    def as_drivers(self) -> DrivingPaths:
        """The single Loewner driver xi as a one-curve DrivingPaths."""
        p = self.params
        sp = SdeParams(p.kappa, (p.initial_positions[self.index - 1],), p.dt, p.horizon, p.seed)
        return DrivingPaths(self.times.copy(), self.xi[None, :].copy(), sp,
                            kind=f"flowline({self.index})", path_id=self.path_id)


@dataclass(frozen=True)
class FlowLineEnsemble:
    index: int
    times: np.ndarray
    values: np.ndarray  # (P, N, T): force points with xi at column index-1
    accepted: np.ndarray
    path_ids: np.ndarray
    params: SdeParams
    collapse_time: np.ndarray

    def path(self, k: int) -> FlowLineDriving:
        if not self.accepted[k]:
            raise GapCollapse("path was rejected", path_id=int(self.path_ids[k]),
                              time=float(self.collapse_time[k]))
        v = self.values[k]
        slot = self.index - 1
        zeta = np.delete(v, slot, axis=0)
        return FlowLineDriving(self.index, v[slot].copy(), zeta, self.times.copy(), self.params,
                               int(self.path_ids[k]))

    @property
    def xi(self) -> np.ndarray:
        return self.values[:, self.index - 1, :]


def simulate_flowline_ensemble(i: int, params: SdeParams, n_paths: int = 1,
                               first_path_id: int = 0, path_ids=None,
                               mirror: bool = False) -> FlowLineEnsemble:
    n = params.n_particles
    if not 1 <= i <= n:
        raise InvalidParams(f"index {i} outside 1..{n}")
    ids = _path_ids(n_paths, first_path_id, path_ids)
    main, refine = path_generators(params.seed, ids)
    slot = i - 1
    sigma = np.zeros(n)
    sigma[slot] = np.sqrt(params.kappa)
    x0 = np.tile(np.asarray(params.initial_positions), (len(ids), 1))
    em = _GuardedEM(flowline_drift(slot, n), sigma, _consecutive_gaps, params.collision_guard,
                    _floor_for(x0), mirror=mirror)
    res = em.run(x0, params.dt, params.n_steps, main, refine)
    return FlowLineEnsemble(i, params.times, res.values, res.accepted, ids, params,
                            res.collapse_time)


def flowline_batch(i: int, kappa: float, x0, dt: float, n_steps: int, seed: int,
                   path_ids, stream: int = 0, mirror: bool = False):
    """Flow-line drivers with a separate starting configuration per member.

    ``x0`` is (P, N) and increasing along rows. Returns values (P, N, T) and
    the acceptance mask.
    """
    x0 = np.asarray(x0, dtype=float)
    m, n = x0.shape
    if not 1 <= i <= n:
        raise InvalidParams(f"index {i} outside 1..{n}")
    if n > 1 and np.any(np.diff(x0, axis=1) <= 0):
        raise InvalidParams("starting points must be strictly increasing")
    main, refine = path_generators(seed, path_ids, stream)
    slot = i - 1
    sigma = np.zeros(n)
    sigma[slot] = np.sqrt(kappa)
    guard = 1e-4 * float(np.min(np.diff(x0, axis=1).mean(axis=1))) if n > 1 else 1.0
    em = _GuardedEM(flowline_drift(slot, n), sigma, _consecutive_gaps, guard, _floor_for(x0),
                    mirror=mirror)
    res = em.run(x0, dt, n_steps, main, refine)
    return res.values, res.accepted


def simulate_flowline_driver(i: int, params: SdeParams, path_id: int = 0,
                             mirror: bool = False) -> FlowLineDriving:
    """Driver ``xi`` and force points ``zeta`` of the i-th flow line (1-based)."""
    return simulate_flowline_ensemble(i, params, path_ids=[path_id], mirror=mirror).path(0)


# ---------------------------------------------------------------------------
# Bessel
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BesselPath:
    dim: float
    trajectory: np.ndarray
    times: np.ndarray
    seed: int
    hit_zero: bool = False


@dataclass(frozen=True)
class BesselEnsemble:
    dim: float
    times: np.ndarray
    values: np.ndarray  # (P, T)
    hit_zero: np.ndarray
    seed: int
    refinements: np.ndarray = field(default=None)

    def marginal(self, t: float) -> np.ndarray:
        k = int(round(t / (self.times[1] - self.times[0])))
        return self.values[:, k]


def simulate_bessel_ensemble(dim: float, start: float, dt: float, horizon: float, seed: int,
                             n_paths: int = 1, first_path_id: int = 0, path_ids=None
                             ) -> BesselEnsemble:
    """dR = dW + (dim - 1)/(2R) dt with positivity-preserving refinement.

    For ``dim < 2`` a path that reaches the floor is reflected and flagged in
    ``hit_zero``; for ``dim >= 2`` the flag should stay false.
    """
    if dim < 1:
        raise InvalidParams("dim must be >= 1")
    if start <= 0:
        raise InvalidParams("start must be positive")
    if not 0 < dt < horizon:
        raise InvalidParams("need 0 < dt < horizon")
    ids = _path_ids(n_paths, first_path_id, path_ids)
    main, refine = path_generators(seed, ids)
    x0 = np.full((len(ids), 1), float(start))
    n_steps = int(round(horizon / dt))
    em = _GuardedEM(bessel_drift(dim), np.ones(1), _positive_gap, 1e-4 * start,
                    _floor_for(x0), reflect=True)
    res = em.run(x0, dt, n_steps, main, refine)
    times = np.arange(n_steps + 1) * dt
    return BesselEnsemble(dim, times, res.values[:, 0, :], res.hit_floor, int(seed), res.refinements)


def simulate_bessel(dim: float, start: float, dt: float, horizon: float, seed: int,
                    path_id: int = 0) -> BesselPath:
    ens = simulate_bessel_ensemble(dim, start, dt, horizon, seed, path_ids=[path_id])
    return BesselPath(dim, ens.values[0], ens.times, seed, bool(ens.hit_zero[0]))


def bessel_marginal_cdf(dim: float, start: float, t: float):
    """Exact CDF of a Bessel(dim) process at time t (noncentral chi)."""
    from scipy import stats

    nc = start**2 / t
    return lambda r: stats.ncx2.cdf(np.asarray(r) ** 2 / t, df=dim, nc=nc)


def residue_identity(z: complex, x) -> tuple[complex, complex]:
    """Both sides of the partial-fraction identity used for the drift:

    1/2 sum_i 1/(z-x_i) sum_{j!=i} 1/(z-x_j)  ==  sum_i 1/(z-x_i) sum_{j!=i} 1/(x_i-x_j)

    The right side cancels terms of size 1/min gap, so both sides are
    accumulated in extended precision.
    """
    x = np.asarray(x, dtype=np.longdouble)
    n = len(x)
    z = np.clongdouble(z)
    w = 1 / (z - x)
    off = ~np.eye(n, dtype=bool)
    diff = np.where(off, x[:, None] - x[None, :], 1)
    a = np.where(off, w[None, :], 0).sum(axis=1)
    b = np.where(off, 1 / diff, 0).sum(axis=1)
    lhs = (a * w).sum() / 2
    rhs = (b * w).sum()
    return complex(lhs), complex(rhs)
