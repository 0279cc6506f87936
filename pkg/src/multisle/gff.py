"""Discrete zero-boundary GFF, harmonic offsets and the evolved field.

The free field lives on a rectangle [-L, L] x [0, H] with mesh ``a`` and zero
values on all four walls. Its covariance is ``GREEN_SCALE`` times the inverse
of the (unscaled) five-point Dirichlet Laplacian, which makes it match
G(z, w) = log|z - conj(w)| / |z - w| in the bulk. The Laplacian is
diagonalised by the type-I sine transform, so samples are exact.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import fft

from .conformal import MapChain, apply, derivative
from .errors import InvalidParams, MeshTooLarge, OnBoundary
from .loewner import flow_points
from .sde import DrivingPaths, SdeParams, simulate_dyson_ensemble

GREEN_SCALE = 2.0 * np.pi
MEMORY_BUDGET = 1 << 30  # bytes per sampling call


def green(z, w):
    """Green's function of the upper half-plane, log|z - conj(w)| / |z - w|."""
    z = np.asarray(z, dtype=complex)
    w = np.asarray(w, dtype=complex)
    return np.log(np.abs(z - np.conj(w)) / np.abs(z - w))


@dataclass(frozen=True)
class GridDomain:
    L: float
    H: float
    a: float

    def __post_init__(self):
        if min(self.L, self.H, self.a) <= 0:
            raise InvalidParams("L, H and a must be positive")
        for name, v in (("2L", 2 * self.L), ("H", self.H)):
            n = v / self.a
            if abs(n - round(n)) > 1e-9 * n or round(n) < 2:
                raise InvalidParams(f"{name} must be an integer multiple (>= 2) of the mesh size")

    @property
    def nx(self) -> int:
        """Number of cells across; interior columns are 1..nx-1."""
        return int(round(2 * self.L / self.a))

    @property
    def ny(self) -> int:
        return int(round(self.H / self.a))

    @property
    def shape(self) -> tuple[int, int]:
        return self.nx - 1, self.ny - 1

    @property
    def n_interior(self) -> int:
        return (self.nx - 1) * (self.ny - 1)

    def node(self, i, j):
        """Complex coordinate of grid node (i, j), 0 <= i <= nx, 0 <= j <= ny."""
        return -self.L + self.a * np.asarray(i) + 1j * self.a * np.asarray(j)

    def interior_nodes(self) -> np.ndarray:
        """(nx-1, ny-1) complex coordinates of interior nodes."""
        i = np.arange(1, self.nx)[:, None]
        j = np.arange(1, self.ny)[None, :]
        return self.node(i, j)

    def index_of(self, z) -> tuple[int, int]:
        """Interior array index (i-1, j-1) of the node nearest to ``z``."""
        i = int(round((complex(z).real + self.L) / self.a))
        j = int(round(complex(z).imag / self.a))
        if not (1 <= i <= self.nx - 1 and 1 <= j <= self.ny - 1):
            raise InvalidParams(f"{z} is not near an interior node")
        return i - 1, j - 1

    def contains(self, x: float) -> bool:
        return -self.L < x < self.L

    def eigenvalues(self) -> np.ndarray:
        k = np.arange(1, self.nx)[:, None]
        l = np.arange(1, self.ny)[None, :]
        return 4.0 - 2.0 * np.cos(np.pi * k / self.nx) - 2.0 * np.cos(np.pi * l / self.ny)

    def doubled(self) -> "GridDomain":
        return GridDomain(2 * self.L, 2 * self.H, self.a)


def covariance_entries(domain: GridDomain, p, q) -> np.ndarray:
    """Exact field covariance between interior indices ``p`` and ``q`` (lists of (i, j))."""
    lam = domain.eigenvalues()
    nx, ny = domain.nx, domain.ny
    k = np.arange(1, nx)
    l = np.arange(1, ny)

    def modes(ij):
        i, j = ij
        return (np.sqrt(2.0 / nx) * np.sin(np.pi * k * (i + 1) / nx))[:, None] * \
               (np.sqrt(2.0 / ny) * np.sin(np.pi * l * (j + 1) / ny))[None, :]

    return np.array([GREEN_SCALE * np.sum(modes(a) * modes(b) / lam) for a, b in zip(p, q)])


@dataclass
class GFFSample:
    values: np.ndarray  # (n, nx-1, ny-1) interior values
    domain: GridDomain
    seed: int
    calibration: float = GREEN_SCALE

    def full(self, k: int = 0) -> np.ndarray:
        """Values on all (nx+1, ny+1) nodes with the zero walls included."""
        out = np.zeros((self.domain.nx + 1, self.domain.ny + 1))
        out[1:-1, 1:-1] = self.values[k]
        return out

    def at(self, z, k: int = 0) -> float:
        i, j = self.domain.index_of(z)
        return float(self.values[k, i, j])

    def to_csv(self, path, k: int = 0) -> None:
        """Grid dump: one row per node with x, y, value."""
        f = self.full(k)
        d = self.domain
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            fh.write(f"# {json.dumps({'L': d.L, 'H': d.H, 'a': d.a, 'seed': self.seed})}\n")
            w.writerow(["x", "y", "value"])
            for i in range(d.nx + 1):
                for j in range(d.ny + 1):
                    w.writerow([repr(-d.L + d.a * i), repr(d.a * j), repr(float(f[i, j]))])


def sample_gff(domain: GridDomain, seed: int = 0, n_samples: int = 1,
               budget: int = MEMORY_BUDGET) -> GFFSample:
    """Exact samples of the calibrated zero-boundary discrete GFF."""
    need = 3 * 8 * n_samples * domain.n_interior
    if need > budget:
        raise MeshTooLarge(f"{n_samples} samples on {domain.shape} need {need} bytes "
                           f"(budget {budget}); use a coarser mesh or fewer samples")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    xi = rng.standard_normal((n_samples,) + domain.shape)
    scaled = xi * np.sqrt(GREEN_SCALE / domain.eigenvalues())
    values = fft.dstn(scaled, type=1, norm="ortho", axes=(1, 2))
    return GFFSample(values, domain, int(seed))


def calibrate(domain: GridDomain, pairs) -> np.ndarray:
    """Ratio of the continuum Green's function to the unscaled Laplacian inverse at
    node pairs (complex coordinates); it approaches the stored 2 pi in the bulk."""
    p = [domain.index_of(z) for z, _ in pairs]
    q = [domain.index_of(w) for _, w in pairs]
    raw = covariance_entries(domain, p, q) / GREEN_SCALE
    g = np.array([green(domain.node(a[0] + 1, a[1] + 1), domain.node(b[0] + 1, b[1] + 1))
                  for a, b in zip(p, q)])
    return g / raw


# ---------------------------------------------------------------------------
# boundary data and the harmonic part of the coupling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundaryData:
    kappa: float
    positions: tuple

    def __post_init__(self):
        if not 0 < self.kappa <= 8:
            raise InvalidParams("kappa must lie in (0, 8]")
        object.__setattr__(self, "positions", tuple(float(x) for x in self.positions))

    @property
    def a(self) -> np.ndarray:
        return np.full(len(self.positions), -2.0 / np.sqrt(self.kappa))

    @property
    def chi(self) -> float:
        return chi(self.kappa)


def chi(kappa: float) -> float:
    return 2.0 / np.sqrt(kappa) - np.sqrt(kappa) / 2.0


def _arg_sum(z: np.ndarray, x: np.ndarray) -> np.ndarray:
    d = z[..., None] - x
    # arg in [0, pi]; the branch cut sits below the real line
    return np.angle(d.real + 1j * np.maximum(d.imag, 0.0)).sum(axis=-1)


def harmonic_offset(bdata: BoundaryData, z):
    """-(2/sqrt(kappa)) * sum_i arg(z - X_i) for ``z`` in the closed upper half-plane."""
    z = np.asarray(z, dtype=complex)
    x = np.asarray(bdata.positions)
    if np.any(z.imag < 0):
        raise InvalidParams("points must lie in the closed upper half-plane")
    if np.any((z.imag == 0)[..., None] & (z.real[..., None] == x)):
        raise OnBoundary("point coincides with a marked boundary point")
    out = -2.0 / np.sqrt(bdata.kappa) * _arg_sum(z, x)
    return float(out) if out.ndim == 0 else out


def evolved_field(drivers: DrivingPaths, t: float, chain: MapChain, bdata: BoundaryData, z):
    """-(2/sqrt(kappa)) sum_i arg(g_t(z) - X_t^i) - chi * arg g_t'(z) with g_t given by ``chain``."""
    w = apply(chain, z)
    dg = derivative(chain, z)
    x = drivers.at(t)
    val = -2.0 / np.sqrt(bdata.kappa) * _arg_sum(np.asarray(w), x) - bdata.chi * np.angle(dg)
    return float(val) if np.ndim(val) == 0 else val


def offset_laplacian(bdata: BoundaryData, domain: GridDomain, margin: float) -> tuple[float, float]:
    """Largest five-point Laplacian of the harmonic offset over interior nodes
    at distance >= ``margin`` from every marked point; returns (max, C) with
    max <= C a^2."""
    nodes = domain.interior_nodes()
    x = np.asarray(bdata.positions)
    f = np.zeros((domain.nx + 1, domain.ny + 1))
    i = np.arange(domain.nx + 1)[:, None]
    j = np.arange(domain.ny + 1)[None, :]
    allnodes = domain.node(i, j)
    safe = np.min(np.abs(allnodes[..., None] - x), axis=-1) > 0
    f[safe] = harmonic_offset(bdata, allnodes[safe])
    lap = (f[2:, 1:-1] + f[:-2, 1:-1] + f[1:-1, 2:] + f[1:-1, :-2] - 4 * f[1:-1, 1:-1]) / domain.a ** 2
    far = np.min(np.abs(nodes[..., None] - x), axis=-1) >= margin
    m = float(np.max(np.abs(lap[far])))
    return m, m / domain.a ** 2


# ---------------------------------------------------------------------------
# Monte Carlo probes of the martingale structure
# ---------------------------------------------------------------------------

@dataclass
class MartingaleReport:
    mean: float
    stderr: float
    n_used: int
    n_excluded: int
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return abs(self.mean) <= 3.0 * self.stderr or (self.stderr == 0 and self.mean == 0)

    @property
    def exclusion_fraction(self) -> float:
        return self.n_excluded / max(1, self.n_used + self.n_excluded)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n_used": self.n_used,
                "n_excluded": self.n_excluded, "exclusion_fraction": self.exclusion_fraction,
                "passed": self.passed, **self.extra}


def _field_increments(kappa, positions, points, t, n_paths, seed, dt):
    """h_t(z) - h_0(z) per path for each point, images g_t(z) and the alive mask."""
    points = np.atleast_1d(np.asarray(points, dtype=complex))
    bd = BoundaryData(kappa, tuple(positions))
    h0 = harmonic_offset(bd, points)
    if t == 0:
        P = n_paths
        return np.zeros((P, len(points))), np.tile(points, (P, 1)), np.ones((P, len(points)), bool)
    params = SdeParams(kappa, tuple(positions), dt, t, seed)
    ens = simulate_dyson_ensemble(params, n_paths=n_paths)
    v = ens.values[ens.accepted]
    g, tau, lg = flow_points(v, params.times, points, t, log_derivative=True)
    x = v[:, :, -1]
    ht = -2.0 / np.sqrt(kappa) * np.angle(g[..., None] - x[:, None, :]).sum(axis=-1) \
        - bd.chi * lg.imag
    alive = np.isnan(tau)
    return ht - h0[None, :], g, alive


def martingale_test(kappa: float, N: int, X, z: complex, t: float, n_paths: int = 10_000,
                    seed: int = 0, dt: float = 1e-3) -> MartingaleReport:
    """Monte Carlo estimate of E[h_t(z)] - h_0(z) under Dyson-driven flows."""
    X = tuple(X)
    if len(X) != N:
        raise InvalidParams("N does not match the number of positions")
    d, _, alive = _field_increments(kappa, X, [z], t, n_paths, seed, dt)
    used = d[alive[:, 0], 0]
    n_ex = n_paths - len(used)
    if t == 0:
        return MartingaleReport(0.0, 0.0, n_paths, 0)
    se = float(used.std(ddof=1) / np.sqrt(len(used)))
    return MartingaleReport(float(used.mean()), se, len(used), n_ex,
                            {"kappa": kappa, "N": N, "z": [z.real, z.imag], "t": t})


def cross_variation_test(kappa: float, N: int, X, z: complex, w: complex, t: float,
                         n_paths: int = 10_000, seed: int = 0, dt: float = 1e-3) -> MartingaleReport:
    """Compare Cov(h_t(z) - h_0(z), h_t(w) - h_0(w)) with E[G(z,w) - G(g_t z, g_t w)].

    The report's ``mean`` is the covariance minus the target, with a standard
    error from the paired per-path differences.
    """
    X = tuple(X)
    if len(X) != N:
        raise InvalidParams("N does not match the number of positions")
    d, g, alive = _field_increments(kappa, X, [z, w], t, n_paths, seed, dt)
    ok = alive.all(axis=1)
    d, g = d[ok], g[ok]
    n_ex = n_paths - len(d)
    if t == 0:
        return MartingaleReport(0.0, 0.0, n_paths, 0, {"covariance": 0.0, "target": 0.0})
    target = green(z, w) - green(g[:, 0], g[:, 1])
    dz = d[:, 0] - d[:, 0].mean()
    dw = d[:, 1] - d[:, 1].mean()
    y = dz * dw - target
    n = len(y)
    cov = float(np.mean(dz * dw) * n / (n - 1))
    tgt = float(target.mean())
    se = float(y.std(ddof=1) / np.sqrt(n))
    return MartingaleReport(cov - tgt, se, n, n_ex,
                            {"covariance": cov, "target": tgt, "green_0": float(green(z, w))})


# ---------------------------------------------------------------------------
# Markov property on a small grid
# ---------------------------------------------------------------------------

def dirichlet_laplacian(domain: GridDomain):
    """Sparse five-point Laplacian on interior nodes (row-major in (i, j))."""
    from scipy import sparse

    nx, ny = domain.shape
    ex = sparse.diags([-np.ones(nx - 1), 2 * np.ones(nx), -np.ones(nx - 1)], [-1, 0, 1])
    ey = sparse.diags([-np.ones(ny - 1), 2 * np.ones(ny), -np.ones(ny - 1)], [-1, 0, 1])
    return (sparse.kron(ex, sparse.identity(ny)) + sparse.kron(sparse.identity(nx), ey)).tocsc()


@dataclass
class MarkovReport:
    max_z_covariance: float  # max |empirical - predicted| / SE over checked residual entries
    max_z_cross: float  # max |cov(residual, boundary)| / SE
    max_z_mean: float  # residual mean / SE
    n_samples: int

    @property
    def passed(self) -> bool:
        return max(self.max_z_covariance, self.max_z_cross, self.max_z_mean) <= 3.0


def markov_check(domain: GridDomain, inner: tuple, n_samples: int = 2000, seed: int = 0,
                 n_entries: int = 6) -> MarkovReport:
    """Condition samples on the ring of nodes around the box ``inner`` = (i0, i1, j0, j1)
    (interior index ranges, inclusive) and compare the residual after subtracting
    the discrete harmonic extension with the zero-boundary field of the box.

    Residual entries are tested with per-entry standard errors.
    """
    from scipy.sparse.linalg import splu

    i0, i1, j0, j1 = inner
    nx, ny = domain.shape
    if not (1 <= i0 <= i1 < nx - 1 and 1 <= j0 <= j1 < ny - 1):
        raise InvalidParams("inner box must leave a ring inside the domain")
    s = sample_gff(domain, seed, n_samples).values.reshape(n_samples, -1)
    lap = dirichlet_laplacian(domain)
    idx = np.arange(nx * ny).reshape(nx, ny)
    U = idx[i0:i1 + 1, j0:j1 + 1].ravel()
    ring = np.setdiff1d(idx[i0 - 1:i1 + 2, j0 - 1:j1 + 2].ravel(), U)
    LU = lap[U][:, U].tocsc()
    LUB = lap[U][:, ring].toarray()
    solve = splu(LU)
    harm = -solve.solve(LUB @ s[:, ring].T).T  # discrete harmonic extension of the ring values
    r = s[:, U] - harm
    rng = np.random.default_rng(seed + 1)
    picks = rng.choice(len(U), size=(n_entries, 2))
    inv = lambda k: solve.solve(np.eye(len(U))[:, k])
    zc = []
    for a, b in picks:
        pred = GREEN_SCALE * inv(b)[a]
        prod = r[:, a] * r[:, b]
        zc.append(abs(prod.mean() - pred) / (prod.std(ddof=1) / np.sqrt(n_samples)))
    zx = []
    for a, c in zip(picks[:, 0], rng.choice(len(ring), n_entries)):
        prod = r[:, a] * s[:, ring[c]]
        zx.append(abs(prod.mean()) / (prod.std(ddof=1) / np.sqrt(n_samples)))
    zm = np.abs(r.mean(axis=0)) / (r.std(axis=0, ddof=1) / np.sqrt(n_samples))
    return MarkovReport(float(max(zc)), float(max(zx)), float(np.max(zm[picks[:, 0]])), n_samples)
