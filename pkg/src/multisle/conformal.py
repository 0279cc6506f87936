"""Elementary slit maps, compositions of them, zipper map-out of curves, and
an independent random-walk estimate of half-plane capacity.

Every elementary map removes a circular arc that leaves the real line at a
right angle from an anchor ``u`` and is normalised as ``z + cap/z + ...`` at
infinity. The arc is described by two numbers ``(q, h)``: in coordinates
centred at the anchor the Moebius map ``T(z) = z / (1 - q z)`` straightens it
into the vertical segment ``[0, i h]``. With ``q = 0`` this is the vertical
slit map ``z -> u + sqrt((z - u)^2 + h^2)``.

Square roots are taken as ``zeta * sqrt(1 + h^2 / zeta^2)`` with the principal
branch, which puts the branch cut on the slit and gives the right boundary
values on the real line.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import AtFoot, InsideHull, WalkerLeak

GEOM_TOL = 1e-9


# ---------------------------------------------------------------------------
# elementary maps (vectorised; u, q, h broadcast against z)
# ---------------------------------------------------------------------------

def _unslit(zeta, h):
    with np.errstate(divide="ignore", invalid="ignore"):
        return zeta * np.sqrt(1.0 + (h * h) / (zeta * zeta))


def _forward(zeta, q, h):
    """Pieces of the forward map at ``zeta = z - u``: ``(t, s, qs + r, r, 1 - q zeta)``.

    ``q s + r`` vanishes at infinity; on the far side it is rewritten as
    ``(2 q zeta - 1) / ((1 - q zeta)^2 (q s - r))`` to avoid cancellation.
    """
    d = 1.0 - q * zeta
    with np.errstate(divide="ignore", invalid="ignore"):
        t = zeta / d
    s = _unslit(t, h)
    s = np.where(t == 0, h * (1.0 + 0j), s)
    r = np.sqrt(1.0 + (h * q) ** 2)
    qs = q * s
    with np.errstate(divide="ignore", invalid="ignore"):
        far = (2.0 * q * zeta - 1.0) / (d * d * (qs - r))
    den = np.where(qs.real < 0, far, qs + r)
    return t, s, den, r, d


def element_map(z, u, q, h):
    zeta = np.asarray(z, dtype=complex) - u
    t, s, den, r, _ = _forward(zeta, q, h)
    h2q = h * h * q
    with np.errstate(divide="ignore", invalid="ignore"):
        w = u + (2.0 * s + 3.0 * h2q * den) / (2.0 * r * r * den)
    # the real point 1/q is sent to infinity by the Moebius step
        pole = u + (2.0 + 3.0 * h2q * q) / (2.0 * r * r * q) if np.any(q != 0) else u
    return np.where(np.isfinite(t), w, pole + 0j)


def element_inverse(w, u, q, h):
    om = np.asarray(w, dtype=complex) - u
    h2q = h * h * q
    r2 = 1.0 + h2q * q
    r = np.sqrt(r2)
    den = 2.0 * r2 * q * om - 2.0 - 3.0 * h2q * q
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (3.0 * h2q * r - 2.0 * r * r2 * om) / den
        t = s * np.sqrt(1.0 - (h * h) / (s * s))
    t = np.where(t.imag < 0, -t, t)
    t = np.where(s == 0, 1j * h + 0.0 * s, t)
    qt = q * t
    # 1 + q t cancels near the preimage of infinity; use (qs - r)(qs + r) = q^2 t^2 - 1
    with np.errstate(divide="ignore", invalid="ignore"):
        far = (q * s - r) * (-2.0 * r / den) / (qt - 1.0)
    one_qt = np.where(qt.real < 0, far, 1.0 + qt)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = t / one_qt
    return u + np.where(np.isfinite(om), z, -1.0 / np.where(q == 0, np.inf, q) + 0j)


def element_derivative(z, u, q, h):
    zeta = np.asarray(z, dtype=complex) - u
    t, s, den, r, d = _forward(zeta, q, h)
    with np.errstate(divide="ignore", invalid="ignore"):
        return (t / s) / (d * d) / (r * den * den)


def element_cap(q, h):
    """Half-plane capacity of the arc ``(q, h)``."""
    x = (h * q) ** 2
    return h * h * (2.0 + x) / (4.0 * (1.0 + x) ** 2)


def element_tip_image(q, h):
    """Image of the arc tip (relative to the anchor); it lands on the real line."""
    return 1.5 * h * h * q / (1.0 + (h * q) ** 2)


def arc_through(c):
    """``(q, h)`` of the arc from 0 to ``c`` (``Im c > 0``) orthogonal to the real line."""
    c = np.asarray(c, dtype=complex)
    a2 = np.abs(c) ** 2
    return c.real / a2, a2 / c.imag


def slit_map(z, u, delta):
    return element_map(z, u, 0.0, 2.0 * np.sqrt(delta))


def slit_inverse(w, u, delta):
    return element_inverse(w, u, 0.0, 2.0 * np.sqrt(delta))


@dataclass(frozen=True)
class SlitElement:
    """One elementary map. ``cap_increment`` is half the capacity it removes.

    Vertical slits need only ``anchor`` and ``cap_increment``; geodesic arcs
    also carry ``q`` and ``h`` (see module docstring).
    """

    anchor: float
    cap_increment: float
    variant: str = "vertical"
    q: float = 0.0
    h: float | None = None

    def __post_init__(self):
        if self.cap_increment < 0:
            raise ValueError("cap increment must be non-negative")
        if self.variant == "vertical":
            if self.q != 0.0:
                raise ValueError("vertical slits have q = 0")
            object.__setattr__(self, "h", 2.0 * float(np.sqrt(self.cap_increment)))
        elif self.variant == "geodesic":
            if self.h is None:
                raise ValueError("geodesic elements need h")
            if not np.isclose(element_cap(self.q, self.h), 2.0 * self.cap_increment,
                              rtol=1e-9, atol=1e-300):
                raise ValueError("cap_increment inconsistent with (q, h)")
        else:
            raise ValueError(f"unknown variant {self.variant!r}")

    @classmethod
    def geodesic(cls, anchor: float, q: float, h: float) -> "SlitElement":
        return cls(anchor, 0.5 * float(element_cap(q, h)), "geodesic", float(q), float(h))

    def __call__(self, z):
        return element_map(z, self.anchor, self.q, self.h)

    def inverse(self, w):
        return element_inverse(w, self.anchor, self.q, self.h)

    @property
    def tip(self) -> complex:
        return complex(self.inverse(self.anchor + element_tip_image(self.q, self.h)))


@dataclass(frozen=True)
class MapChain:
    """Composition ``g = e_n o ... o e_1`` (``e_1`` applied first).

    Stored as parallel arrays ``anchors``, ``qs``, ``hs``; ``qs`` defaults to
    zeros (vertical slits).
    """

    anchors: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    qs: np.ndarray | None = None

    def __post_init__(self):
        a = np.array(self.anchors, dtype=float)
        h = np.array(self.hs, dtype=float)
        q = np.zeros_like(a) if self.qs is None else np.array(self.qs, dtype=float)
        if not (a.shape == h.shape == q.shape) or a.ndim != 1:
            raise ValueError("element arrays must be 1-d and of equal length")
        if np.any(h < 0):
            raise ValueError("arc heights must be non-negative")
        for arr in (a, h, q):
            arr.setflags(write=False)
        object.__setattr__(self, "anchors", a)
        object.__setattr__(self, "hs", h)
        object.__setattr__(self, "qs", q)

    @classmethod
    def slits(cls, anchors, deltas) -> "MapChain":
        return cls(anchors, 2.0 * np.sqrt(np.asarray(deltas, dtype=float)))

    @classmethod
    def from_elements(cls, elements: Iterable[SlitElement]) -> "MapChain":
        els = list(elements)
        return cls([e.anchor for e in els], [e.h for e in els], [e.q for e in els])

    @property
    def deltas(self) -> np.ndarray:
        return 0.5 * element_cap(self.qs, self.hs)

    @property
    def elements(self) -> list[SlitElement]:
        out = []
        for a, q, h in zip(self.anchors, self.qs, self.hs):
            if q == 0.0:
                out.append(SlitElement(float(a), 0.25 * float(h) ** 2))
            else:
                out.append(SlitElement.geodesic(float(a), float(q), float(h)))
        return out

    def __len__(self) -> int:
        return len(self.anchors)

    @property
    def total_cap(self) -> float:
        return float(np.sum(element_cap(self.qs, self.hs)))

    def then(self, other: "MapChain") -> "MapChain":
        """``other o self``."""
        return MapChain(np.concatenate([self.anchors, other.anchors]),
                        np.concatenate([self.hs, other.hs]),
                        np.concatenate([self.qs, other.qs]))

    def prefix(self, k: int) -> "MapChain":
        return MapChain(self.anchors[:k], self.hs[:k], self.qs[:k])

    def to_json(self) -> str:
        items = []
        for e in self.elements:
            d = {"anchor": e.anchor, "delta": e.cap_increment, "variant": e.variant}
            if e.variant == "geodesic":
                d.update(q=e.q, h=e.h)
            items.append(d)
        return json.dumps(items)

    @classmethod
    def from_json(cls, text: str) -> "MapChain":
        els = []
        for it in json.loads(text):
            v = it.get("variant", "vertical")
            if v == "vertical":
                els.append(SlitElement(float(it["anchor"]), float(it["delta"])))
            else:
                els.append(SlitElement(float(it["anchor"]), float(it["delta"]), v,
                                       float(it["q"]), float(it["h"])))
        return cls.from_elements(els)


def apply_chain(chain: MapChain, z, track: bool = False):
    """Apply the elements in order. With ``track`` also return the lowest
    imaginary part seen along the way (swallow detection)."""
    w = np.asarray(z, dtype=complex)
    lowest = w.imag.copy() if track else None
    for u, q, h in zip(chain.anchors, chain.qs, chain.hs):
        w = element_map(w, u, q, h)
        if track:
            lowest = np.minimum(lowest, w.imag)
    return (w, lowest) if track else w


def apply(chain: MapChain, z, tol: float = GEOM_TOL):
    """Forward image of ``z``; raises ``InsideHull`` for swallowed points.

    A point is swallowed when an intermediate image lands on a branch cut or is
    pushed onto the real line although it started in the open half plane.
    """
    z = np.asarray(z, dtype=complex)
    w, lowest = apply_chain(chain, z, track=True)
    inside = (z.imag > tol) & (lowest <= tol)
    if np.any(inside):
        raise InsideHull(f"{int(np.sum(inside))} point(s) lie inside the hull")
    return w


def apply_masked(chain: MapChain, z, tol: float = GEOM_TOL):
    """Like ``apply`` but returns ``(images, swallowed_mask)`` instead of raising."""
    z = np.asarray(z, dtype=complex)
    w, lowest = apply_chain(chain, z, track=True)
    return w, (z.imag > tol) & (lowest <= tol)


def invert(chain: MapChain, w):
    """Right inverse of ``apply`` on the closed upper half plane."""
    z = np.asarray(w, dtype=complex)
    for k in range(len(chain) - 1, -1, -1):
        z = element_inverse(z, chain.anchors[k], chain.qs[k], chain.hs[k])
    return z


def derivative(chain: MapChain, z):
    """Complex derivative of the composition at ``z``."""
    w = np.asarray(z, dtype=complex)
    d = np.ones_like(w)
    for u, q, h in zip(chain.anchors, chain.qs, chain.hs):
        d = d * element_derivative(w, u, q, h)
        w = element_map(w, u, q, h)
    return d


def boundary_derivative(chain: MapChain, x, tol: float = 1e-12):
    """Derivative of the composition along the real line at ``x``.

    Raises ``AtFoot`` if ``x`` or one of its intermediate images sits on the
    foot of an element, where the boundary map is not differentiable.
    """
    xs = np.asarray(x, dtype=float)
    w = xs.astype(complex)
    d = np.ones(xs.shape)
    for u, q, h in zip(chain.anchors, chain.qs, chain.hs):
        if h == 0:
            continue
        if np.any(np.abs(w.real - u) <= tol * max(1.0, h)):
            raise AtFoot(f"x hits the foot of the element anchored at {u}")
        d = d * element_derivative(w.real, u, q, h).real
        w = element_map(w.real, u, q, h)
    return float(d) if d.ndim == 0 else d


# ---------------------------------------------------------------------------
# zipper
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ZipperResult:
    chain: MapChain
    tips: np.ndarray  # real image of the curve tip after each element
    point_index: np.ndarray  # input point removed by each element
    self_touch: bool
    touch_points: np.ndarray

    @property
    def total_cap(self) -> float:
        return self.chain.total_cap

    def cumulative_cap(self) -> np.ndarray:
        return np.cumsum(element_cap(self.chain.qs, self.chain.hs))


def read_curve_csv(path) -> np.ndarray:
    """Curve points from a CSV with columns ``re, im`` (``#`` lines ignored)."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    if not lines or [c.strip() for c in lines[0].split(",")][:2] != ["re", "im"]:
        raise ValueError(f"{path}: expected header re,im")
    arr = np.loadtxt(lines[1:], delimiter=",", ndmin=2, usecols=(0, 1))
    return arr[:, 0] + 1j * arr[:, 1]


def map_out_curve(points, touch_tol: float = 1e-10, chain: MapChain | None = None) -> ZipperResult:
    """Geodesic zipper for a curve given as complex points.

    The curve is first pushed through ``chain`` if given (the result then only
    holds the new elements). Each point is removed by the arc, orthogonal to
    the real line, joining the current tip image to the point's current image;
    between points the curve is therefore approximated by hyperbolic geodesics.

    Points whose image has reached the real line (the curve touched itself or
    the boundary and closed off a region) are skipped and reported.
    """
    pts = np.asarray(points, dtype=complex)
    if pts.ndim != 1 or len(pts) == 0:
        raise ValueError("points must be a non-empty 1-d sequence")
    scale = max(1.0, float(np.max(np.abs(pts))))
    w = pts.copy()
    if chain is not None and len(chain):
        w = apply_chain(chain, w)
    if abs(w[0].imag) > 1e-8 * scale:
        raise ValueError("curve must start on the real line")
    n = len(pts)
    anchors = np.empty(n - 1)
    qs = np.empty(n - 1)
    hs = np.empty(n - 1)
    tips = np.empty(n - 1)
    idx = np.empty(n - 1, dtype=np.int64)
    touches = []
    tip = float(w[0].real)
    m = 0
    for k in range(1, n):
        c = w[k] - tip
        if not c.imag > touch_tol * scale:
            if k != n - 1:
                touches.append(k)
            continue
        q, h = arc_through(c)
        anchors[m], qs[m], hs[m], idx[m] = tip, q, h, k
        if k + 1 < n:
            w[k + 1:] = element_map(w[k + 1:], tip, q, h)
        tip = tip + float(element_tip_image(q, h))
        tips[m] = tip
        m += 1
    out = MapChain(anchors[:m], hs[:m], qs[:m])
    return ZipperResult(out, tips[:m].copy(), idx[:m], bool(touches),
                        np.asarray(touches, dtype=np.int64))


def slit_curve(x0: float, height: float, n: int) -> np.ndarray:
    return x0 + 1j * np.linspace(0.0, height, n)


def half_disk_arc(r: float, n: int, center: float = 0.0) -> np.ndarray:
    th = np.linspace(0.0, np.pi, n)
    pts = center + r * np.exp(1j * th)
    pts[0] = center + r
    pts[-1] = center - r
    return pts


# ---------------------------------------------------------------------------
# hulls and the random-walk capacity oracle
# ---------------------------------------------------------------------------

@dataclass
class HullSampler:
    """A compact hull described by a distance function and a bounding box.

    ``distance(z)`` returns a lower bound on the distance from ``z`` to the hull
    (zero inside). ``contains`` is derived from it unless given.
    """

    distance: Callable[[np.ndarray], np.ndarray]
    bbox: tuple  # (xmin, xmax, ymax)
    contains: Callable[[np.ndarray], np.ndarray] | None = None
    label: str = ""

    def __post_init__(self):
        if self.contains is None:
            self.contains = lambda z: self.distance(z) <= 0.0

    @property
    def height(self) -> float:
        return float(self.bbox[2])

    @property
    def width(self) -> float:
        return float(self.bbox[1] - self.bbox[0])

    @classmethod
    def empty(cls) -> "HullSampler":
        return cls(lambda z: np.full(np.shape(z), np.inf), (0.0, 0.0, 0.0), label="empty")

    @classmethod
    def slit(cls, x0: float, height: float) -> "HullSampler":
        def dist(z):
            z = np.asarray(z)
            y = np.clip(z.imag, 0.0, height)
            return np.abs(z - (x0 + 1j * y))

        return cls(dist, (x0, x0, height), label=f"slit({x0},{height})")

    @classmethod
    def half_disk(cls, r: float, center: float = 0.0) -> "HullSampler":
        def dist(z):
            return np.maximum(np.abs(np.asarray(z) - center) - r, 0.0)

        return cls(dist, (center - r, center + r, r), label=f"half_disk({r})")

    @classmethod
    def polylines(cls, curves: Sequence[np.ndarray], spacing: float | None = None
                  ) -> "HullSampler":
        """Union of polygonal curves, densified to ``spacing`` and indexed by a k-d tree."""
        from scipy.spatial import cKDTree

        curves = [np.asarray(c, dtype=complex) for c in curves if len(c)]
        if not curves:
            return cls.empty()
        seg = np.concatenate([np.abs(np.diff(c)) for c in curves if len(c) > 1] or [np.zeros(1)])
        if spacing is None:
            spacing = max(float(np.median(seg)) / 4.0 if len(seg) else 1e-3, 1e-5)
        dense = [densify(c, spacing) for c in curves]
        pts = np.concatenate(dense)
        tree = cKDTree(np.column_stack([pts.real, pts.imag]))
        half = 0.5 * spacing

        def dist(z):
            z = np.asarray(z)
            d, _ = tree.query(np.column_stack([z.real.ravel(), z.imag.ravel()]))
            return np.maximum(d - half, 0.0).reshape(z.shape)

        bbox = (float(pts.real.min()), float(pts.real.max()), float(max(pts.imag.max(), 0.0)))
        return cls(dist, bbox, label=f"polylines({len(curves)})")

    @classmethod
    def disks(cls, centers, radius: float) -> "HullSampler":
        from scipy.spatial import cKDTree

        c = np.asarray(centers, dtype=complex).ravel()
        if len(c) == 0:
            return cls.empty()
        tree = cKDTree(np.column_stack([c.real, c.imag]))

        def dist(z):
            z = np.asarray(z)
            d, _ = tree.query(np.column_stack([z.real.ravel(), z.imag.ravel()]))
            return np.maximum(d - radius, 0.0).reshape(z.shape)

        bbox = (float(c.real.min() - radius), float(c.real.max() + radius),
                float(c.imag.max() + radius))
        return cls(dist, bbox, label=f"disks({len(c)})")

    def scaled(self, alpha: float) -> "HullSampler":
        d = self.distance
        x0, x1, y = self.bbox
        return HullSampler(lambda z: alpha * d(np.asarray(z) / alpha), (alpha * x0, alpha * x1, alpha * y),
                           label=f"{alpha}*{self.label}")


def densify(curve: np.ndarray, spacing: float) -> np.ndarray:
    c = np.asarray(curve, dtype=complex)
    if len(c) < 2:
        return c
    out = [c[:1]]
    for a, b in zip(c[:-1], c[1:]):
        k = max(1, int(np.ceil(abs(b - a) / spacing)))
        out.append(a + (b - a) * np.arange(1, k + 1) / k)
    return np.concatenate(out)


@dataclass(frozen=True)
class CapacityEstimate:
    estimate: float
    stderr: float
    walkers: int
    leaked: int
    line_height: float
    cauchy_scale: float
    cutoff: float
    absorb_eps: float

    def within(self, target: float, n_se: float = 3.0, bias: float = 0.0) -> bool:
        return abs(self.estimate - target) <= n_se * self.stderr + bias

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def hcap_mc_oracle(hull: HullSampler, launch_height: float | None = None, walkers: int = 100_000,
                   seed: int = 0, eps: float | None = None, cutoff: float | None = None,
                   max_steps: int = 5000, leak_tolerance: float = 1e-3,
                   batch: int = 200_000) -> CapacityEstimate:
    """Random-walk estimate of hcap, independent of any map composition.

    Starts from ``hcap(K) = (1/pi) * integral u(x + i y) dx`` where ``y`` is
    above the hull and ``u(z) = E^z[Im B_tau]``, ``tau`` the exit time of
    ``H \\ K``. A walker from ``i*Y`` meets the line ``Im z = y`` at a Cauchy
    point of scale ``s = Y - y``; we sample that Cauchy law truncated to
    ``|x| <= cutoff`` and reweight, so ``Y`` only affects the variance. The
    tail ``|x| > cutoff`` is closed with ``u ~ hcap * y / |z|^2``, which gives
    the factor ``1 / (1 - (2/pi) arctan(y / cutoff))`` (the next correction is
    odd in ``x`` and cancels on a window centred at the hull). Untruncated,
    the reweighted score has infinite variance.

    From the line, walkers move by walk-on-spheres until within ``eps`` of the
    real line (score 0) or of the hull (score ``Im z``).
    """
    if hull.height <= 0.0:
        return CapacityEstimate(0.0, 0.0, walkers, 0, 0.0, 0.0, 0.0, 0.0)
    scale = max(hull.height, hull.width, 1e-12)
    y_line = 1.001 * hull.height + 1e-6 * scale
    if launch_height is None:
        launch_height = 10.0 * hull.height
    if launch_height < y_line:
        raise ValueError("launch height must lie above the hull")
    s = max(launch_height - y_line, 1e-3 * scale)
    if eps is None:
        eps = 1e-4 * scale
    if cutoff is None:
        cutoff = 20.0 * scale
    xc = 0.5 * (hull.bbox[0] + hull.bbox[1])
    half_angle = np.arctan(cutoff / s)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    scores = []
    leaked = 0
    done = 0
    while done < walkers:
        m = min(batch, walkers - done)
        x = s * np.tan(half_angle * rng.uniform(-1.0, 1.0, m))
        weight = (s * s + x * x) * 2.0 * half_angle / (np.pi * s)
        z = (xc + x) + 1j * y_line
        val = np.zeros(m)
        active = np.arange(m)
        for _ in range(max_steps):
            if len(active) == 0:
                break
            za = z[active]
            dh = hull.distance(za)
            dr = za.imag
            hit_h = dh < eps
            stop = hit_h | (dr < eps)
            val[active[hit_h]] = za[hit_h].imag
            active = active[~stop]
            za = za[~stop]
            r = np.minimum(dh[~stop], dr[~stop])
            th = rng.uniform(0.0, 2.0 * np.pi, len(active))
            z[active] = za + r * np.exp(1j * th)
        leaked += len(active)
        val[active] = 0.0
        scores.append(val * weight)
        done += m
    if leaked > leak_tolerance * walkers:
        raise WalkerLeak(f"{leaked} of {walkers} walkers exceeded {max_steps} steps")
    sc = np.concatenate(scores) / (1.0 - (2.0 / np.pi) * np.arctan(y_line / cutoff))
    return CapacityEstimate(float(sc.mean()), float(sc.std(ddof=1) / np.sqrt(len(sc))), walkers,
                            leaked, y_line, s, float(cutoff), eps)


# ---------------------------------------------------------------------------
# batched chains: one chain per ensemble member, arrays of shape (P, K).
# Unused slots are identity elements (anchor 0, q 0, h 0).
# ---------------------------------------------------------------------------

def partial_height(q, cap):
    """Height ``y`` with ``element_cap(q, y) == cap`` (same circle, shorter arc)."""
    q = np.asarray(q, dtype=float)
    cap = np.maximum(np.asarray(cap, dtype=float), 0.0)
    f = np.minimum(4.0 * q * q * cap, 1.0 - 1e-16)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.expm1(-0.5 * np.log1p(-f))
        y = np.sqrt(x) / np.abs(q)
    return np.where(q == 0, np.sqrt(2.0 * cap), y)


def batch_apply(anchors, qs, hs, z, upto: int | None = None):
    """Push ``z`` (P, M) through batched chains; returns images and the lowest
    imaginary part seen (for swallow detection)."""
    w = np.array(z, dtype=complex)
    lowest = w.imag.copy()
    k_end = anchors.shape[1] if upto is None else upto
    for k in range(k_end):
        w = element_map(w, anchors[:, k, None], qs[:, k, None], hs[:, k, None])
        lowest = np.minimum(lowest, w.imag)
    return w, lowest


def batch_invert(anchors, qs, hs, w, upto: int | None = None):
    z = np.array(w, dtype=complex)
    k_end = anchors.shape[1] if upto is None else upto
    for k in range(k_end - 1, -1, -1):
        z = element_inverse(z, anchors[:, k, None], qs[:, k, None], hs[:, k, None])
    return z


def batch_boundary_derivative(anchors, qs, hs, x, foot_tol: float = 1e-12):
    """Derivative along the real line at ``x`` (P,); also returns a mask of
    members where ``x`` (or an intermediate image) sits on an element foot."""
    w = np.array(x, dtype=float)
    d = np.ones_like(w)
    at_foot = np.zeros(w.shape, dtype=bool)
    for k in range(anchors.shape[1]):
        u, q, h = anchors[:, k], qs[:, k], hs[:, k]
        act = h > 0
        at_foot |= act & (np.abs(w - u) <= foot_tol * np.maximum(1.0, h))
        dk = element_derivative(w, u, q, h).real
        d = np.where(act, d * dk, d)
        w = np.where(act, element_map(w, u, q, h).real, w)
    return d, at_foot


@dataclass
class BatchZipper:
    anchors: np.ndarray
    qs: np.ndarray
    hs: np.ndarray
    tips: np.ndarray  # tip image after each element
    touches: np.ndarray  # (P,) number of skipped points

    @property
    def caps(self) -> np.ndarray:
        return np.where(self.hs > 0, element_cap(self.qs, self.hs), 0.0)

    @property
    def total_cap(self) -> np.ndarray:
        return self.caps.sum(axis=1)

    def apply(self, z):
        return batch_apply(self.anchors, self.qs, self.hs, z)[0]


def batch_zipper(points, mask, starts=(0,), touch_tol: float = 1e-10) -> BatchZipper:
    """Geodesic zipper run independently for every row of ``points`` (P, M).

    ``mask`` marks usable points; ``starts`` lists the column indices where a
    new curve begins (its base point is on the real line after the previous
    curves have been mapped out). Masked points produce identity elements.
    """
    w = np.array(points, dtype=complex)
    mask = np.asarray(mask, dtype=bool)
    P, M = w.shape
    scale = np.maximum(1.0, np.max(np.where(mask, np.abs(w), 0.0), axis=1, initial=0.0))
    anchors = np.zeros((P, M))
    qs = np.zeros((P, M))
    hs = np.zeros((P, M))
    tips = np.zeros((P, M))
    touches = np.zeros(P, dtype=np.int64)
    starts = set(int(s) for s in starts)
    tip = np.zeros(P)
    for k in range(M):
        if k in starts:
            tip = w[:, k].real.copy()
            tips[:, k] = tip
            continue
        c = w[:, k] - tip
        act = mask[:, k] & (c.imag > touch_tol * scale)
        touches += mask[:, k] & ~act
        cc = np.where(act, c, 1j)
        q, h = arc_through(cc)
        q = np.where(act, q, 0.0)
        h = np.where(act, h, 0.0)
        u = np.where(act, tip, 0.0)
        anchors[:, k], qs[:, k], hs[:, k] = u, q, h
        if k + 1 < M:
            w[:, k + 1:] = element_map(w[:, k + 1:], u[:, None], q[:, None], h[:, None])
        tip = np.where(act, tip + element_tip_image(q, h), tip)
        tips[:, k] = tip
    return BatchZipper(anchors, qs, hs, tips, touches)
