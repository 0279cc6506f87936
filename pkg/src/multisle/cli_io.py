"""Command-line front end: configuration, run manifests, persistence and SVG output.

Configurations are either line-oriented ``key = value`` files with dotted
sections (``sde.kappa = 4``) or the equivalent nested JSON; both are flattened
to the same dotted keys and validated before anything is computed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import ConfigInvalid, InvalidParams, IoFailure, MalformedInput, MultiSLEError

KINDS = ("simulate", "trace", "reparam", "gff-check", "phase-report", "bench")
FORMATS = ("csv", "json", "svg")
OUT_ENV = "MULTISLE_OUT"
DEFAULT_ROOT = "multisle-runs"
# trace resolution used by phase reports unless configured
PHASE_EPS = 0.02
PHASE_TOL = 0.12

EXIT_OK, EXIT_CHECK_FAILED, EXIT_ERROR = 0, 1, 2

DEFAULT_FORMATS = {
    "simulate": ("csv",),
    "trace": ("csv", "svg"),
    "reparam": ("csv", "json"),
    "gff-check": ("json",),
    "phase-report": ("json", "csv"),
    "bench": ("csv",),
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _seq(v):
    if isinstance(v, str):
        return [x for x in (p.strip() for p in v.split(",")) if x]
    if isinstance(v, (list, tuple)):
        return list(v)
    return [v]


def _floats(v):
    return tuple(float(x) for x in _seq(v))


def _ints(v):
    return tuple(int(x) for x in _seq(v))


def _strs(v):
    return tuple(str(x) for x in _seq(v))


def _opt_float(v):
    if v is None or (isinstance(v, str) and v.lower() in ("", "none", "auto")):
        return None
    return float(v)


def _complex(v):
    if isinstance(v, (list, tuple)) and len(v) == 2:
        return complex(float(v[0]), float(v[1]))
    return complex(str(v).replace(" ", "").replace("i", "j"))


def _int(v):
    if isinstance(v, float) and not v.is_integer():
        raise ValueError("not an integer")
    return int(v)


# dotted key -> (converter, default)
SCHEMA = {
    "run.kind": (str, None),
    "run.seed": (_int, 0),
    "run.paths": (_int, 10),
    "run.out": (str, None),
    "run.formats": (_strs, None),
    "run.workers": (_int, 1),
    "run.tol": (_opt_float, None),
    "sde.kappa": (float, 4.0),
    "sde.positions": (_floats, (0.0,)),
    "sde.dt": (float, 1e-3),
    "sde.horizon": (float, 0.5),
    "trace.eps": (_opt_float, None),
    "trace.every": (_int, 1),
    "reparam.ds": (float, 1e-3),
    "reparam.dt": (float, 0.01),
    "reparam.tol": (float, 3e-4),
    "reparam.method": (str, "fprime"),
    "reparam.mode": (str, "conditional"),
    "reparam.margin": (float, 1.25),
    "gff.size": (float, 4.0),
    "gff.mesh": (float, 0.125),
    "gff.samples": (_int, 100),
    "gff.z": (_complex, 2j),
    "gff.w": (_complex, -1 + 2j),
    "bench.zipper_sizes": (_ints, (256, 512, 1024)),
    "bench.ensemble_sizes": (_ints, (100, 200, 400)),
    "bench.repeats": (_int, 3),
}


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_config_text(text: str) -> dict:
    """Flat dotted-key dict from JSON or ``key = value`` text (values unconverted)."""
    if text.lstrip().startswith("{"):
        try:
            return flatten(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigInvalid(f"invalid JSON ({e.msg})", field=f"line {e.lineno}") from None
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigInvalid("expected key = value", field=f"line {n}")
        k, v = (p.strip() for p in line.split("=", 1))
        if k in out:
            raise ConfigInvalid("duplicate key", field=k)
        out[k] = v
    return out


@dataclass(frozen=True)
class RunConfig:
    kind: str
    sde: object  # SdeParams
    paths: int
    out: Path
    formats: tuple
    workers: int = 1
    tol: float | None = None
    settings: dict = field(default_factory=dict)  # converted trace/reparam/gff/bench keys

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        from .sde import SdeParams

        unknown = sorted(set(flat) - set(SCHEMA))
        if unknown:
            raise ConfigInvalid("unknown key", field=unknown[0])
        vals = {}
        for key, (conv, default) in SCHEMA.items():
            if key not in flat:
                vals[key] = default
                continue
            try:
                vals[key] = conv(flat[key])
            except (TypeError, ValueError):
                raise ConfigInvalid(f"cannot parse {flat[key]!r}", field=key) from None
        kind = vals["run.kind"]
        if kind not in KINDS:
            raise ConfigInvalid(f"must be one of {', '.join(KINDS)}", field="run.kind")
        try:
            sde = SdeParams(vals["sde.kappa"], vals["sde.positions"], vals["sde.dt"],
                            vals["sde.horizon"], vals["run.seed"])
        except InvalidParams as e:
            raise ConfigInvalid(str(e), field="sde") from None
        for key in ("run.paths", "run.workers", "trace.every", "gff.samples", "bench.repeats"):
            if vals[key] < 1:
                raise ConfigInvalid("must be at least 1", field=key)
        for key in ("run.tol", "trace.eps", "reparam.ds", "reparam.dt", "reparam.tol",
                    "gff.size", "gff.mesh"):
            if vals[key] is not None and not vals[key] > 0:
                raise ConfigInvalid("must be positive", field=key)
        if vals["reparam.margin"] < 1:
            raise ConfigInvalid("must be at least 1", field="reparam.margin")
        if vals["reparam.method"] not in ("fprime", "finite_diff"):
            raise ConfigInvalid("must be fprime or finite_diff", field="reparam.method")
        if vals["reparam.mode"] not in ("conditional", "independent", "mirror"):
            raise ConfigInvalid("must be conditional, independent or mirror", field="reparam.mode")
        if kind == "gff-check":
            from .gff import GridDomain
            try:
                GridDomain(vals["gff.size"], vals["gff.size"], vals["gff.mesh"])
            except InvalidParams as e:
                raise ConfigInvalid(str(e), field="gff.mesh") from None
            for key in ("gff.z", "gff.w"):
                if not vals[key].imag > 0:
                    raise ConfigInvalid("must lie in the upper half-plane", field=key)
        fmts = vals["run.formats"] or DEFAULT_FORMATS[kind]
        bad = [f for f in fmts if f not in FORMATS]
        if bad:
            raise ConfigInvalid(f"unknown format {bad[0]!r}", field="run.formats")
        out = vals["run.out"]
        if out is None:
            out = Path(os.environ.get(OUT_ENV, DEFAULT_ROOT)) / f"{kind}-seed{sde.seed}"
        settings = {k: v for k, v in vals.items() if not k.startswith(("run.", "sde."))}
        return cls(kind, sde, vals["run.paths"], Path(out), tuple(dict.fromkeys(fmts)),
                   vals["run.workers"], vals["run.tol"], settings)

    def to_flat(self) -> dict:
        d = {"run.kind": self.kind, "run.seed": int(self.sde.seed), "run.paths": self.paths,
             "run.out": str(self.out), "run.formats": list(self.formats),
             "run.workers": self.workers, "run.tol": self.tol,
             "sde.kappa": self.sde.kappa, "sde.positions": list(self.sde.initial_positions),
             "sde.dt": self.sde.dt, "sde.horizon": self.sde.horizon}
        for k, v in self.settings.items():
            if isinstance(v, complex):
                v = [v.real, v.imag]
            elif isinstance(v, tuple):
                v = list(v)
            d[k] = v
        return d

    def get(self, key: str):
        return self.settings[key]


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    flat = {}
    if path is not None:
        try:
            flat = parse_config_text(Path(path).read_text())
        except OSError as e:
            raise IoFailure(f"cannot read config {path}: {e.strerror}") from None
    flat.update(overrides or {})
    return RunConfig.from_flat(flat)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


class OutputDir:
    """Atomic writes into one directory, recording a digest per emitted file."""

    def __init__(self, root):
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise IoFailure(f"cannot create {self.root}: {e.strerror}") from None
        self.digests: dict[str, str] = {}

    def via_path(self, name: str, write, record: bool = True) -> Path:
        """Call ``write(tmp_path)`` and move the result into place."""
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=f".{name}.", suffix=".tmp")
        os.close(fd)
        target = self.root / name
        try:
            write(tmp)
            os.replace(tmp, target)
        except OSError as e:
            raise IoFailure(f"cannot write {target}: {e.strerror}") from None
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
        if record:
            self.digests[name] = sha256_file(target)
        return target

    def text(self, name: str, content: str, record: bool = True) -> Path:
        def w(p):
            with open(p, "w", newline="") as fh:
                fh.write(content)
        return self.via_path(name, w, record)


def header_line(meta: dict) -> str:
    return "# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n"


def parse_header(line: str) -> dict:
    out = {}
    for tok in line.lstrip("#").split():
        if "=" in tok:
            k, v = tok.split("=", 1)
            out[k] = v
    return out


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    target: str
    acceptance: bool = True


@dataclass
class RunManifest:
    config: dict
    version: str
    seeds: list
    started: str
    wall_clock: float
    counts: dict
    files: dict
    checks: list
    summary: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(c["passed"] for c in self.checks if c["acceptance"])

    @property
    def exit_code(self) -> int:
        return EXIT_OK if self.ok else EXIT_CHECK_FAILED

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=_json_default)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, complex):
        return [o.real, o.imag]
    raise TypeError(f"not serializable: {type(o).__name__}")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, default=_json_default, allow_nan=True) + "\n"


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _frame(polys, box):
    if box is not None:
        return tuple(float(v) for v in box)
    if not polys:
        return -1.0, 1.0, 0.0, 1.0
    allp = np.concatenate(polys)
    x0, x1 = float(allp.real.min()), float(allp.real.max())
    y0, y1 = min(0.0, float(allp.imag.min())), float(allp.imag.max())
    span = max(x1 - x0, y1 - y0, 1e-9)
    pad = 0.05 * span
    return x0 - pad, x1 + pad, y0, y1 + pad


def render_polylines(polys, caption: str = "", size: int = 480, box=None,
                     stroke_width: float = 1.0) -> str:
    """One polyline per complex point array inside an axis box with equal aspect."""
    polys = [np.asarray(p, dtype=complex) for p in polys]
    polys = [p[np.isfinite(p)] for p in polys]
    polys = [p for p in polys if len(p)]
    x0, x1, y0, y1 = _frame(polys, box)
    margin, foot = 20.0, 24.0
    scale = (size - 2 * margin) / max(x1 - x0, y1 - y0)
    w = 2 * margin + (x1 - x0) * scale
    h = 2 * margin + (y1 - y0) * scale + foot

    def xy(p):
        return margin + (p.real - x0) * scale, margin + (y1 - p.imag) * scale

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0f}" height="{h:.0f}" '
           f'viewBox="0 0 {w:.2f} {h:.2f}">',
           f'<rect x="{margin:.2f}" y="{margin:.2f}" width="{(x1 - x0) * scale:.2f}" '
           f'height="{(y1 - y0) * scale:.2f}" fill="none" stroke="#444" stroke-width="0.8"/>']
    if y0 <= 0.0 <= y1:
        _, yr = xy(np.array([0j]))
        out.append(f'<line x1="{margin:.2f}" y1="{yr[0]:.2f}" x2="{margin + (x1 - x0) * scale:.2f}" '
                   f'y2="{yr[0]:.2f}" stroke="#999" stroke-width="0.6"/>')
    for k, p in enumerate(polys):
        px, py = xy(p)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{PALETTE[k % len(PALETTE)]}" '
                   f'stroke-width="{stroke_width}"/>')
    out.append(f'<text x="{margin:.2f}" y="{h - 8:.2f}" font-family="sans-serif" font-size="12">'
               f'{escape(caption)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def read_trace_file(path):
    """(Trace, header dict) from a trace CSV; raises ``MalformedInput``."""
    from .loewner import Trace

    try:
        with open(path) as fh:
            first = fh.readline()
        meta = parse_header(first) if first.startswith("#") else {}
        idx = int(meta.get("curve", 1))
        return Trace.from_csv(path, index=idx), meta
    except (OSError, ValueError) as e:
        raise MalformedInput(f"{path}: {e}") from None


def render_traces(trace_files, style: dict | None = None) -> str:
    """SVG of the traces stored in ``trace_files`` with a kappa/N/T caption."""
    style = dict(style or {})
    loaded = [read_trace_file(p) for p in trace_files]
    caption = style.pop("caption", None)
    if caption is None:
        if loaded:
            meta = loaded[0][1]
            T = max(float(t.times[-1]) for t, _ in loaded if len(t.times))
            caption = f"kappa={meta.get('kappa', '?')} N={meta.get('N', len(loaded))} T={T:g}"
        else:
            caption = "no traces"
    return render_polylines([t.points for t, _ in loaded], caption=caption, **style)


def _grey(v: float) -> str:
    # black at -1, white at +1
    g = int(round(127.5 * (float(np.clip(v, -1.0, 1.0)) + 1.0)))
    return f"#{g:02x}{g:02x}{g:02x}"


def render_heatmap(values, extent, caption: str = "", size: int = 480) -> str:
    """Cells of a 2D array ``values[i, j]`` (x index i, y index j) over ``extent``."""
    values = np.asarray(values, dtype=float)
    x0, x1, y0, y1 = (float(e) for e in extent)
    nx, ny = values.shape
    margin, foot = 20.0, 24.0
    scale = (size - 2 * margin) / max(x1 - x0, y1 - y0)
    cw, chh = (x1 - x0) * scale / nx, (y1 - y0) * scale / ny
    w = 2 * margin + (x1 - x0) * scale
    h = 2 * margin + (y1 - y0) * scale + foot
    vmax = float(np.max(np.abs(values))) or 1.0
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0f}" height="{h:.0f}" '
           f'viewBox="0 0 {w:.2f} {h:.2f}">']
    for i in range(nx):
        for j in range(ny):
            out.append(f'<rect x="{margin + i * cw:.2f}" y="{margin + (ny - 1 - j) * chh:.2f}" '
                       f'width="{cw:.2f}" height="{chh:.2f}" fill="{_grey(values[i, j] / vmax)}"/>')
    out.append(f'<rect x="{margin:.2f}" y="{margin:.2f}" width="{nx * cw:.2f}" height="{ny * chh:.2f}" '
               'fill="none" stroke="#444" stroke-width="0.8"/>')
    out.append(f'<text x="{margin:.2f}" y="{h - 8:.2f}" font-family="sans-serif" font-size="12">'
               f'{escape(caption)} (|h| max {vmax:.3g})</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# run kinds
# ---------------------------------------------------------------------------

def _chunks(ids: np.ndarray, workers: int):
    n = max(1, min(workers, len(ids)))
    return [c for c in np.array_split(ids, n) if len(c)]


def _ensemble_chunk(params, ids, ks=None, eps=None):
    from .loewner import full_traces_batch
    from .sde import simulate_dyson_ensemble

    ens = simulate_dyson_ensemble(params, path_ids=ids)
    traces = None
    if ks is not None:
        traces = np.full((len(ids), params.n_particles, len(ks)), np.nan + 0j)
        if ens.accepted.any():
            traces[ens.accepted] = full_traces_batch(ens.values[ens.accepted], params.times, ks, eps)
    return ens, traces


def _ensemble(cfg: RunConfig, ks=None, eps=None):
    """Dyson ensemble (and optionally traces) split over ``cfg.workers`` processes.

    Random streams are keyed by path id, so the split does not change any value.
    """
    from .sde import DysonEnsemble

    ids = np.arange(cfg.paths, dtype=np.int64)
    parts = _chunks(ids, cfg.workers)
    if len(parts) == 1:
        return _ensemble_chunk(cfg.sde, ids, ks, eps)
    with ProcessPoolExecutor(max_workers=len(parts)) as pool:
        res = list(pool.map(_ensemble_chunk, [cfg.sde] * len(parts), parts,
                            [ks] * len(parts), [eps] * len(parts)))
    es = [r[0] for r in res]
    ens = DysonEnsemble(es[0].times, np.concatenate([e.values for e in es]),
                        np.concatenate([e.accepted for e in es]),
                        np.concatenate([e.path_ids for e in es]), cfg.sde,
                        np.concatenate([e.collapse_time for e in es]),
                        np.concatenate([e.refinements for e in es]))
    traces = None if ks is None else np.concatenate([r[1] for r in res])
    return ens, traces


def _seed_list(cfg: RunConfig, ids) -> list:
    return [{"seed": int(cfg.sde.seed), "path_id": int(p)} for p in ids]


def _sde_meta(cfg: RunConfig, **extra) -> dict:
    p = cfg.sde
    meta = {"kappa": p.kappa, "N": p.n_particles, "dt": p.dt, "horizon": p.horizon, "seed": p.seed}
    meta.update(extra)
    return meta


def _ensemble_counts(ens) -> dict:
    return {"paths": int(len(ens.path_ids)), "rejected": int((~ens.accepted).sum()),
            "rejected_ids": [int(p) for p in ens.path_ids[~ens.accepted]],
            "refinements": int(ens.refinements.sum())}


def _run_simulate(cfg: RunConfig, out: OutputDir) -> dict:
    ens, _ = _ensemble(cfg)
    n = cfg.sde.n_particles
    for k in np.flatnonzero(ens.accepted):
        pid = int(ens.path_ids[k])
        meta = _sde_meta(cfg, path_id=pid, units="t:capacity-time;x:boundary-position")
        if "csv" in cfg.formats:
            out.via_path(f"drivers_{pid:05d}.csv",
                         lambda p, k=k, meta=meta: ens.path(k).to_csv(p, header=meta))
    if "json" in cfg.formats:
        acc = ens.accepted
        out.text("drivers.json", _dumps({"meta": _sde_meta(cfg), "times": ens.times,
                                         "path_ids": ens.path_ids[acc], "values": ens.values[acc]}))
    if "svg" in cfg.formats and ens.accepted.any():
        k = int(np.flatnonzero(ens.accepted)[0])
        # drivers drawn as x_i(t) + i t, time upwards
        polys = [ens.values[k, i] + 1j * ens.times for i in range(n)]
        out.text("drivers.svg", render_polylines(polys, f"drivers kappa={cfg.sde.kappa:g} N={n}"))
    return {"seeds": _seed_list(cfg, ens.path_ids), "counts": _ensemble_counts(ens), "checks": [],
            "summary": {"rejection_rate": ens.rejection_rate}}


def _trace_grid(cfg: RunConfig):
    return np.arange(0, cfg.sde.n_steps + 1, cfg.get("trace.every"))


def _write_traces(cfg, out, pid, times, pts, eps):
    from .loewner import Trace

    n = pts.shape[0]
    files = []
    for i in range(n):
        tr = Trace(i + 1, times, pts[i], np.where(times > 0, eps, 0.0))
        meta = _sde_meta(cfg, path_id=pid, curve=i + 1, eps=eps, units="t:capacity-time;re,im:plane")
        name = f"trace_{pid:05d}_{i + 1}.csv"
        out.via_path(name, lambda p, tr=tr, meta=meta: tr.to_csv(p, header=meta))
        files.append(name)
    return files


def _run_trace(cfg: RunConfig, out: OutputDir) -> dict:
    from .loewner import default_eps

    eps = cfg.get("trace.eps") or default_eps(cfg.sde.dt)
    ks = _trace_grid(cfg)
    ens, traces = _ensemble(cfg, ks, eps)
    times = ens.times[ks]
    for k in np.flatnonzero(ens.accepted):
        pid = int(ens.path_ids[k])
        if "csv" in cfg.formats:
            _write_traces(cfg, out, pid, times, traces[k], eps)
        if "svg" in cfg.formats:
            cap = f"kappa={cfg.sde.kappa:g} N={cfg.sde.n_particles} T={cfg.sde.horizon:g}"
            out.text(f"traces_{pid:05d}.svg", render_polylines(list(traces[k]), cap))
    if "json" in cfg.formats:
        acc = ens.accepted
        out.text("traces.json", _dumps({"meta": _sde_meta(cfg, eps=eps), "times": times,
                                        "path_ids": ens.path_ids[acc],
                                        "re": traces[acc].real, "im": traces[acc].imag}))
    return {"seeds": _seed_list(cfg, ens.path_ids), "counts": _ensemble_counts(ens), "checks": [],
            "summary": {"eps": eps}}


def phase_checks(summary, kappa: float) -> list:
    """Acceptance targets applied to ensemble phase rates (artifact-level thresholds)."""
    if kappa <= 4.0:
        return [Check("simple_disjoint_rate", summary.frac_simple_disjoint >= 0.95,
                      summary.frac_simple_disjoint, ">= 0.95")]
    if kappa < 8.0:
        return [Check("hits_or_neighbor_rate", summary.frac_hits_or_neighbor > 0.5,
                      summary.frac_hits_or_neighbor, "> 0.5")]
    return []


def _run_phase(cfg: RunConfig, out: OutputDir) -> dict:
    from .diagnostics import classify_phase, reference_box, summarize, write_summary_csv

    eps = cfg.get("trace.eps") or PHASE_EPS
    tol = cfg.tol or PHASE_TOL
    ks = _trace_grid(cfg)
    ens, traces = _ensemble(cfg, ks, eps)
    box = reference_box(cfg.sde.initial_positions)
    reports, ids = [], []
    for k in np.flatnonzero(ens.accepted):
        reports.append(classify_phase(list(traces[k]), tol, cfg.sde.kappa, box))
        ids.append(int(ens.path_ids[k]))
    if not reports:
        raise MultiSLEError("every path was rejected; nothing to classify")
    summary = summarize(reports)
    checks = phase_checks(summary, cfg.sde.kappa)
    if "json" in cfg.formats:
        out.text("phase_report.json", _dumps({
            "meta": _sde_meta(cfg, eps=eps, tol=tol), "summary": summary.to_dict(),
            "thresholds": [asdict(c) for c in checks],
            "paths": [dict(path_id=p, **r.to_dict()) for p, r in zip(ids, reports)]}))
    if "csv" in cfg.formats:
        out.via_path("phase_summary.csv", lambda p: write_summary_csv(p, [summary]))
    if "svg" in cfg.formats:
        cap = f"kappa={cfg.sde.kappa:g} N={cfg.sde.n_particles} T={cfg.sde.horizon:g} tol={tol:g}"
        k = int(np.flatnonzero(ens.accepted)[0])
        out.text("phase_example.svg", render_polylines(list(traces[k]), cap))
    return {"seeds": _seed_list(cfg, ens.path_ids), "counts": _ensemble_counts(ens),
            "checks": checks, "summary": summary.to_dict()}


def _run_reparam(cfg: RunConfig, out: OutputDir) -> dict:
    from .reparam import sample_family, solve_reparam

    p = cfg.sde
    n = p.n_particles
    capacity = cfg.get("reparam.margin") * n * p.horizon
    fam = sample_family(p.kappa, p.initial_positions, capacity, cfg.get("reparam.ds"), cfg.paths,
                        p.seed, mode=cfg.get("reparam.mode"))
    sol = solve_reparam(fam, p.horizon, cfg.get("reparam.dt"), cfg.get("reparam.method"),
                        cfg.get("reparam.tol"))
    done = sol.complete
    target = 2.0 * n * sol.times[-1]
    rel = np.abs(sol.hcap[done, -1] - target) / target
    worst = float(rel.max()) if len(rel) else float("nan")
    checks = [Check("combined_capacity_rel_error", bool(len(rel)) and worst < 0.01, worst, "< 0.01")]
    if n == 1:
        dev = float(np.nanmax(np.abs(sol.s[done, :, 0] - sol.times[None, :]))) if done.any() else np.nan
        checks.append(Check("single_curve_identity", bool(done.any()) and dev < 1e-9, dev, "< 1e-9"))
    meta = _sde_meta(cfg, ds=cfg.get("reparam.ds"), ode_dt=cfg.get("reparam.dt"),
                     method=cfg.get("reparam.method"), mode=cfg.get("reparam.mode"),
                     units="t:combined-capacity-time;x:boundary-position")
    if "csv" in cfg.formats:
        out.via_path("reparam.csv", lambda path: sol.write_csv(path, header=meta))
    if "json" in cfg.formats:
        out.text("reparam.json", sol.to_json() + "\n")
    members = fam.provenance.get("path_ids") if isinstance(fam.provenance, dict) else None
    ids = members if members is not None else range(cfg.paths)
    return {"seeds": _seed_list(cfg, ids),
            "counts": {"paths": cfg.paths, "rejected": cfg.paths - fam.n_members,
                       "incomplete": int((~done).sum()), "touch_degenerate": sol.touch_degenerate,
                       "halvings": sol.halvings},
            "checks": checks, "summary": {"max_capacity_rel_error": worst}}


def _run_gff(cfg: RunConfig, out: OutputDir) -> dict:
    from .gff import GridDomain, calibrate, cross_variation_test, martingale_test, sample_gff

    p = cfg.sde
    size, mesh = cfg.get("gff.size"), cfg.get("gff.mesh")
    z, w = cfg.get("gff.z"), cfg.get("gff.w")
    domain = GridDomain(size, size, mesh)
    sample = sample_gff(domain, p.seed, cfg.get("gff.samples"))
    pair = [(complex(domain.node(*[a + 1 for a in domain.index_of(z)])),
             complex(domain.node(*[a + 1 for a in domain.index_of(w)])))]
    ratio = float(calibrate(domain, pair)[0])
    emp = sample.values[:, domain.index_of(z)[0], domain.index_of(z)[1]]
    mart = martingale_test(p.kappa, p.n_particles, p.initial_positions, z, p.horizon,
                           cfg.paths, p.seed, p.dt)
    cross = cross_variation_test(p.kappa, p.n_particles, p.initial_positions, z, w, p.horizon,
                                 cfg.paths, p.seed, p.dt)
    checks = [Check("martingale", mart.passed, mart.mean, "|mean| <= 3 SE"),
              Check("cross_variation", cross.passed, cross.mean, "|cov - target| <= 3 SE")]
    report = {"meta": _sde_meta(cfg, grid_size=size, mesh=mesh, z=z, w=w),
              "calibration_ratio": ratio, "sample_variance_at_z": float(emp.var(ddof=1)),
              "martingale": mart.to_dict(), "cross_variation": cross.to_dict()}
    if "json" in cfg.formats:
        out.text("gff_check.json", _dumps(report))
    if "csv" in cfg.formats:
        out.via_path("gff_sample.csv", lambda path: sample.to_csv(path))
    if "svg" in cfg.formats:
        out.text("gff_sample.svg", render_heatmap(sample.full(0), (-size, size, 0.0, size),
                                                  f"zero-boundary GFF sample, mesh {mesh:g}"))
    return {"seeds": _seed_list(cfg, range(cfg.paths)),
            "counts": {"paths": cfg.paths, "excluded_martingale": mart.n_excluded,
                       "excluded_cross": cross.n_excluded},
            "checks": checks, "summary": report}


def _best_time(fn, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _run_bench(cfg: RunConfig, out: OutputDir) -> dict:
    from .conformal import half_disk_arc, map_out_curve
    from .sde import simulate_dyson_ensemble

    reps = cfg.get("bench.repeats")
    rows = []
    for n in cfg.get("bench.zipper_sizes"):
        arc = half_disk_arc(1.0, n)
        rows.append(("zipper", n, _best_time(lambda: map_out_curve(arc), reps)))
    for n in cfg.get("bench.ensemble_sizes"):
        rows.append(("dyson_ensemble", n,
                     _best_time(lambda: simulate_dyson_ensemble(cfg.sde, n_paths=n), reps)))
    text = header_line(_sde_meta(cfg, repeats=reps, units="seconds:best-of-repeats"))
    text += "task,size,seconds\n" + "".join(f"{a},{b},{c!r}\n" for a, b, c in rows)
    if "csv" in cfg.formats:
        out.text("bench.csv", text)
    if "json" in cfg.formats:
        out.text("bench.json", _dumps([{"task": a, "size": b, "seconds": c} for a, b, c in rows]))
    return {"seeds": [{"seed": int(cfg.sde.seed)}], "counts": {}, "checks": [],
            "summary": {f"{a}_{b}": c for a, b, c in rows}}


_RUNNERS = {
    "simulate": _run_simulate,
    "trace": _run_trace,
    "reparam": _run_reparam,
    "gff-check": _run_gff,
    "phase-report": _run_phase,
    "bench": _run_bench,
}


def run(config: RunConfig) -> RunManifest:
    """Execute one configured run and write its outputs and ``manifest.json``."""
    from . import __version__

    out = OutputDir(config.out)
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    res = _RUNNERS[config.kind](config, out)
    checks = [asdict(c) if isinstance(c, Check) else c for c in res["checks"]]
    for c in checks:
        c["passed"] = bool(c["passed"])
    manifest = RunManifest(config.to_flat(), __version__, res["seeds"], started,
                           time.perf_counter() - t0, res["counts"], dict(sorted(out.digests.items())),
                           checks, res.get("summary", {}))
    out.text("manifest.json", manifest.to_json() + "\n", record=False)
    return manifest


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

def _provenance(exc: BaseException) -> str:
    pkg = Path(__file__).resolve().parent
    mod = "multisle"
    for frame in traceback.extract_tb(exc.__traceback__):
        f = Path(frame.filename).resolve()
        if f.parent == pkg:
            mod = f"multisle.{f.stem}"
    return mod


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multisle", description="Run multiple-SLE experiments.")
    p.add_argument("kind", nargs="?", choices=KINDS, help="experiment kind (or run.kind in the config)")
    p.add_argument("--config", help="key=value or JSON configuration file")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--paths", type=int, help="ensemble size")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<kind>-seed<seed>)")
    p.add_argument("--format", action="append", choices=FORMATS, dest="formats",
                   help="output format; repeat for several")
    p.add_argument("--workers", type=int, help="worker processes for ensembles")
    p.add_argument("--tol", type=float, help="phase-report tolerance")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any dotted config key")
    return p


def overrides_from_args(args) -> dict:
    ov = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigInvalid("expected KEY=VALUE", field=item)
        k, v = item.split("=", 1)
        ov[k.strip()] = v.strip()
    for key, val in (("run.kind", args.kind), ("run.seed", args.seed), ("run.paths", args.paths),
                     ("run.out", args.out), ("run.formats", args.formats),
                     ("run.workers", args.workers), ("run.tol", args.tol)):
        if val is not None:
            ov[key] = val
    return ov


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, overrides_from_args(args))
        manifest = run(cfg)
    except ConfigInvalid as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except (MultiSLEError, OSError) as e:
        print(f"error in {_provenance(e)}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR
    for c in manifest.checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']} value={c['value']} target {c['target']}")
    print(f"wrote {len(manifest.files)} files to {cfg.out}")
    return manifest.exit_code


if __name__ == "__main__":
    sys.exit(main())
