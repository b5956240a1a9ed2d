"""Command-line front end: ``magbloch validate|bands|scan|pencil|crosscheck``.

A scenario config is one JSON file.  Every command reads the same schema and
ignores the blocks it does not need; unknown keys anywhere abort the run before
any computation.  Results go to ``--out`` as CSV/JSON plus a ``manifest.json``.

Exit status: 0 when every task succeeded, 1 when some task failed (the
manifest lists which), 2 for config or usage errors.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from numbers import Integral, Real
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import __version__
from .bands import DEFAULT_TOL, BandTable, EigensolverError, KPath, band_structure, flat_band_scan, worker_count
from .grid import GridError, TwistedGrid
from .pencil import (
    TOL_NULL,
    TOL_REAL,
    TOL_SINGULAR,
    TOL_UNIT,
    DegeneratePencilError,
    MultiplierSet,
    SubspaceError,
    crosscheck,
    multipliers,
    run_pencil,
)
from .problem import CoefficientSpec, FluxQuantizationError, ProblemError, build_problem, validate

log = logging.getLogger("magbloch")

SCHEMA_VERSION = 1
COMMANDS = ("validate", "bands", "scan", "pencil", "crosscheck")
BAND_HEADER = ("k1", "k2", "k3", "band_index", "lambda", "residual")
UINT64_MAX = 2**64 - 1

# Allowed keys per block; nested problem keys are checked by CoefficientSpec.
_SCHEMA = {
    "": {"problem", "grid", "validate", "bands", "scan", "pencil", "crosscheck",
         "tolerances", "seed"},
    "grid": {"size", "mode"},
    "validate": {"samples", "require_symmetry"},
    "bands": {"waypoints", "samples", "closed", "n_bands"},
    "scan": {"kgrid", "n_bands"},
    "pencil": {"points"},
    "crosscheck": {"points", "fiber_size", "n_bands", "nk3", "allowance"},
    "tolerances": {"solver", "null", "real", "singular", "unit"},
}
_POINT_KEYS = {"khat", "lambda"}


class ConfigError(ValueError):
    """Malformed or inconsistent scenario config; ``where`` names the key or line."""

    def __init__(self, message: str, where: str = ""):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where


# Config parsing --------------------------------------------------------------

def _no_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise ConfigError(f"duplicate key {key!r}")
        out[key] = value
    return out


def _check_keys(block: Any, name: str) -> dict:
    where = name or "<root>"
    if not isinstance(block, Mapping):
        raise ConfigError("expected an object", where)
    unknown = sorted(set(block) - _SCHEMA[name])
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}", where)
    return dict(block)


def _int(value, where, lo=None, hi=None) -> int:
    if isinstance(value, bool) or not isinstance(value, Integral):
        raise ConfigError(f"expected an integer, got {value!r}", where)
    if (lo is not None and value < lo) or (hi is not None and value > hi):
        raise ConfigError(f"{value} outside [{lo}, {hi}]", where)
    return int(value)


def _float(value, where, positive=False) -> float:
    if isinstance(value, bool) or not isinstance(value, Real) or not math.isfinite(value):
        raise ConfigError(f"expected a finite number, got {value!r}", where)
    if positive and value <= 0:
        raise ConfigError(f"must be positive, got {value!r}", where)
    return float(value)


def _vector(value, n, where) -> tuple[float, ...]:
    if not isinstance(value, (list, tuple)) or len(value) != n:
        raise ConfigError(f"expected a list of {n} numbers", where)
    return tuple(_float(v, f"{where}[{i}]") for i, v in enumerate(value))


@dataclass(frozen=True)
class PointSpec:
    khat: tuple[float, float]
    lam: float

    def to_dict(self):
        return {"khat": list(self.khat), "lambda": self.lam}


@dataclass(frozen=True)
class ScenarioConfig:
    problem: CoefficientSpec
    grid_size: tuple[int, int, int] = (16, 16, 16)
    grid_mode: str = "fiber"
    validate_samples: int = 17
    require_symmetry: bool | None = None
    path: KPath | None = None
    path_bands: int = 4
    kgrid: int = 5
    scan_bands: int = 4
    pencil_points: tuple[PointSpec, ...] = ()
    cross_points: tuple[PointSpec, ...] = ()
    cross_fiber_size: tuple[int, int, int] | None = None
    cross_bands: int = 8
    nk3: int = 64
    allowance: float = 0.0
    tolerances: Mapping[str, float] = field(default_factory=dict)
    seed: int = 0
    raw: Mapping = field(default_factory=dict, compare=False)

    def tol(self, name: str) -> float:
        return self.tolerances[name]

    @property
    def config_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


_DEFAULT_TOLS = {"solver": DEFAULT_TOL, "null": TOL_NULL, "real": TOL_REAL,
                 "singular": TOL_SINGULAR, "unit": TOL_UNIT}


def _points(items, where) -> tuple[PointSpec, ...]:
    if not isinstance(items, list) or not items:
        raise ConfigError("expected a nonempty list of {khat, lambda} records", where)
    out = []
    for i, item in enumerate(items):
        w = f"{where}[{i}]"
        if not isinstance(item, Mapping):
            raise ConfigError("expected an object", w)
        unknown = sorted(set(item) - _POINT_KEYS)
        if unknown:
            raise ConfigError(f"unknown key(s) {unknown}", w)
        if set(item) != _POINT_KEYS:
            raise ConfigError("needs both 'khat' and 'lambda'", w)
        out.append(PointSpec(_vector(item["khat"], 2, f"{w}.khat"),
                             _float(item["lambda"], f"{w}.lambda")))
    return tuple(out)


def parse_config(data: Mapping) -> ScenarioConfig:
    """Validate a decoded config object and build a ScenarioConfig."""
    root = _check_keys(data, "")
    if "problem" not in root:
        raise ConfigError("missing required key 'problem'", "<root>")
    try:
        problem = CoefficientSpec.from_dict(root["problem"])
    except (ProblemError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc), "problem") from exc
    kw: dict[str, Any] = {"problem": problem, "raw": data}

    if "grid" in root:
        g = _check_keys(root["grid"], "grid")
        if "size" in g:
            size = g["size"]
            if not isinstance(size, list) or len(size) != 3:
                raise ConfigError("expected [n1, n2, n3]", "grid.size")
            kw["grid_size"] = tuple(_int(v, f"grid.size[{i}]", lo=4) for i, v in enumerate(size))
        if "mode" in g:
            if g["mode"] not in ("fiber", "slab"):
                raise ConfigError("must be 'fiber' or 'slab'", "grid.mode")
            kw["grid_mode"] = g["mode"]

    if "validate" in root:
        v = _check_keys(root["validate"], "validate")
        if "samples" in v:
            kw["validate_samples"] = _int(v["samples"], "validate.samples", lo=2)
        if "require_symmetry" in v:
            if not isinstance(v["require_symmetry"], bool):
                raise ConfigError("expected true or false", "validate.require_symmetry")
            kw["require_symmetry"] = v["require_symmetry"]

    if "bands" in root:
        b = _check_keys(root["bands"], "bands")
        wps = b.get("waypoints")
        if not isinstance(wps, list) or len(wps) < 2:
            raise ConfigError("expected a list of at least two 3-vectors", "bands.waypoints")
        wps = [_vector(w, 3, f"bands.waypoints[{i}]") for i, w in enumerate(wps)]
        samples = _int(b.get("samples", 10), "bands.samples", lo=2)
        closed = b.get("closed", True)
        if not isinstance(closed, bool):
            raise ConfigError("expected true or false", "bands.closed")
        kw["path"] = KPath(tuple(wps), samples, closed)
        kw["path_bands"] = _int(b.get("n_bands", 4), "bands.n_bands", lo=1)

    if "scan" in root:
        s = _check_keys(root["scan"], "scan")
        kw["kgrid"] = _int(s.get("kgrid", 5), "scan.kgrid", lo=1)
        kw["scan_bands"] = _int(s.get("n_bands", 4), "scan.n_bands", lo=1)

    if "pencil" in root:
        p = _check_keys(root["pencil"], "pencil")
        kw["pencil_points"] = _points(p.get("points"), "pencil.points")

    if "crosscheck" in root:
        c = _check_keys(root["crosscheck"], "crosscheck")
        kw["cross_points"] = _points(c.get("points"), "crosscheck.points")
        if "fiber_size" in c:
            fs = c["fiber_size"]
            if not isinstance(fs, list) or len(fs) != 3:
                raise ConfigError("expected [n1, n2, n3]", "crosscheck.fiber_size")
            kw["cross_fiber_size"] = tuple(
                _int(v, f"crosscheck.fiber_size[{i}]", lo=4) for i, v in enumerate(fs))
        kw["cross_bands"] = _int(c.get("n_bands", 8), "crosscheck.n_bands", lo=1)
        kw["nk3"] = _int(c.get("nk3", 64), "crosscheck.nk3", lo=2)
        kw["allowance"] = _float(c.get("allowance", 0.0), "crosscheck.allowance")
        if kw["allowance"] < 0:
            raise ConfigError("must be >= 0", "crosscheck.allowance")

    tols = dict(_DEFAULT_TOLS)
    if "tolerances" in root:
        t = _check_keys(root["tolerances"], "tolerances")
        for key, value in t.items():
            tols[key] = _float(value, f"tolerances.{key}", positive=True)
    kw["tolerances"] = tols

    if "seed" in root:
        kw["seed"] = _int(root["seed"], "seed", lo=0, hi=UINT64_MAX)
    return ScenarioConfig(**kw)


def load_config(path) -> ScenarioConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, f"{path}:{exc.lineno}:{exc.colno}") from exc
    return parse_config(data)


# Deterministic writers -------------------------------------------------------

def _clean(obj):
    """Recursively convert numpy scalars/arrays and non-finite floats for JSON."""
    if isinstance(obj, Mapping):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (Integral, np.integer)):
        return int(obj)
    if isinstance(obj, (Real, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path: Path, obj) -> None:
    payload = {"schema_version": SCHEMA_VERSION}
    payload.update(obj)
    path.write_text(dumps_json(payload))


def _num(x) -> str:
    x = float(x)
    return repr(x) if math.isfinite(x) else "nan"


def band_csv(table: BandTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BAND_HEADER)
    for k1, k2, k3, n, lam, res in table.rows():
        w.writerow([_num(k1), _num(k2), _num(k3), n, _num(lam), _num(res)])
    return buf.getvalue()


def emit_plot_data(table, path) -> Path:
    """Write plot-ready CSV for a BandTable or a pencil result.

    Band tables give ``band_index,arc_length,lambda`` rows, one series per
    band.  A PencilReport or MultiplierSet gives one ``re_zeta,im_zeta,on_unit_circle``
    row per multiplier (both roots of each z).
    """
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if isinstance(table, BandTable):
        if table.values.size == 0:
            raise ValueError("band table is empty")
        s = table.arc_length()
        w.writerow(("band_index", "arc_length", "lambda"))
        for n in range(table.n_bands):
            for j in range(len(s)):
                w.writerow([n + 1, _num(s[j]), _num(table.values[n, j])])
    else:
        mset = table if isinstance(table, MultiplierSet) else multipliers(table)
        if len(mset.z) == 0:
            raise ValueError("multiplier set is empty")
        w.writerow(("re_zeta", "im_zeta", "on_unit_circle"))
        rows = []
        for zp, zm, unit in zip(mset.zeta_plus, mset.zeta_minus, mset.on_unit_circle):
            roots = [zp] if abs(zp - zm) == 0 else [zp, zm]
            rows.extend((r, bool(unit)) for r in roots)
        rows.sort(key=lambda item: (item[0].real, item[0].imag))
        for r, unit in rows:
            w.writerow([_num(r.real), _num(r.imag), "true" if unit else "false"])
    path.write_text(buf.getvalue())
    return path


# Manifest ----------------------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_hash: str
    started: str = field(default_factory=_now)
    finished: str | None = None
    tasks: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)
    version: str = __version__

    def task(self, name: str, status: str, **info) -> None:
        entry = {"name": name, "status": status}
        entry.update(info)
        self.tasks.append(entry)

    @property
    def ok(self) -> bool:
        return all(t["status"] == "ok" for t in self.tasks)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "tool": "magbloch",
            "version": self.version,
            "command": self.command,
            "config_hash": self.config_hash,
            "started": self.started,
            "finished": self.finished,
            "status": "ok" if self.ok else "failed",
            "tasks": self.tasks,
            "outputs": self.outputs,
        }


# Commands ----------------------------------------------------------------------

def _grid(cfg: ScenarioConfig, mode: str, size=None) -> TwistedGrid:
    return TwistedGrid(mode=mode, shape=size or cfg.grid_size, flux=cfg.problem.flux_integer)


def _require(cfg: ScenarioConfig, command: str) -> None:
    """Reject inconsistent command/config combinations before any work."""
    needs_mode = {"bands": "fiber", "scan": "fiber", "pencil": "slab", "crosscheck": "slab"}
    mode = needs_mode.get(command)
    if mode and cfg.grid_mode != mode:
        raise ConfigError(f"command '{command}' needs a {mode}-mode grid, config has "
                          f"'{cfg.grid_mode}'", "grid.mode")
    block = {"bands": cfg.path, "pencil": cfg.pencil_points, "crosscheck": cfg.cross_points}
    if command in block and not block[command]:
        raise ConfigError(f"command '{command}' needs a '{command}' block", "<root>")
    if command != "validate" and cfg.problem.field_strength is not None:
        # Raises FluxQuantizationError for unquantized b.
        build_problem(cfg.problem, strict=True)


def _map(fn, items):
    workers = min(worker_count(), max(1, len(items)))
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def _cmd_validate(cfg, out, manifest):
    problem = build_problem(cfg.problem, strict=False)
    report = validate(problem, samples=cfg.validate_samples,
                      require_symmetry=cfg.require_symmetry)
    manifest.task("validate", "ok" if report.passed else "failed", **report.to_dict())
    if out is not None:
        write_json(out / "validation.json", report.to_dict())
        manifest.outputs["validation"] = "validation.json"


def _cmd_bands(cfg, out, manifest):
    problem = build_problem(cfg.problem)
    table = band_structure(problem, _grid(cfg, "fiber"), cfg.path, cfg.path_bands,
                           tol=cfg.tol("solver"), seed=cfg.seed)
    (out / "bands.csv").write_text(band_csv(table))
    emit_plot_data(table, out / "bands_plot.csv")
    manifest.outputs.update({"bands": "bands.csv", "plot": "bands_plot.csv"})
    _record_kpoint_errors(manifest, "bands", table)


def _record_kpoint_errors(manifest, name, table):
    if table.errors:
        for j, msg in sorted(table.errors.items()):
            manifest.task(f"{name}[k{j}]", "failed", k=table.kpoints[j].tolist(), error=msg)
    else:
        manifest.task(name, "ok", kpoints=len(table.kpoints))


def _cmd_scan(cfg, out, manifest):
    problem = build_problem(cfg.problem)
    grid = _grid(cfg, "fiber")
    report = flat_band_scan(problem, grid, cfg.kgrid, cfg.scan_bands, tol=cfg.tol("solver"),
                            seed=cfg.seed)
    write_json(out / "flat_band_report.json", report.to_dict())
    manifest.outputs["flat_band_report"] = "flat_band_report.json"
    status = "ok" if report.failed_kpoints == 0 else "failed"
    manifest.task("scan", status, failed_kpoints=report.failed_kpoints)


def _pencil_kw(cfg):
    return {"tol_null": cfg.tol("null"), "tol_real": cfg.tol("real"),
            "tol_singular": cfg.tol("singular")}


def _cmd_pencil(cfg, out, manifest):
    problem = build_problem(cfg.problem)
    grid = _grid(cfg, "slab")

    def task(pt):
        try:
            return run_pencil(problem, grid, pt.khat, pt.lam, **_pencil_kw(cfg)), None
        except (DegeneratePencilError, SubspaceError, np.linalg.LinAlgError) as exc:
            return None, exc

    results = _map(task, cfg.pencil_points)
    runs = []
    for i, (pt, (run, exc)) in enumerate(zip(cfg.pencil_points, results)):
        name = f"pencil[{i}]"
        if exc is not None:
            entry = pt.to_dict()
            entry["error"] = str(exc)
            if isinstance(exc, DegeneratePencilError):
                entry["sigma_min_t1"] = exc.sigma_min_t1
            runs.append(entry)
            manifest.task(name, "failed", error=str(exc))
            continue
        runs.append(run.to_dict())
        plot = f"pencil_{i:03d}_multipliers.csv"
        if len(run.report.z_values):
            emit_plot_data(run.multipliers, out / plot)
            manifest.outputs[f"{name}.plot"] = plot
        manifest.task(name, "ok" if run.report.bound_ok else "failed",
                      bound_ok=run.report.bound_ok)
    write_json(out / "pencil.json", {"grid": list(grid.shape), "runs": runs})
    manifest.outputs["pencil"] = "pencil.json"


def _cmd_crosscheck(cfg, out, manifest):
    problem = build_problem(cfg.problem)
    slab = _grid(cfg, "slab")
    fiber = _grid(cfg, "fiber", cfg.cross_fiber_size)

    def task(pt):
        try:
            rep = crosscheck(problem, slab, fiber, pt.khat, pt.lam, n_bands=cfg.cross_bands,
                             nk3=cfg.nk3, allowance=cfg.allowance, tol=cfg.tol("solver"),
                             seed=cfg.seed, **_pencil_kw(cfg))
            return rep, None
        except (DegeneratePencilError, SubspaceError, EigensolverError,
                np.linalg.LinAlgError) as exc:
            return None, exc

    results = _map(task, cfg.cross_points)
    reports = []
    for i, (pt, (rep, exc)) in enumerate(zip(cfg.cross_points, results)):
        name = f"crosscheck[{i}]"
        if exc is not None:
            entry = pt.to_dict()
            entry["error"] = str(exc)
            reports.append(entry)
            manifest.task(name, "failed", error=str(exc))
            continue
        reports.append(rep.to_dict())
        manifest.task(name, "ok" if rep.passed else "failed", distance=rep.distance,
                      tolerance=rep.tolerance)
    write_json(out / "crosscheck.json", {
        "slab_grid": list(slab.shape), "fiber_grid": list(fiber.shape), "nk3": cfg.nk3,
        "reports": reports,
    })
    manifest.outputs["crosscheck"] = "crosscheck.json"


_DISPATCH = {"validate": _cmd_validate, "bands": _cmd_bands, "scan": _cmd_scan,
             "pencil": _cmd_pencil, "crosscheck": _cmd_crosscheck}


def run(command: str, cfg: ScenarioConfig, out=None) -> RunManifest:
    """Run one command; writes outputs and ``manifest.json`` into ``out`` if given."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    _require(cfg, command)
    if command != "validate" and out is None:
        raise ConfigError(f"command '{command}' needs --out")
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(command=command, config_hash=cfg.config_hash)
    _DISPATCH[command](cfg, out, manifest)
    manifest.finished = _now()
    if out is not None:
        missing = [f for f in manifest.outputs.values() if not (out / f).exists()]
        if missing:
            manifest.task("outputs", "failed", missing=missing)
        (out / "manifest.json").write_text(dumps_json(manifest.to_dict()))
    return manifest


def _parse_size(text: str) -> list[int]:
    try:
        parts = [int(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected n1,n2,n3, got {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected n1,n2,n3, got {text!r}")
    return parts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="magbloch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"magbloch {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="scenario config (JSON)")
        p.add_argument("--out", help="output directory", required=name != "validate")
        p.add_argument("--grid", type=_parse_size, help="override grid size n1,n2,n3")
        p.add_argument("--mode", choices=("fiber", "slab"), help="override grid mode")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        data = json.loads(Path(args.config).read_text(), object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        print(f"error: {args.config}:{exc.lineno}:{exc.colno}: {exc.msg}", file=sys.stderr)
        return 2
    except (OSError, ConfigError) as exc:
        print(f"error: {args.config}: {exc}", file=sys.stderr)
        return 2
    if args.grid or args.mode:
        data = dict(data)
        grid = dict(data.get("grid", {})) if isinstance(data.get("grid"), Mapping) else {}
        if args.grid:
            grid["size"] = args.grid
        if args.mode:
            grid["mode"] = args.mode
        data["grid"] = grid
    try:
        cfg = parse_config(data)
        manifest = run(args.command, cfg, args.out)
    except FluxQuantizationError as exc:
        print(f"error: flux not quantized, nothing assembled: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ProblemError, GridError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.out is None:
        sys.stdout.write(dumps_json(manifest.to_dict()))
    else:
        print(f"{args.command}: {'ok' if manifest.ok else 'failed'} -> {args.out}")
    return 0 if manifest.ok else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
