"""Command-line entry point: one JSON config, one subcommand, CSV artifacts.

Usage::

    hopcoal <subcommand> CONFIG.json

``CONFIG`` may also be a ``manifest.json`` written by an earlier run, in which
case the run is repeated with exactly the recorded configuration.

Exit codes: 0 success, 1 validation failure, 2 numerical assertion failure,
3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import platform
import sys
import tempfile
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
import scipy

from . import __version__
from .errors import NumericalError, ValidationError
from .kernels import KERNEL_KEYS, KernelSet, make_kernels
from .kinetic import MIN_POINTS_PER_WIDTH, DensityField, horizon, solve

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_INTERNAL = 0, 1, 2, 3
SUBCOMMANDS = ("harmonic-check", "solve", "horizon", "simulate", "compare", "validate-kernels")
MANIFEST_VERSION = 1
ENV_OUTPUT_DIR = "HOPCOAL_OUTPUT_DIR"
ENV_WORKERS = "HOPCOAL_WORKERS"

MODEL_KEYS = tuple(k for k in KERNEL_KEYS if k not in ("dim", "torus_len"))


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DomainBlock:
    dim: int
    torus_len: float
    grid_pts: int


@dataclass(frozen=True)
class InitialBlock:
    kind: str
    value: Optional[float] = None
    base: Optional[float] = None
    amplitude: Optional[float] = None
    center: Optional[tuple] = None
    width: Optional[float] = None


@dataclass(frozen=True)
class RunBlock:
    T: float
    dt: float
    method: str = "picard"
    tol: float = 1e-8
    guarantee: bool = True
    r: Optional[float] = None
    gamma_margin: float = 0.1
    theta: float = 0.9
    eps: tuple = (1.0,)
    replicas: int = 1
    seed: int = 0
    snapshot_times: Optional[tuple] = None
    cells_per_bin: int = 8
    bootstrap: int = 200
    harmonic_cases: int = 100
    minlos_cases: int = 20
    minlos_samples: int = 100_000
    conjugation_cases: int = 2


@dataclass(frozen=True)
class OutputBlock:
    directory: str = "hopcoal_out"
    formats: tuple = ("csv",)


@dataclass(frozen=True)
class ExperimentConfig:
    model: dict
    domain: DomainBlock
    initial: InitialBlock
    run: RunBlock
    output: OutputBlock = field(default_factory=OutputBlock)

    def kernels(self) -> KernelSet:
        return make_kernels({**self.model, "dim": self.domain.dim, "torus_len": self.domain.torus_len})

    def initial_density(self) -> DensityField:
        d, init = self.domain, self.initial
        if init.kind == "constant":
            return DensityField.constant(d.dim, d.torus_len, d.grid_pts, init.value)
        center = np.asarray(init.center, dtype=float)

        def bump(x):
            disp = (x - center + 0.5 * d.torus_len) % d.torus_len - 0.5 * d.torus_len
            return init.base + init.amplitude * np.exp(-np.sum(disp**2, axis=-1) / (2.0 * init.width**2))

        return DensityField.from_function(d.dim, d.torus_len, d.grid_pts, bump)

    def snapshot_times(self) -> tuple:
        return self.run.snapshot_times if self.run.snapshot_times is not None else (self.run.T,)


BLOCKS = {"model": None, "domain": DomainBlock, "initial": InitialBlock, "run": RunBlock, "output": OutputBlock}
REQUIRED_BLOCKS = ("model", "domain", "initial", "run")


def _fail(key: str, msg: str):
    raise ValidationError(f"{key}: {msg}")


def _number(key: str, v, *, positive=False, nonneg=False, integer=False) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        _fail(key, f"expected a number, got {v!r}")
    if integer and (not float(v).is_integer()):
        _fail(key, f"expected an integer, got {v!r}")
    if not math.isfinite(v):
        _fail(key, f"must be finite, got {v!r}")
    if positive and not v > 0:
        _fail(key, f"must be positive, got {v!r}")
    if nonneg and not v >= 0:
        _fail(key, f"must be nonnegative, got {v!r}")
    return int(v) if integer else float(v)


def _check_keys(block: str, raw: dict, allowed, required=()):
    if not isinstance(raw, dict):
        _fail(block, f"expected an object, got {type(raw).__name__}")
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        _fail(f"{block}.{unknown[0]}", "unknown key")
    for k in required:
        if k not in raw:
            _fail(f"{block}.{k}", "missing required key")


def _required_fields(cls) -> list[str]:
    return [
        f.name
        for f in dataclasses.fields(cls)
        if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
    ]


def _parse_domain(raw: dict) -> DomainBlock:
    _check_keys("domain", raw, [f.name for f in dataclasses.fields(DomainBlock)], _required_fields(DomainBlock))
    dim = _number("domain.dim", raw["dim"], integer=True)
    if dim not in (1, 2):
        _fail("domain.dim", f"must be 1 or 2, got {dim}")
    grid = _number("domain.grid_pts", raw["grid_pts"], integer=True)
    if grid < 8:
        _fail("domain.grid_pts", f"must be at least 8, got {grid}")
    return DomainBlock(dim, _number("domain.torus_len", raw["torus_len"], positive=True), grid)


def _parse_model(raw: dict, domain: DomainBlock) -> dict:
    _check_keys("model", raw, MODEL_KEYS, MODEL_KEYS)
    model = {}
    for k in MODEL_KEYS:
        width = k.startswith(("sigma", "w"))
        model[k] = _number(f"model.{k}", raw[k], positive=width, nonneg=not width)
    try:
        ks = make_kernels({**model, "dim": domain.dim, "torus_len": domain.torus_len})
    except ValidationError as exc:
        raise ValidationError(f"model: {exc}") from None
    widths = ks.active_widths()
    dx = domain.torus_len / domain.grid_pts
    if widths and dx > min(widths) / MIN_POINTS_PER_WIDTH:
        _fail(
            "domain.grid_pts",
            f"spacing {dx:.4g} does not resolve the narrowest kernel width {min(widths):.4g} "
            f"(need {MIN_POINTS_PER_WIDTH} points per width)",
        )
    return model


def _parse_initial(raw: dict, domain: DomainBlock) -> InitialBlock:
    _check_keys("initial", raw, [f.name for f in dataclasses.fields(InitialBlock)], ["kind"])
    kind = raw["kind"]
    if kind == "constant":
        _check_keys("initial", raw, ["kind", "value"], ["value"])
        return InitialBlock("constant", value=_number("initial.value", raw["value"], nonneg=True))
    if kind == "bump":
        _check_keys("initial", raw, ["kind", "base", "amplitude", "center", "width"], ["base", "amplitude", "width"])
        center = raw.get("center", [0.5 * domain.torus_len] * domain.dim)
        if not isinstance(center, (list, tuple)) or len(center) != domain.dim:
            _fail("initial.center", f"expected a list of {domain.dim} coordinates, got {center!r}")
        return InitialBlock(
            "bump",
            base=_number("initial.base", raw["base"], nonneg=True),
            amplitude=_number("initial.amplitude", raw["amplitude"], nonneg=True),
            center=tuple(_number("initial.center", c) for c in center),
            width=_number("initial.width", raw["width"], positive=True),
        )
    _fail("initial.kind", f"must be 'constant' or 'bump', got {kind!r}")


def _parse_run(raw: dict, domain: DomainBlock) -> RunBlock:
    _check_keys("run", raw, [f.name for f in dataclasses.fields(RunBlock)], _required_fields(RunBlock))
    out: dict[str, Any] = {}
    T = out["T"] = _number("run.T", raw["T"], positive=True)
    dt = out["dt"] = _number("run.dt", raw["dt"], positive=True)
    steps = round(T / dt)
    if steps < 1 or not math.isclose(steps * dt, T, rel_tol=1e-9):
        _fail("run.dt", f"must divide T={T:g}, got {dt:g}")
    if "method" in raw:
        if raw["method"] not in ("picard", "rk4"):
            _fail("run.method", f"must be 'picard' or 'rk4', got {raw['method']!r}")
        out["method"] = raw["method"]
    if "tol" in raw:
        out["tol"] = _number("run.tol", raw["tol"], positive=True)
    if "guarantee" in raw:
        if not isinstance(raw["guarantee"], bool):
            _fail("run.guarantee", f"expected true or false, got {raw['guarantee']!r}")
        out["guarantee"] = raw["guarantee"]
    if raw.get("r") is not None:
        out["r"] = _number("run.r", raw["r"], positive=True)
    if "gamma_margin" in raw:
        out["gamma_margin"] = _number("run.gamma_margin", raw["gamma_margin"], positive=True)
    if "theta" in raw:
        theta = _number("run.theta", raw["theta"], positive=True)
        if not theta < 1:
            _fail("run.theta", f"must lie in (0, 1), got {theta}")
        out["theta"] = theta
    if "eps" in raw:
        eps = raw["eps"]
        if not isinstance(eps, (list, tuple)) or not eps:
            _fail("run.eps", f"expected a nonempty list, got {eps!r}")
        vals = tuple(_number("run.eps", e, positive=True) for e in eps)
        if any(e > 1 for e in vals) or any(b >= a for a, b in zip(vals, vals[1:])):
            _fail("run.eps", f"values must lie in (0, 1] and be strictly descending, got {list(vals)}")
        out["eps"] = vals
    if "snapshot_times" in raw and raw["snapshot_times"] is not None:
        st = raw["snapshot_times"]
        if not isinstance(st, (list, tuple)) or not st:
            _fail("run.snapshot_times", f"expected a nonempty list, got {st!r}")
        vals = tuple(_number("run.snapshot_times", t, nonneg=True) for t in st)
        if any(b <= a for a, b in zip(vals, vals[1:])) or vals[-1] > T * (1 + 1e-12):
            _fail("run.snapshot_times", "must be strictly increasing within [0, T]")
        out["snapshot_times"] = vals
    for k, minimum in (
        ("replicas", 1),
        ("seed", 0),
        ("cells_per_bin", 1),
        ("bootstrap", 0),
        ("harmonic_cases", 1),
        ("minlos_cases", 1),
        ("minlos_samples", 100),
        ("conjugation_cases", 1),
    ):
        if k in raw:
            v = _number(f"run.{k}", raw[k], integer=True)
            if v < minimum:
                _fail(f"run.{k}", f"must be at least {minimum}, got {v}")
            out[k] = v
    cpb = out.get("cells_per_bin", RunBlock.cells_per_bin)
    if domain.grid_pts % cpb:
        _fail("run.cells_per_bin", f"must divide domain.grid_pts={domain.grid_pts}, got {cpb}")
    return RunBlock(**out)


def _parse_output(raw: dict) -> OutputBlock:
    _check_keys("output", raw, ["directory", "formats"])
    out: dict[str, Any] = {}
    if "directory" in raw:
        if not isinstance(raw["directory"], str) or not raw["directory"]:
            _fail("output.directory", f"expected a nonempty string, got {raw['directory']!r}")
        out["directory"] = raw["directory"]
    if "formats" in raw:
        fm = raw["formats"]
        if not isinstance(fm, (list, tuple)) or not fm or any(f not in ("csv", "json") for f in fm):
            _fail("output.formats", f"expected a nonempty subset of ['csv', 'json'], got {fm!r}")
        if "csv" not in fm:
            _fail("output.formats", "'csv' is always written and must be listed")
        out["formats"] = tuple(dict.fromkeys(fm))
    return OutputBlock(**out)


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Validate a decoded document and fill defaults."""
    if not isinstance(doc, dict):
        raise ValidationError("config: top level must be an object")
    unknown = sorted(set(doc) - set(BLOCKS))
    if unknown:
        _fail(unknown[0], "unknown key")
    for b in REQUIRED_BLOCKS:
        if b not in doc:
            _fail(b, "missing required block")
    domain = _parse_domain(doc["domain"])
    model = _parse_model(doc["model"], domain)
    initial = _parse_initial(doc["initial"], domain)
    run = _parse_run(doc["run"], domain)
    output = _parse_output(doc.get("output", {}))
    return ExperimentConfig(model, domain, initial, run, output)


def parse_config(text: str) -> ExperimentConfig:
    """Parse a JSON config (or a run manifest carrying one)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config: not valid JSON ({exc})") from None
    if isinstance(doc, dict) and "manifest_version" in doc:
        if "config" not in doc:
            raise ValidationError("manifest: missing 'config'")
        doc = doc["config"]
    return config_from_dict(doc)


def _jsonable(obj):
    if isinstance(obj, tuple):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    return obj


def config_to_dict(cfg: ExperimentConfig) -> dict:
    doc = {
        "model": dict(cfg.model),
        "domain": dataclasses.asdict(cfg.domain),
        "initial": {k: v for k, v in dataclasses.asdict(cfg.initial).items() if v is not None},
        "run": {k: v for k, v in dataclasses.asdict(cfg.run).items() if v is not None},
        "output": dataclasses.asdict(cfg.output),
    }
    return _jsonable(doc)


def emit_config(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# output


def write_atomic(path: Path, text: str):
    """Write ``text`` to ``path`` through a temporary file and an atomic rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


@dataclass
class RunContext:
    cfg: ExperimentConfig
    outdir: Path
    workers: int
    artifacts: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)

    def write_table(self, name: str, header: list[str], rows):
        rows = list(rows)
        text = csv_text(header, rows)
        self.artifacts[f"{name}.csv"] = text
        if "json" in self.cfg.output.formats:
            recs = [dict(zip(header, r)) for r in rows]
            self.artifacts[f"{name}.json"] = json.dumps(_jsonable(recs), indent=1, default=_json_default) + "\n"


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"cannot serialize {type(v).__name__}")


# --------------------------------------------------------------------------
# pipelines; each returns True iff its internal checks passed


def _validate_kernels(ctx: RunContext) -> bool:
    ks = ctx.cfg.kernels()
    d = ctx.cfg.domain
    dx = d.torus_len / d.grid_pts
    axes = [np.arange(d.grid_pts) * dx] * d.dim
    v = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    v = (v + 0.5 * d.torus_len) % d.torus_len - 0.5 * d.torus_len
    cell = dx**d.dim
    checks = [
        ("beta_mass", float(ks.beta(v).sum() * cell), 1.0),
        ("jump_mass", float(ks.jump(v).sum() * cell), 1.0),
        ("c1_integral", float(ks.q1 * ks.pair(v).sum() * cell), ks.c1_int),
        ("c2_integral", float(ks.q2 * ks.jump(v).sum() * cell), ks.c2_int),
        ("phi1_integral", float(ks._phi1(v).sum() * cell), ks.phi1_int),
        ("phi2_integral", float(ks._phi2(v).sum() * cell), ks.phi2_int),
    ]
    rows, ok = [], True
    for name, numeric, exact in checks:
        err = abs(numeric - exact) / max(abs(exact), 1.0)
        passed = err <= 1e-8
        ok &= passed
        rows.append((name, numeric, exact, err, 1e-8, passed))
    ctx.write_table("kernels", ["quantity", "grid_value", "closed_form", "rel_error", "tolerance", "passed"], rows)
    return ok


def _harmonic_check(ctx: RunContext) -> bool:
    from .harmonic import algebra_battery, conjugation_battery, minlos_battery

    run = ctx.cfg.run
    ctx.seeds["harmonic"] = run.seed
    ks = ctx.cfg.kernels()
    rows = []

    def add(name, reports):
        rows.append(
            (
                name,
                len(reports),
                sum(r.passed for r in reports),
                max(r.discrepancy for r in reports),
                max(r.tolerance for r in reports),
                max(r.discrepancy / r.tolerance for r in reports),
                all(r.passed for r in reports),
            )
        )

    for name, reps in algebra_battery(run.harmonic_cases, run.seed).items():
        add(name, reps)
    for variant in ("two_part", "one_point", "two_point"):
        add(f"minlos_{variant}", minlos_battery(variant, run.minlos_cases, run.seed, run.minlos_samples))
    variants = {}
    if ks.q1 > 0:
        variants["q1_only"] = ks.replace(q2=0.0)
    if ks.q2 > 0:
        variants["q2_only"] = ks.replace(q1=0.0)
    if ks.q1 > 0 and ks.q2 > 0:
        variants["mixed"] = ks
    for label, kv in variants.items():
        add(
            f"conjugation_{label}",
            conjugation_battery({label: kv}, run.conjugation_cases, run.seed, points_per_dim=ctx.cfg.domain.grid_pts),
        )
    ctx.write_table("harmonic", ["identity", "cases", "passed_cases", "max_discrepancy", "max_tolerance", "worst_ratio", "passed"], rows)
    return all(r[-1] for r in rows)


def _grid_rows(times, fields, dim: int, dx: float):
    for t, vals in zip(times, fields):
        for idx in np.ndindex(*vals.shape):
            yield (t, *[i * dx for i in idx], vals[idx])


def _coord_names(dim: int) -> list[str]:
    return ["x", "y"][:dim]


def _solve(ctx: RunContext) -> bool:
    cfg, run = ctx.cfg, ctx.cfg.run
    rho0 = cfg.initial_density()
    ks = cfg.kernels()
    path = solve(
        rho0,
        ks,
        run.T,
        run.dt,
        method=run.method,
        tol=run.tol,
        guarantee=run.guarantee,
        r=run.r,
        gamma_margin=run.gamma_margin,
        theta=run.theta,
    )
    snaps = cfg.snapshot_times()
    fields = [path.at(t).values for t in snaps]
    ctx.write_table(
        "density", ["t", *_coord_names(rho0.dim), "rho"], _grid_rows(snaps, fields, rho0.dim, rho0.dx)
    )
    ctx.write_table("mass", ["t", "mass"], zip(path.times, path.masses()))
    if run.method == "picard":
        info = path.info
        wd = info["weighted_distances"] or [math.nan] * len(info["distances"])
        ctx.write_table(
            "picard",
            ["iteration", "sup_distance", "weighted_distance", "guaranteed"],
            [(i + 1, a, b, info["guaranteed"]) for i, (a, b) in enumerate(zip(info["distances"], wd))],
        )
    return bool(np.all(path.values >= -1e-12 * max(1.0, float(np.abs(path.values).max()))))


def _horizon(ctx: RunContext) -> bool:
    run = ctx.cfg.run
    rho0 = ctx.cfg.initial_density()
    r = run.r if run.r is not None else float(rho0.values.max())
    hz = horizon(r, ctx.cfg.kernels(), run.gamma_margin, run.theta)
    ctx.write_table(
        "horizon",
        ["r", "gamma", "f1_slope0", "T_tilde", "T_2star", "T_star", "C", "gamma_margin", "theta"],
        [(hz.r, hz.gamma, hz.f1_slope0, hz.T_tilde, hz.T_2star, hz.T_star, hz.C, run.gamma_margin, run.theta)],
    )
    return hz.f1_slope0 < 0 and hz.C < 1 and hz.T_star > 0


def _simulate(ctx: RunContext) -> bool:
    from .particle import bin_edges, empirical_density, run_replicas

    cfg, run = ctx.cfg, ctx.cfg.run
    rho0 = cfg.initial_density()
    ks = cfg.kernels()
    snaps = cfg.snapshot_times()
    ctx.seeds["simulate"] = {"seed": run.seed, "replica_seed": "[seed, eps_index, replica]"}
    edges = bin_edges(rho0.dim, rho0.torus_len, rho0.grid_pts, run.cells_per_bin)
    count_rows, dens_rows = [], []
    for e_idx, eps in enumerate(run.eps):
        runs = run_replicas(rho0, eps, run.replicas, run.T, snaps, ks, run.seed, tag=(e_idx,), workers=ctx.workers)
        for rep, snap_list in enumerate(runs):
            for s in snap_list:
                count_rows.append((eps, rep, s.time, len(s.positions), eps * len(s.positions)))
        for k, t in enumerate(snaps):
            dens = empirical_density([r[k] for r in runs], edges, rho0.dx)
            centers = [0.5 * (e[1:] + e[:-1]) for e in edges]
            for idx in np.ndindex(*dens.counts.shape):
                dens_rows.append((eps, t, *[centers[a][i] for a, i in enumerate(idx)], dens.estimate[idx]))
    ctx.write_table("particle_counts", ["eps", "replica", "t", "count", "scaled_mass"], count_rows)
    ctx.write_table("empirical_density", ["eps", "t", *_coord_names(rho0.dim), "density"], dens_rows)
    return True


def _compare(ctx: RunContext) -> bool:
    from .particle import nonincreasing_within_ci, vlasov_sweep

    cfg, run = ctx.cfg, ctx.cfg.run
    rho0 = cfg.initial_density()
    ks = cfg.kernels()
    # the sweep reports (and flags) runs beyond the guaranteed horizon instead of refusing them
    ref = solve(
        rho0, ks, run.T, run.dt, method=run.method, tol=run.tol, guarantee=False,
        r=run.r, gamma_margin=run.gamma_margin, theta=run.theta,
    )
    if run.method == "rk4":
        ref.info["guaranteed"] = False
    ctx.seeds["compare"] = {"seed": run.seed, "replica_seed": "[seed, eps_index, replica]"}
    rows = vlasov_sweep(
        run.eps, run.replicas, rho0, run.T, ks, ref, run.cells_per_bin, run.seed, run.bootstrap, ctx.workers
    )
    trend = nonincreasing_within_ci(rows)
    header = ["epsilon", "l1_error", "ci_low", "ci_high", "mean_count", "replicas", "flagged"]
    ctx.write_table("vlasov", header + ["nonincreasing"], [[r[h] for h in header] + [trend] for r in rows])
    return trend


PIPELINES: dict[str, Callable[[RunContext], bool]] = {
    "harmonic-check": _harmonic_check,
    "solve": _solve,
    "horizon": _horizon,
    "simulate": _simulate,
    "compare": _compare,
    "validate-kernels": _validate_kernels,
}


def _workers() -> int:
    raw = os.environ.get(ENV_WORKERS)
    if raw is None:
        return 1
    try:
        w = int(raw)
    except ValueError:
        raise ValidationError(f"{ENV_WORKERS}: expected a positive integer, got {raw!r}") from None
    if w < 1:
        raise ValidationError(f"{ENV_WORKERS}: expected a positive integer, got {raw!r}")
    return w


def dispatch(subcommand: str, cfg: ExperimentConfig, outdir: Optional[Path] = None) -> int:
    """Run one pipeline, write its artifacts and manifest, return the exit status.

    Module errors propagate; :func:`main` turns them into exit codes.
    """
    if subcommand not in PIPELINES:
        raise ValidationError(f"unknown subcommand {subcommand!r}; choose from {', '.join(SUBCOMMANDS)}")
    if outdir is None:
        outdir = Path(os.environ.get(ENV_OUTPUT_DIR) or cfg.output.directory)
    ctx = RunContext(cfg, Path(outdir), _workers())
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    ok = PIPELINES[subcommand](ctx)
    wall = time.perf_counter() - t0
    # everything is computed before anything is written
    for name, text in ctx.artifacts.items():
        write_atomic(ctx.outdir / name, text)
    write_atomic(ctx.outdir / "config.json", emit_config(cfg))
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "subcommand": subcommand,
        "config": config_to_dict(cfg),
        "seeds": ctx.seeds or {"seed": cfg.run.seed},
        "versions": {
            "hopcoal": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "workers": ctx.workers,
        "started_utc": started.isoformat(),
        "wall_clock_s": wall,
        "artifacts": sorted(ctx.artifacts),
        "checks_passed": bool(ok),
    }
    write_atomic(ctx.outdir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if not ok:
        raise NumericalError(f"{subcommand}: internal checks failed (see {ctx.outdir})")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hopcoal", description="Hopping and coalescing particle experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("subcommand", choices=SUBCOMMANDS, help="pipeline to run")
    p.add_argument("config", type=Path, help="JSON config or a manifest.json from an earlier run")
    return p


def _report(kind: str, message: str):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def main(argv: Optional[list[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise ValidationError(f"config: cannot read {args.config} ({exc.strerror})") from None
        cfg = parse_config(text)
        return dispatch(args.subcommand, cfg)
    except ValidationError as exc:
        _report("validation", str(exc))
        return EXIT_VALIDATION
    except NumericalError as exc:
        _report("numerical", str(exc))
        return EXIT_NUMERICAL
    except Exception as exc:  # noqa: BLE001
        _report("internal", f"{type(exc).__name__}: {exc}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
