"""Command line experiment runner.

Subcommands: ``analyze`` (distributed-chain or exact truncated analysis),
``simulate``, ``stability`` (frontier tracing) and ``verify`` (analytic vs
oracle vs simulation on a fixed grid). Every subcommand accepts a config file
and flags; flags win. Exit codes: 0 success, 1 bad input, 2 some point failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import (InstabilityError, RelayModelError, UndefinedDelayError,
                         UnsupportedModeError, ValidationError)
from .model import ArrivalRates, Mode, ProtocolParams
from .oracle import oracle
from .saturated import fixed_point, metrics
from .simulator import SimConfig, replicate, simulate
from .unsaturated import fixed_point_unsat, metrics_unsat, stability_boundary

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "PRESETS", "CSV_COLUMNS",
           "STABILITY_COLUMNS", "SEED_ENV", "main", "run"]

logger = logging.getLogger(__name__)

SEED_ENV = "RELAYNC_SEED"
CSV_COLUMNS = ("mode", "g1", "g2", "q", "q1", "q2", "lam1", "lam2", "m", "provenance", "S", "P",
               "N_R", "D", "converged", "iterations", "seed", "slots", "ci_S", "ci_P", "ci_D")
# the first five are the frontier contract; the parameter echo keeps rows self-describing
STABILITY_COLUMNS = ("lam1", "lam2", "m", "epsilon", "mode", "g1", "g2", "q", "q1", "q2")
COMMANDS = ("analyze", "simulate", "stability", "verify")


class ConfigError(ValidationError):
    pass


def _unit(name, x):
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"{name}={x} out of [0,1]")
    return x


def _arrival(name, x):
    if not 0.0 <= x < 1.0:
        raise ValueError(f"{name}={x} out of [0,1)")
    return x


def _positive(name, x):
    if not x > 0:
        raise ValueError(f"{name}={x} must be > 0")
    return x


def _at_least(lo):
    def check(name, x):
        if x < lo:
            raise ValueError(f"{name}={x} must be >= {lo}")
        return x
    return check


def _choice(*options):
    def check(name, x):
        if x not in options:
            raise ValueError(f"{name}={x!r} must be one of {', '.join(options)}")
        return x
    return check


SWEEP_VARIABLES = ("g1", "g2", "q", "q1", "q2", "k", "lam1", "lam2", "lam")

# section -> key -> (type, check)
SCHEMA = {
    "": {"command": (str, _choice(*COMMANDS)), "preset": (str, None)},
    "params": {
        "mode": (str, _choice("nc", "nonnc")),
        "g1": (float, _unit), "g2": (float, _unit), "q": (float, _unit),
        "q1": (float, _unit), "q2": (float, _unit), "k": (float, _positive),
        "lam1": (float, _arrival), "lam2": (float, _arrival),
    },
    "sweep": {
        "variable": (str, _choice(*SWEEP_VARIABLES)),
        "start": (float, None), "stop": (float, None), "step": (float, _positive),
    },
    "solver": {
        "method": (str, _choice("analytic", "oracle")),
        "m": (int, _at_least(2)), "tol": (float, _positive), "max_iter": (int, _at_least(1)),
        "epsilon": (float, _positive), "cap": (int, _at_least(1)),
        "lam1_start": (float, _arrival), "lam1_stop": (float, _arrival),
        "lam1_step": (float, _positive), "lam2_step": (float, _positive),
        "jobs": (int, _at_least(1)),
    },
    "sim": {
        "horizon": (int, _at_least(2)), "warmup": (int, _at_least(0)),
        "seed": (int, _at_least(0)), "replications": (int, _at_least(1)),
        "batches": (int, _at_least(2)),
    },
    "output": {"out": (str, None)},
}


@dataclass
class ExperimentConfig:
    command: Optional[str] = None
    preset: Optional[str] = None
    params: Dict[str, object] = field(default_factory=dict)
    sweep: Dict[str, object] = field(default_factory=dict)
    solver: Dict[str, object] = field(default_factory=dict)
    sim: Dict[str, object] = field(default_factory=dict)
    output: Dict[str, object] = field(default_factory=dict)

    def section(self, name) -> dict:
        return {"params": self.params, "sweep": self.sweep, "solver": self.solver,
                "sim": self.sim, "output": self.output}[name]

    def set(self, section, key, value):
        if section == "":
            setattr(self, key, value)
        else:
            self.section(section)[key] = value


def _coerce(section, key, raw, where):
    typ, check = SCHEMA[section][key]
    try:
        if typ is int:
            value = int(raw)
        elif typ is float:
            value = float(raw)
        else:
            value = str(raw).strip()
        if typ is float and not math.isfinite(value):
            raise ValueError(f"{key}={raw} is not finite")
        if check is not None:
            value = check(key, value)
    except ValueError as exc:
        msg = str(exc) if "=" in str(exc) else f"{key}: expected {typ.__name__}, got {raw!r}"
        raise ConfigError(f"{where}: {msg}") from None
    return value


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse ``key = value`` lines grouped under ``[section]`` headers.

    ``#`` and ``;`` start comments. Keys before the first header belong to the
    top level (``command``, ``preset``).
    """
    cfg = ExperimentConfig()
    section = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        where = f"{source}:{lineno}"
        stripped = line.split("#", 1)[0].split(";", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {stripped!r}")
            section = stripped[1:-1].strip()
            if section not in SCHEMA or section == "":
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value', got {stripped!r}")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in SCHEMA[section]:
            label = f"[{section}]" if section else "top level"
            raise ConfigError(f"{where}: unknown key {key!r} in {label}")
        cfg.set(section, key, _coerce(section, key, raw, where))
    return cfg


# ---------------------------------------------------------------------------
# presets

def _series(label, **params):
    return {"label": label, **params}


G2_SWEEP = {"variable": "g2", "start": 0.01, "stop": 0.49, "step": 0.01}

PRESETS = {
    "fig8": {
        "command": "analyze",
        "doc": "throughput vs offered traffic, q=0.75, q1=q2=0.4, imbalance k in {1, 2}",
        "series": [_series("k=1", q=0.75, q1=0.4, q2=0.4, k=1.0),
                   _series("k=2", q=0.75, q1=0.4, q2=0.4, k=2.0)],
        "sweep": G2_SWEEP,
    },
    "fig9": {
        "command": "analyze",
        "doc": "throughput vs offered traffic, k=2, q=0.75, q1=q2 in {0.75, 0.4}",
        "series": [_series("q1=q2=0.75", q=0.75, q1=0.75, q2=0.75, k=2.0),
                   _series("q1=q2=0.4", q=0.75, q1=0.4, q2=0.4, k=2.0)],
        "sweep": G2_SWEEP,
    },
    "fig10": {
        "command": "analyze",
        "doc": "delay vs throughput, q=q2=0.75, q1 in {0.45, 0.55, 0.75}, k=2",
        "series": [_series(f"q1={v}", q=0.75, q1=v, q2=0.75, k=2.0) for v in (0.45, 0.55, 0.75)],
        "sweep": G2_SWEEP,
    },
    "fig11": {
        "command": "analyze",
        "doc": "throughput, power and delay vs q1 at q=q2=0.75, g2=0.25, k=2",
        "series": [_series("q1 sweep", q=0.75, q2=0.75, g2=0.25, k=2.0)],
        "sweep": {"variable": "q1", "start": 0.25, "stop": 0.75, "step": 0.05},
    },
    "fig12": {
        "command": "analyze",
        "doc": "delay vs throughput, q=q1=0.75, q2 in {0.05, 0.25, 0.75}, k=2",
        "series": [_series(f"q2={v}", q=0.75, q1=0.75, q2=v, k=2.0) for v in (0.05, 0.25, 0.75)],
        "sweep": G2_SWEEP,
    },
    "fig13": {
        "command": "analyze",
        "doc": "throughput, power and delay vs q2 at q=q1=0.75, g2=0.25, k=2",
        "series": [_series("q2 sweep", q=0.75, q1=0.75, g2=0.25, k=2.0)],
        "sweep": {"variable": "q2", "start": 0.05, "stop": 0.75, "step": 0.05},
    },
    "fig14": {
        "command": "analyze",
        "doc": "throughput, power and delay vs q at q1=q2=0.75, g2=0.25, k=2",
        "series": [_series("q sweep", q1=0.75, q2=0.75, g2=0.25, k=2.0)],
        "sweep": {"variable": "q", "start": 0.4, "stop": 0.75, "step": 0.05},
    },
    "fig15": {
        "command": "stability",
        "doc": ("stability frontier, q=0.7, g1=g2=0.5, m=6: coded with q1=q2=0.7, "
                "uncoded, coded with q1=q2=0.4; coarse grid 0.02 x 0.005"),
        "series": [_series("nc", mode="nc", q=0.7, q1=0.7, q2=0.7, g2=0.5, k=1.0),
                   _series("nonnc", mode="nonnc", q=0.7, g2=0.5, k=1.0),
                   _series("nc-reduced", mode="nc", q=0.7, q1=0.4, q2=0.4, g2=0.5, k=1.0)],
        "solver": {"m": 6, "lam1_step": 0.02, "lam2_step": 0.005},
    },
    "fig16": {
        "command": "stability",
        "doc": ("stability frontier, g2=0.25, k=2, m=6 with q=0.75 (relay probability "
                "chosen so the relay is not the first queue to saturate)"),
        "series": [_series("nc", mode="nc", q=0.75, q1=0.75, q2=0.75, g2=0.25, k=2.0),
                   _series("nonnc", mode="nonnc", q=0.75, g2=0.25, k=2.0),
                   _series("nc-reduced", mode="nc", q=0.75, q1=0.4, q2=0.4, g2=0.25, k=2.0)],
        "solver": {"m": 6, "lam1_step": 0.02, "lam2_step": 0.005},
    },
    "fig17": {
        "command": "stability",
        "doc": "stability frontier, q=0.9, g2=0.1, k=2, m=6",
        "series": [_series("nc", mode="nc", q=0.9, q1=0.9, q2=0.9, g2=0.1, k=2.0),
                   _series("nonnc", mode="nonnc", q=0.9, g2=0.1, k=2.0),
                   _series("nc-reduced", mode="nc", q=0.9, q1=0.4, q2=0.4, g2=0.1, k=2.0)],
        "solver": {"m": 6, "lam1_step": 0.02, "lam2_step": 0.005},
    },
    "fig18": {
        "command": "analyze",
        "doc": "relay delay vs arrival rate, lam1=lam2, q=0.7, g1=g2=0.5, m=6",
        "series": [_series("nonnc", mode="nonnc", q=0.7, g1=0.5, g2=0.5),
                   _series("nc", mode="nc", q=0.7, q1=0.7, q2=0.7, g1=0.5, g2=0.5),
                   _series("nc-reduced", mode="nc", q=0.7, q1=0.4, q2=0.4, g1=0.5, g2=0.5)],
        "sweep": {"variable": "lam", "start": 0.01, "stop": 0.11, "step": 0.01},
        "solver": {"m": 6},
    },
}
PRESETS["fig19"] = dict(PRESETS["fig18"], doc="relay power vs arrival rate, lam1=lam2, q=0.7, "
                                              "g1=g2=0.5, m=6")

DEFAULT_SOLVER = {"method": "analytic", "m": 4, "tol": 1e-8, "max_iter": 500, "epsilon": 1e-3,
                  "cap": 40, "lam1_start": 0.01, "lam1_stop": None, "lam1_step": 0.001,
                  "lam2_step": None, "jobs": 1}
DEFAULT_SIM = {"horizon": 1_000_000, "warmup": None, "replications": 1, "batches": 50}


# ---------------------------------------------------------------------------
# point construction

@dataclass(frozen=True)
class Point:
    params: ProtocolParams
    arrivals: Optional[ArrivalRates]
    label: str = ""


def _grid(start, stop, step) -> List[float]:
    if stop < start:
        raise ConfigError(f"sweep range is empty: start={start} > stop={stop}")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + i * step, 10) for i in range(n)]


def _make_point(values: dict, label="") -> Point:
    v = dict(values)
    mode = Mode.parse(v.get("mode", "nc"))
    if "g2" not in v:
        raise ConfigError("missing required key 'g2' in [params]")
    if "q" not in v:
        raise ConfigError("missing required key 'q' in [params]")
    if "g1" not in v:
        if "k" not in v:
            raise ConfigError("missing required key: give 'g1' or the imbalance factor 'k'")
        v["g1"] = v["k"] * v["g2"]
    q1 = v.get("q1", v["q"]) if mode is Mode.NC else v["q"]
    q2 = v.get("q2", v["q"]) if mode is Mode.NC else v["q"]
    params = ProtocolParams(v["g1"], v["g2"], v["q"], q1, q2, mode)
    has1, has2 = "lam1" in v, "lam2" in v
    if has1 != has2:
        raise ConfigError("give both lam1 and lam2 (unsaturated) or neither (saturated)")
    arrivals = ArrivalRates(v["lam1"], v["lam2"]) if has1 else None
    return Point(params, arrivals, label)


def expand_points(base: dict, sweep: dict, label="") -> List[Point]:
    if not sweep:
        return [_make_point(base, label)]
    missing = [k for k in ("variable", "start", "stop", "step") if k not in sweep]
    if missing:
        raise ConfigError(f"missing required key(s) {', '.join(missing)} in [sweep]")
    var = sweep["variable"]
    points = []
    for x in _grid(sweep["start"], sweep["stop"], sweep["step"]):
        values = dict(base)
        if var == "lam":
            values["lam1"] = values["lam2"] = x
        else:
            values[var] = x
            if var == "g2" and "k" in base:
                values.pop("g1", None)
            if var == "g1":
                values.pop("k", None)
        try:
            points.append(_make_point(values, label))
        except ValidationError as exc:
            raise ConfigError(f"sweep value {var}={x}: {exc}") from None
    return points


# ---------------------------------------------------------------------------
# evaluation

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(round(x, 12))


def _row(point: Point, m, provenance, **values) -> dict:
    p, a = point.params, point.arrivals
    row = dict.fromkeys(CSV_COLUMNS, "")
    row.update(mode=p.mode.value, g1=_fmt(p.g1), g2=_fmt(p.g2), q=_fmt(p.q), q1=_fmt(p.q1),
               q2=_fmt(p.q2), lam1=_fmt(a.lam1 if a else None),
               lam2=_fmt(a.lam2 if a else None), m=_fmt(m), provenance=provenance)
    for key, val in values.items():
        row[key] = _fmt(val)
    return row


def analyze_point(point: Point, solver: dict) -> Tuple[dict, bool]:
    """One CSV row and an ok flag for the distributed-chain or oracle path."""
    method = solver["method"]
    p, a = point.params, point.arrivals
    try:
        if method == "oracle":
            m = oracle(p, a, cap=solver["cap"])
            return _row(point, None, "oracle", S=m.S, P=m.P, N_R=m.N_R, D=m.D, converged=True,
                        iterations=0), True
        if a is None:
            res = fixed_point(p, solver["m"], solver["tol"], solver["max_iter"])
            m = metrics(res)
        else:
            res = fixed_point_unsat(p, a, solver["m"], solver["tol"], solver["max_iter"])
            m = metrics_unsat(res)
    except (InstabilityError, UndefinedDelayError) as exc:
        logger.warning("%s: %s", _describe(point), exc)
        return _row(point, solver["m"] if method == "analytic" else None, method,
                    converged=False), False
    return _row(point, solver["m"], "analytic", S=m.S, P=m.P, N_R=m.N_R, D=m.D,
                converged=res.converged, iterations=res.iterations), res.converged


def simulate_point(point: Point, sim: dict) -> Tuple[dict, bool]:
    cfg = SimConfig(point.params, point.arrivals, horizon=sim["horizon"], warmup=sim["warmup"],
                    seed=sim["seed"], replications=sim["replications"], batches=sim["batches"])
    s = replicate(cfg) if cfg.replications > 1 else simulate(cfg)
    return _row(point, None, "sim", S=s.S, P=s.P, N_R=s.N_R, D=s.D, seed=sim["seed"],
                slots=s.slots, ci_S=s.ci_S, ci_P=s.ci_P, ci_D=s.ci_D), True


def _describe(point: Point) -> str:
    p, a = point.params, point.arrivals
    s = f"{p.mode.value} g1={p.g1:.4g} g2={p.g2:.4g} q={p.q:.4g} q1={p.q1:.4g} q2={p.q2:.4g}"
    if a is not None:
        s += f" lam1={a.lam1:.4g} lam2={a.lam2:.4g}"
    return s


def _map(fn, items, jobs):
    if jobs == 1:
        return [fn(x) for x in items]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=jobs)(delayed(fn)(x) for x in items)


def write_csv(rows: Sequence[dict], columns: Sequence[str], out: Optional[str]):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: r.get(c, "") for c in columns})
    text = buf.getvalue()
    if out and out != "-":
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def summary(rows: Sequence[dict], stream=None):
    stream = stream or sys.stderr
    keys = ("mode", "g1", "g2", "q1", "q2", "lam1", "lam2", "provenance", "S", "P", "D",
            "converged")
    stream.write(" ".join(f"{k:>10}" for k in keys) + "\n")
    for r in rows:
        cells = []
        for k in keys:
            v = r.get(k, "")
            if k in ("S", "P", "D") and v:
                v = f"{float(v):.5g}"
            cells.append(f"{v:>10}")
        stream.write(" ".join(cells) + "\n")


# ---------------------------------------------------------------------------
# commands

def _series_list(cfg: ExperimentConfig) -> List[Tuple[str, dict, dict, dict]]:
    """(label, params, sweep, solver overrides) per series."""
    if cfg.preset is None:
        return [("", dict(cfg.params), dict(cfg.sweep), {})]
    if cfg.preset not in PRESETS:
        raise ConfigError(f"unknown preset {cfg.preset!r}; choose from {', '.join(PRESETS)}")
    pre = PRESETS[cfg.preset]
    out = []
    for s in pre["series"]:
        params = {k: v for k, v in s.items() if k != "label"}
        params.update(cfg.params)
        sweep = dict(pre.get("sweep", {}))
        sweep.update(cfg.sweep)
        out.append((s["label"], params, sweep, dict(pre.get("solver", {}))))
    return out


def _resolve(cfg: ExperimentConfig, section_defaults: dict, section: dict, preset: dict):
    merged = dict(section_defaults)
    merged.update(preset)
    merged.update(section)
    return merged


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from None
    if seed < 0:
        raise ConfigError(f"{SEED_ENV}={raw!r} must be >= 0")
    return seed


def cmd_analyze(cfg: ExperimentConfig) -> int:
    rows, ok = [], True
    for label, params, sweep, solver_pre in _series_list(cfg):
        solver = _resolve(cfg, DEFAULT_SOLVER, cfg.solver, solver_pre)
        points = expand_points(params, sweep, label)
        if solver["method"] == "analytic":
            for pt in points:
                if pt.arrivals is None and pt.params.mode is Mode.NONNC:
                    raise ConfigError("saturated uncoded mode has no analytic model; "
                                      "use 'simulate' or give lam1/lam2")
        results = _map(lambda pt: analyze_point(pt, solver), points, solver["jobs"])
        for row, good in results:
            rows.append(row)
            ok &= good
    write_csv(rows, CSV_COLUMNS, cfg.output.get("out"))
    summary(rows)
    return 0 if ok else 2


def cmd_simulate(cfg: ExperimentConfig) -> int:
    rows = []
    sim = dict(DEFAULT_SIM)
    sim["seed"] = _default_seed()
    sim.update(cfg.sim)
    for label, params, sweep, solver_pre in _series_list(cfg):
        solver = _resolve(cfg, DEFAULT_SOLVER, cfg.solver, solver_pre)
        points = expand_points(params, sweep, label)
        try:
            SimConfig(points[0].params, horizon=sim["horizon"], warmup=sim["warmup"],
                      replications=sim["replications"], batches=sim["batches"])
        except ValidationError as exc:
            raise ConfigError(f"[sim]: {exc}") from None
        rows.extend(r for r, _ in _map(lambda pt: simulate_point(pt, sim), points,
                                       solver["jobs"]))
    write_csv(rows, CSV_COLUMNS, cfg.output.get("out"))
    summary(rows)
    return 0


def cmd_stability(cfg: ExperimentConfig) -> int:
    rows = []
    echo = ("g1", "g2", "q", "q1", "q2")
    for label, params, sweep, solver_pre in _series_list(cfg):
        solver = _resolve(cfg, {**DEFAULT_SOLVER, "m": 6}, cfg.solver, solver_pre)
        params = {k: v for k, v in params.items() if k not in ("lam1", "lam2")}
        point = _make_point(params, label)
        stop = solver["lam1_stop"]
        b = stability_boundary(point.params, m=solver["m"],
                               lam1_range=(solver["lam1_start"], stop),
                               step=solver["lam1_step"], epsilon=solver["epsilon"],
                               lam2_step=solver["lam2_step"], tol=min(solver["tol"], 1e-6),
                               n_jobs=solver["jobs"])
        sys.stderr.write(f"{label or point.params.mode.value}: {len(b.points)} frontier points\n")
        for lam1, lam2 in b.points:
            rows.append({"lam1": _fmt(lam1), "lam2": _fmt(lam2), "m": _fmt(solver["m"]),
                         "epsilon": _fmt(solver["epsilon"]), "mode": point.params.mode.value,
                         **{k: _fmt(getattr(point.params, k)) for k in echo}})
    write_csv(rows, STABILITY_COLUMNS, cfg.output.get("out"))
    return 0


VERIFY_GRIDS = {
    "default": {"q": 0.75, "pairs": ((0.75, 0.75), (0.4, 0.4)), "k": 2.0,
                "g2": (0.1, 0.25, 0.4), "horizon": 10_000_000, "replications": 8},
    "quick": {"q": 0.75, "pairs": ((0.4, 0.4),), "k": 2.0, "g2": (0.25,),
              "horizon": 1_000_000, "replications": 2},
}
ORACLE_TOL = {"S": 0.01, "P": 0.01, "D": 0.03}
SIM_TOL = {"S": 0.02, "P": 0.02, "D": 0.05}


def cmd_verify(cfg: ExperimentConfig, grid: str = "default") -> int:
    if grid not in VERIFY_GRIDS:
        raise ConfigError(f"unknown grid {grid!r}; choose from {', '.join(VERIFY_GRIDS)}")
    g = VERIFY_GRIDS[grid]
    solver = _resolve(cfg, DEFAULT_SOLVER, cfg.solver, {})
    sim = {**DEFAULT_SIM, "horizon": g["horizon"], "replications": g["replications"],
           "seed": _default_seed()}
    sim.update(cfg.sim)
    rows, failures = [], 0
    for q1, q2 in g["pairs"]:
        for g2 in g["g2"]:
            pt = _make_point({"q": g["q"], "q1": q1, "q2": q2, "k": g["k"], "g2": g2})
            a_row, ok = analyze_point(pt, {**solver, "method": "analytic"})
            o_row, _ = analyze_point(pt, {**solver, "method": "oracle"})
            s_row, _ = simulate_point(pt, sim)
            rows += [a_row, o_row, s_row]
            if not ok:
                failures += 1
                continue
            for ref, tol in ((o_row, ORACLE_TOL), (s_row, SIM_TOL)):
                for key, t in tol.items():
                    want = float(ref[key])
                    err = abs(float(a_row[key]) / want - 1)
                    status = "ok" if err <= t else "FAIL"
                    failures += status == "FAIL"
                    sys.stderr.write(
                        f"{status:4} q1={q1} q2={q2} g2={g2} {key} analytic vs "
                        f"{ref['provenance']}: {100 * err:.3f}% (limit {100 * t:g}%)\n")
    write_csv(rows, CSV_COLUMNS, cfg.output.get("out"))
    sys.stderr.write(f"verify: {failures} failure(s)\n")
    return 0 if failures == 0 else 2


# ---------------------------------------------------------------------------
# argument parsing

FLAG_MAP = {  # flag dest -> (section, key)
    "mode": ("params", "mode"), "g1": ("params", "g1"), "g2": ("params", "g2"),
    "q": ("params", "q"), "q1": ("params", "q1"), "q2": ("params", "q2"), "k": ("params", "k"),
    "lam1": ("params", "lam1"), "lam2": ("params", "lam2"),
    "sweep": ("sweep", "variable"), "start": ("sweep", "start"), "stop": ("sweep", "stop"),
    "step": ("sweep", "step"),
    "method": ("solver", "method"), "m": ("solver", "m"), "tol": ("solver", "tol"),
    "max_iter": ("solver", "max_iter"), "epsilon": ("solver", "epsilon"),
    "cap": ("solver", "cap"), "lam1_start": ("solver", "lam1_start"),
    "lam1_stop": ("solver", "lam1_stop"), "lam1_step": ("solver", "lam1_step"),
    "lam2_step": ("solver", "lam2_step"), "jobs": ("solver", "jobs"),
    "horizon": ("sim", "horizon"), "warmup": ("sim", "warmup"), "seed": ("sim", "seed"),
    "replications": ("sim", "replications"), "batches": ("sim", "batches"),
    "out": ("output", "out"), "preset": ("", "preset"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relaync", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file with [section] headers")
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--out", help="CSV path (default: stdout)")
        grp = p.add_argument_group("parameters")
        grp.add_argument("--mode", choices=("nc", "nonnc"))
        for key in ("g1", "g2", "q", "q1", "q2", "k", "lam1", "lam2"):
            grp.add_argument(f"--{key}", type=str)
        if name in ("analyze", "simulate"):
            sw = p.add_argument_group("sweep")
            sw.add_argument("--sweep", choices=SWEEP_VARIABLES, help="variable to sweep")
            for key in ("start", "stop", "step"):
                sw.add_argument(f"--{key}", type=str)
        sv = p.add_argument_group("solver")
        for key in ("m", "tol", "max-iter", "epsilon", "cap", "lam1-start", "lam1-stop",
                    "lam1-step", "lam2-step", "jobs"):
            sv.add_argument(f"--{key}", type=str)
        if name == "analyze":
            sv.add_argument("--method", choices=("analytic", "oracle"))
        sm = p.add_argument_group("simulation")
        for key in ("horizon", "warmup", "seed", "replications", "batches"):
            sm.add_argument(f"--{key}", type=str)
        if name == "verify":
            p.add_argument("--grid", default="default", choices=sorted(VERIFY_GRIDS))
    return parser


def config_from_args(args) -> ExperimentConfig:
    if args.config:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        cfg = parse_config(text, args.config)
    else:
        cfg = ExperimentConfig()
    if cfg.command is not None and cfg.command != args.command:
        raise ConfigError(f"config file is for '{cfg.command}', not '{args.command}'")
    cfg.command = args.command
    for dest, (section, key) in FLAG_MAP.items():
        raw = getattr(args, dest, None)
        if raw is None:
            continue
        value = raw if section == "" else _coerce(section, key, raw, f"--{dest.replace('_', '-')}")
        cfg.set(section, key, value)
    return cfg


def run(cfg: ExperimentConfig, grid: str = "default") -> int:
    if cfg.command == "analyze":
        return cmd_analyze(cfg)
    if cfg.command == "simulate":
        return cmd_simulate(cfg)
    if cfg.command == "stability":
        return cmd_stability(cfg)
    if cfg.command == "verify":
        return cmd_verify(cfg, grid)
    raise ConfigError(f"unknown command {cfg.command!r}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        return run(cfg, getattr(args, "grid", "default"))
    except (ConfigError, UnsupportedModeError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except ValidationError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except RelayModelError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
