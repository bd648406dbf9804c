"""Declarative experiment configs and the sweep runner behind ``hetlb run``.

Config grammar (INI style, one section per experiment)::

    [name]
    kind = fig1            ; required
    lambdas = 0.1:0.9:0.1  ; inclusive grid "start:stop:step" or a comma list
    n = 1000               ; comma list allowed
    seeds = 5              ; replications per grid point
    arrivals = 3e5
    warmup = 0.5

Every experiment writes ``<name>.csv`` whose rows start with the columns
``seed, N, lambda, policy``, a ``<name>_summary.json`` and one shared
``manifest.json`` (config hash, tool version, per-run seeds). Runs are
seeded from ``replication_seeds(seed_base, seeds)``, so the same config
reproduces byte-identical files for any worker count.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np

from . import __version__
from .bounds import tail_bound, tail_sum_bound, theta_grid, tightness_statistic
from .coupling import coupled_dominance_run, coupled_mmn_run, coupled_monotonicity_run
from .desim import SimConfig, simulate_pooled_jffs, simulate_separate, simulate_trajectory
from .errors import ConfigError, MissingRequired, TypeMismatch, UnknownKey
from .fluid import fixed_point, integrate_fluid, pooled_fixed_point
from .model import QueueState, SystemSpec, TailMeasure, l1_distance
from .policy import PolicyId
from .rng import replication_seeds

KINDS = ("fig1", "fig2", "fig3a", "fig3b", "fixed-point", "fluid-trace", "coupling-check",
         "bounds-check")
POOLED = "pooled-jffs"

FIG1_POOLS = ((2.5, 0.625), (0.2, 0.8))
FIG3B_POOLS = ((4 / 3, 2 / 3), (0.5, 0.5))

# kind -> (pools, lambdas, n grid, policies)
KIND_DEFAULTS = {
    "fig1": (FIG1_POOLS, "0.1:0.9:0.1", "1000", "jsq, sa-jsq"),
    "fig2": (FIG1_POOLS, "0.1:0.9:0.1", "50", "sed, sa-jsq"),
    "fig3a": (FIG1_POOLS, "0.1:0.9:0.1", "1000", "jsq, sa-jsq, sq2:2,2"),
    "fig3b": (FIG3B_POOLS, "0.5, 0.7, 0.9", "50, 100, 200, 400", "sa-jsq"),
    "fixed-point": (FIG1_POOLS, "0.1:0.9:0.1", "1000", "sa-jsq"),
    "fluid-trace": (FIG1_POOLS, "0.7", "1000", "sa-jsq"),
    "coupling-check": (FIG1_POOLS, "0.9", "1000", "sa-jsq, jsq, sq:d=2"),
    "bounds-check": (FIG1_POOLS, "0.5, 0.8", "100, 500", "sa-jsq"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    kind: str
    speeds: tuple[float, ...]
    fractions: tuple[float, ...]
    lambdas: tuple[float, ...]
    n_grid: tuple[int, ...]
    policies: tuple[str, ...]
    seeds: int = 5
    arrivals: int = 300_000
    warmup: float = 0.5
    seed_base: int = 0
    tail_depth: int = 64
    events: int = 1_000_000
    t_end: float = 10.0
    dt: float = 1e-3
    sample_dt: float = 0.1
    initial_level: int = 0
    levels: int = 15
    thetas: tuple[float, ...] = ()
    output: Optional[str] = None

    def spec(self, n: int, lam: float) -> SystemSpec:
        return SystemSpec.from_arrays(self.speeds, self.fractions, n, lam)

    def run_seeds(self) -> list[int]:
        return replication_seeds(self.seed_base, self.seeds)


def _int(text: str) -> int:
    v = float(text)
    if v != int(v):
        raise ValueError(text)
    return int(v)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(";", ",").split(",") if t.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(_int(t) for t in text.split(",") if t.strip())


def parse_grid(text: str) -> tuple[float, ...]:
    """``a:b:step`` (inclusive, rounded to 12 decimals) or a comma list."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(text)
        a, b, s = (float(p) for p in parts)
        if s <= 0 or b < a:
            raise ValueError(text)
        n = int(math.floor((b - a) / s + 1e-9)) + 1
        return tuple(round(a + k * s, 12) for k in range(n))
    return _floats(text)


def parse_policies(text: str) -> tuple[str, ...]:
    out = []
    # split on commas that are not inside an sq2 argument list
    for tok in re.split(r",\s*(?=[a-zA-Z])", text.strip()):
        tok = tok.strip()
        if not tok:
            continue
        if tok.lower() == POOLED:
            out.append(POOLED)
        else:
            out.append(str(PolicyId.parse(tok)))
    return tuple(out)


# key -> (field, parser)
KEYS = {
    "kind": ("kind", str),
    "speeds": ("speeds", _floats),
    "fractions": ("fractions", _floats),
    "lambdas": ("lambdas", parse_grid),
    "lambda": ("lambdas", parse_grid),
    "n": ("n_grid", _ints),
    "policies": ("policies", parse_policies),
    "policy": ("policies", parse_policies),
    "seeds": ("seeds", _int),
    "arrivals": ("arrivals", _int),
    "warmup": ("warmup", float),
    "seed_base": ("seed_base", _int),
    "tail_depth": ("tail_depth", _int),
    "events": ("events", _int),
    "t_end": ("t_end", float),
    "dt": ("dt", float),
    "sample_dt": ("sample_dt", float),
    "initial_level": ("initial_level", _int),
    "levels": ("levels", _int),
    "thetas": ("thetas", parse_grid),
    "output": ("output", str),
}


def _line_of(text: str, section: str, key: Optional[str] = None) -> int:
    in_sec = False
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("["):
            in_sec = s.strip("[] ") == section
            if in_sec and key is None:
                return no
            continue
        if in_sec and key is not None and re.match(rf"{re.escape(key)}\s*[=:]", s, re.I):
            return no
    return 0


def parse_config(text: str) -> list[ExperimentConfig]:
    """Parse and validate every section; defaults fill unspecified keys."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc
    if not cp.sections():
        raise MissingRequired("config has no experiment sections")
    out = []
    for sec in cp.sections():
        items = dict(cp.items(sec))
        for key in items:
            if key not in KEYS:
                raise UnknownKey(f"line {_line_of(text, sec, key)}: unknown key {key!r} "
                                 f"in section [{sec}]")
        if "kind" not in items:
            raise MissingRequired(f"line {_line_of(text, sec)}: section [{sec}] needs 'kind'")
        kind = items["kind"].strip()
        if kind not in KINDS:
            raise TypeMismatch(f"line {_line_of(text, sec, 'kind')}: kind {kind!r} is not one "
                               f"of {', '.join(KINDS)}")
        pools, lams, ns, pols = KIND_DEFAULTS[kind]
        vals = {"name": sec, "kind": kind, "speeds": pools[0], "fractions": pools[1],
                "lambdas": parse_grid(lams), "n_grid": _ints(ns), "policies": parse_policies(pols)}
        for key, raw in items.items():
            if key == "kind":
                continue
            fld, conv = KEYS[key]
            try:
                vals[fld] = conv(raw)
            except (ValueError, ConfigError) as exc:
                raise TypeMismatch(f"line {_line_of(text, sec, key)}: cannot parse {key} = "
                                   f"{raw!r} ({exc})") from exc
        cfg = ExperimentConfig(**vals)
        _validate(cfg, text)
        out.append(cfg)
    return out


def _validate(cfg: ExperimentConfig, text: str) -> None:
    def bad(key, msg):
        raise TypeMismatch(f"line {_line_of(text, cfg.name, key)}: {msg}")

    if not cfg.lambdas:
        bad("lambdas", "lambda grid is empty")
    if not cfg.n_grid or min(cfg.n_grid) < 1:
        bad("n", "N grid must hold positive integers")
    if not cfg.policies:
        bad("policies", "policy list is empty")
    if cfg.seeds < 1:
        bad("seeds", "seeds must be >= 1")
    if cfg.arrivals < 1:
        bad("arrivals", "arrivals must be >= 1")
    if not 0 <= cfg.warmup < 1:
        bad("warmup", "warmup must lie in [0, 1)")
    if len(cfg.speeds) != len(cfg.fractions):
        bad("speeds", "speeds and fractions differ in length")
    try:
        for n in cfg.n_grid:
            for lam in cfg.lambdas:
                spec = cfg.spec(n, lam)
                for p in cfg.policies:
                    if p != POOLED:
                        PolicyId.parse(p).check(spec)
    except (ValueError, ConfigError) as exc:
        raise TypeMismatch(f"section [{cfg.name}]: {exc}") from exc


# --- tasks ---------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _task_sim(cfg: ExperimentConfig, n: int, lam: float, policy: str, seed: int) -> list[dict]:
    spec = cfg.spec(n, lam)
    sc = SimConfig(spec, total_arrivals=cfg.arrivals, warmup_fraction=cfg.warmup, seed=seed,
                   tail_depth=cfg.tail_depth)
    if policy == POOLED:
        m = simulate_pooled_jffs(sc)
    else:
        ref = fixed_point(spec) if cfg.kind == "fig3b" else None
        m = simulate_separate(SimConfig(spec, PolicyId.parse(policy), cfg.arrivals, cfg.warmup,
                                        seed, cfg.tail_depth, reference=ref))
    row = {"seed": seed, "N": n, "lambda": lam, "policy": policy,
           "mean_response_time": m.mean_response_time, "mean_jobs_scaled": m.mean_jobs_scaled,
           "events": m.event_count, "completed": m.completed}
    if cfg.kind == "fig3b":
        xs = fixed_point(spec)
        row["mean_distance"] = m.mean_distance
        row["distance_of_mean"] = l1_distance(m.stationary_tail, xs)[1]
    return [row]


def _task_fixed_point(cfg: ExperimentConfig, n: int, lam: float) -> list[dict]:
    spec = cfg.spec(n, lam)
    x = fixed_point(spec, depth=1)
    z = pooled_fixed_point(spec)
    return [{"seed": "-", "N": n, "lambda": lam, "policy": "sa-jsq", "j": j + 1,
             "x1": float(f"{x.values[0, j]:.15g}"), "z_star": float(f"{z:.15g}")}
            for j in range(spec.n_pools)]


def _initial_measure(cfg: ExperimentConfig, m: int) -> TailMeasure:
    x = np.zeros((max(16, cfg.initial_level + 4), m))
    x[: cfg.initial_level] = 1.0
    return TailMeasure(x)


def _task_fluid(cfg: ExperimentConfig, n: int, lam: float) -> list[dict]:
    spec = cfg.spec(n, lam)
    tr = integrate_fluid(_initial_measure(cfg, spec.n_pools), spec, cfg.t_end, cfg.dt,
                         sample_dt=cfg.sample_dt)
    rows = []
    for t, x in zip(tr.times, tr.values):
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                rows.append({"seed": "-", "N": n, "lambda": lam, "policy": "fluid",
                             "t": float(t), "i": i + 1, "j": j + 1, "x": float(x[i, j])})
    return rows


def _task_trace_sim(cfg: ExperimentConfig, n: int, lam: float, policy: str,
                    seed: int) -> list[dict]:
    spec = cfg.spec(n, lam)
    times = np.arange(0, int(round(cfg.t_end / cfg.sample_dt)) + 1) * cfg.sample_dt
    q0 = QueueState.uniform(spec, cfg.initial_level)
    traj = simulate_trajectory(spec, PolicyId.parse(policy), times, seed, initial=q0,
                               depth=max(16, cfg.initial_level + 4))
    rows = []
    for t, x in zip(times, traj):
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                rows.append({"seed": seed, "N": n, "lambda": lam, "policy": policy,
                             "t": float(t), "i": i + 1, "j": j + 1, "x": float(x[i, j])})
    return rows


def _task_coupling(cfg: ExperimentConfig, n: int, lam: float, seed: int) -> list[dict]:
    spec = cfg.spec(n, lam)
    reports = [coupled_monotonicity_run(spec, QueueState.empty(spec), QueueState.uniform(spec, 1),
                                        cfg.events, seed)]
    for p in cfg.policies:
        if p != POOLED:
            reports.append(coupled_dominance_run(spec, PolicyId.parse(p), cfg.events, seed))
    reports.append(coupled_mmn_run(spec, cfg.events, seed))
    rows = []
    for r in reports:
        name, _, pol = r.kind.partition("[")
        pol = pol.rstrip("]") or ("sa-jsq" if name == "monotonicity" else "-")
        rows.append({"seed": seed, "N": n, "lambda": lam, "policy": pol, "coupling": name,
                     "events": r.events, "violations": r.violations,
                     "verdict": "PASS" if r.ok else "FAIL"})
    return rows


def _task_bounds(cfg: ExperimentConfig, n: int, lam: float, seed: int) -> list[dict]:
    spec = cfg.spec(n, lam)
    m = simulate_separate(SimConfig(spec, total_arrivals=cfg.arrivals,
                                    warmup_fraction=cfg.warmup, seed=seed,
                                    tail_depth=max(cfg.tail_depth, cfg.levels)))
    thetas = cfg.thetas or tuple(theta_grid(lam))
    rows = []
    for th in thetas:
        for l in range(1, cfg.levels + 1):
            for j in range(spec.n_pools):
                emp = float(m.tail_probabilities[j, l - 1])
                rows.append({"seed": seed, "N": n, "lambda": lam, "policy": "sa-jsq",
                             "statistic": "tail", "l": l, "theta": th, "j": j + 1,
                             "empirical": emp, "bound": tail_bound(l, th, j, spec)[0]})
            rows.append({"seed": seed, "N": n, "lambda": lam, "policy": "sa-jsq",
                         "statistic": "tightness", "l": l, "theta": th, "j": "-",
                         "empirical": tightness_statistic(m.stationary_tail, l),
                         "bound": tail_sum_bound(l, th, spec)})
    return rows


def _run_task(task: tuple) -> list[dict]:
    fn, args = task
    return TASKS[fn](*args)


TASKS = {"sim": _task_sim, "fixed": _task_fixed_point, "fluid": _task_fluid,
         "trace": _task_trace_sim, "coupling": _task_coupling, "bounds": _task_bounds}


def build_tasks(cfg: ExperimentConfig) -> list[tuple]:
    seeds = cfg.run_seeds()
    tasks = []
    for lam in cfg.lambdas:
        for n in cfg.n_grid:
            if cfg.kind in ("fig1", "fig2", "fig3a", "fig3b"):
                tasks += [("sim", (cfg, n, lam, p, s)) for p in cfg.policies for s in seeds]
            elif cfg.kind == "fixed-point":
                tasks.append(("fixed", (cfg, n, lam)))
            elif cfg.kind == "fluid-trace":
                tasks.append(("fluid", (cfg, n, lam)))
                tasks += [("trace", (cfg, n, lam, p, s)) for p in cfg.policies
                          if p != POOLED for s in seeds]
            elif cfg.kind == "coupling-check":
                tasks += [("coupling", (cfg, n, lam, s)) for s in seeds]
            elif cfg.kind == "bounds-check":
                tasks += [("bounds", (cfg, n, lam, s)) for s in seeds]
    return tasks


# --- summaries -----------------------------------------------------------------

def _ci(vals) -> tuple[float, float]:
    v = np.asarray(vals, dtype=float)
    if len(v) < 2:
        return float(v.mean()), float("nan")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


def summarize(cfg: ExperimentConfig, rows: list[dict]) -> dict:
    """Aggregate rows per grid point; ``ok`` is False on any verdict failure."""
    out: dict = {"name": cfg.name, "kind": cfg.kind, "ok": True, "points": []}
    if cfg.kind in ("fig1", "fig2", "fig3a", "fig3b"):
        metric = "mean_distance" if cfg.kind == "fig3b" else "mean_response_time"
        groups: dict = {}
        for r in rows:
            groups.setdefault((r["lambda"], r["N"], r["policy"]), []).append(r[metric])
        for (lam, n, p), vals in groups.items():
            mean, se = _ci(vals)
            out["points"].append({"lambda": lam, "N": n, "policy": p, metric: mean,
                                  "stderr": se, "seeds": len(vals)})
    elif cfg.kind == "coupling-check":
        total = sum(r["violations"] for r in rows)
        out["violations"] = total
        out["runs"] = len(rows)
        out["ok"] = total == 0
    elif cfg.kind == "bounds-check":
        groups = {}
        for r in rows:
            key = (r["lambda"], r["N"], r["statistic"], r["l"], r["theta"], r["j"])
            groups.setdefault(key, []).append((r["empirical"], r["bound"]))
        failures = 0
        for key, vals in groups.items():
            mean, se = _ci([v[0] for v in vals])
            bound = vals[0][1]
            ok = mean <= bound + 3 * (0.0 if math.isnan(se) else se)
            failures += not ok
        out["checks"] = len(groups)
        out["failures"] = failures
        out["ok"] = failures == 0
    elif cfg.kind == "fixed-point":
        out["points"] = [{"lambda": r["lambda"], "j": r["j"], "x1": r["x1"], "z_star": r["z_star"]}
                         for r in rows]
    return out


# --- runner ----------------------------------------------------------------------

def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _ordered_results(tasks, workers: int) -> Iterable[list[dict]]:
    if workers <= 1 or len(tasks) <= 1:
        for t in tasks:
            yield _run_task(t)
        return
    with ProcessPoolExecutor(max_workers=workers) as ex:
        yield from ex.map(_run_task, tasks)


def run_experiment(cfg: ExperimentConfig, out_dir: str, workers: int = 1) -> dict:
    """Run one experiment, streaming rows to ``<out_dir>/<name>.csv``.

    Rows are written in task order as soon as they are available, so an
    interrupted sweep leaves every finished row on disk.
    """
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise ConfigError(f"output directory {out_dir!r} is not writable")
    tasks = build_tasks(cfg)
    path = os.path.join(out_dir, f"{cfg.name}.csv")
    rows: list[dict] = []
    writer = None
    with open(path, "w", newline="") as fh:
        for chunk in _ordered_results(tasks, workers):
            for r in chunk:
                if writer is None:
                    writer = csv.writer(fh, lineterminator="\n")
                    writer.writerow(list(r.keys()))
                writer.writerow([_fmt(v) for v in r.values()])
            fh.flush()
            rows.extend(chunk)
    summary = summarize(cfg, rows)
    with open(os.path.join(out_dir, f"{cfg.name}_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def write_manifest(out_dir: str, text: str, cfgs: list[ExperimentConfig]) -> str:
    man = {
        "tool": "hetlb",
        "version": __version__,
        "config_sha256": config_hash(text),
        "experiments": [
            {"name": c.name, "kind": c.kind, "config": _jsonable(asdict(c)),
             "seeds": c.run_seeds(), "csv": f"{c.name}.csv"} for c in cfgs
        ],
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def run_config(text: str, out_dir: str, workers: int = 1,
               seed_base: Optional[int] = None) -> list[dict]:
    cfgs = parse_config(text)
    if seed_base is not None:
        cfgs = [ExperimentConfig(**{**asdict(c), "seed_base": seed_base}) for c in cfgs]
    os.makedirs(out_dir, exist_ok=True)
    write_manifest(out_dir, text, cfgs)
    return [run_experiment(c, c.output or out_dir, workers) for c in cfgs]
