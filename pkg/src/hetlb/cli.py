"""Command-line entry point: ``hetlb run | simulate | coupling | fixed-point``."""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

import numpy as np

from .coupling import (
    coupled_dominance_run, coupled_mmn_run, coupled_monotonicity_run, merge_reports,
)
from .desim import (
    SimConfig, simulate_mmn, simulate_pooled_jffs, simulate_separate, simulate_trajectory,
    trajectory_csv,
)
from .errors import HetlbError
from .experiments import parse_policies, run_config
from .fluid import fixed_point_csv, pooled_fixed_point
from .model import QueueState, SystemSpec
from .policy import PolicyId
from .rng import replication_seeds


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _spec_args(p: argparse.ArgumentParser, n: int, lam: float) -> None:
    p.add_argument("--speeds", type=_floats, default=[2.5, 0.625],
                   help="comma-separated pool speeds, fastest first")
    p.add_argument("--fractions", type=_floats, default=[0.2, 0.8],
                   help="comma-separated pool fractions")
    p.add_argument("-n", "--servers", type=int, default=n, help="number of servers N")
    p.add_argument("--lam", type=float, default=lam, help="normalised arrival rate")


def _spec(args) -> SystemSpec:
    return SystemSpec.from_arrays(args.speeds, args.fractions, args.servers, args.lam)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hetlb", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run every experiment in a config file")
    r.add_argument("config", help="INI-style experiment config")
    r.add_argument("--out", default="results", help="output directory")
    r.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    r.add_argument("--seed-base", type=int, default=None, help="override every seed_base")

    s = sub.add_parser("simulate", help="one simulation run; prints a JSON summary")
    _spec_args(s, 1000, 0.7)
    s.add_argument("--system", choices=["separate", "pooled", "mmn"], default="separate")
    s.add_argument("--policy", default="sa-jsq", help="sa-jsq, jsq, sed, sq:d=K or sq2:d1,d2")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--arrivals", type=float, default=300_000)
    s.add_argument("--warmup", type=float, default=0.5)
    s.add_argument("--tail-depth", type=int, default=64)
    s.add_argument("--trajectory", default=None,
                   help="also write a (t, j, i, x) CSV sampled on this grid, e.g. 0:10:0.1")
    s.add_argument("--trajectory-out", default="trajectory.csv")

    c = sub.add_parser("coupling", help="coupled dominance runs; exit 1 on any violation")
    _spec_args(c, 50, 0.9)
    c.add_argument("--which", default="monotonicity,dominance,mmn")
    c.add_argument("--policies", default="sa-jsq,jsq,sq:d=2")
    c.add_argument("--events", type=float, default=1e6)
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("--seed-base", type=int, default=0)

    f = sub.add_parser("fixed-point", help="print the fixed point (j, x1) and z*")
    _spec_args(f, 1000, 0.7)
    return ap


def _cmd_run(args) -> int:
    with open(args.config) as fh:
        text = fh.read()
    summaries = run_config(text, args.out, workers=args.workers, seed_base=args.seed_base)
    ok = True
    for s in summaries:
        tag = "PASS" if s["ok"] else "FAIL"
        print(f"{tag} {s['name']} ({s['kind']})")
        ok &= bool(s["ok"])
    return 0 if ok else 1


def _cmd_simulate(args) -> int:
    spec = _spec(args)
    cfg = SimConfig(spec, PolicyId.parse(args.policy), int(args.arrivals), args.warmup,
                    args.seed, args.tail_depth)
    if args.system == "separate":
        m = simulate_separate(cfg)
    elif args.system == "pooled":
        m = simulate_pooled_jffs(cfg)
    else:
        m = simulate_mmn(cfg)
    out = m.summary()
    out.update({"N": spec.n_servers, "lambda": spec.lam, "policy": str(cfg.policy),
                "system": args.system})
    print(json.dumps(out, indent=2, sort_keys=True))
    if args.trajectory:
        a, b, step = (float(t) for t in args.trajectory.split(":"))
        times = a + step * np.arange(int(round((b - a) / step)) + 1)
        traj = simulate_trajectory(spec, cfg.policy, times, args.seed,
                                   initial=QueueState.empty(spec), depth=args.tail_depth)
        with open(args.trajectory_out, "w") as fh:
            fh.write(trajectory_csv(times, traj))
    return 0


def _cmd_coupling(args) -> int:
    spec = _spec(args)
    which = [w.strip() for w in args.which.split(",") if w.strip()]
    pols = [PolicyId.parse(p) for p in parse_policies(args.policies)]
    events = int(args.events)
    reports = []
    for seed in replication_seeds(args.seed_base, args.seeds):
        if "monotonicity" in which:
            reports.append(coupled_monotonicity_run(
                spec, QueueState.empty(spec), QueueState.uniform(spec, 1), events, seed))
        if "dominance" in which:
            reports += [coupled_dominance_run(spec, p, events, seed) for p in pols]
        if "mmn" in which:
            reports.append(coupled_mmn_run(spec, events, seed))
    for r in reports:
        print(r.verdict())
    kinds = sorted({r.kind for r in reports})
    merged = {k: merge_reports([r for r in reports if r.kind == k]).to_dict() for k in kinds}
    print(json.dumps({"runs": [r.to_dict() for r in reports], "totals": merged},
                     indent=2, sort_keys=True))
    return 0 if all(r.ok for r in reports) else 1


def _cmd_fixed_point(args) -> int:
    spec = _spec(args)
    sys.stdout.write(fixed_point_csv(spec))
    print(f"z_star,{pooled_fixed_point(spec)!r}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    cmds = {"run": _cmd_run, "simulate": _cmd_simulate, "coupling": _cmd_coupling,
            "fixed-point": _cmd_fixed_point}
    try:
        return cmds[args.cmd](args)
    except (HetlbError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted; finished rows are on disk", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
