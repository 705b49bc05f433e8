"""Command-line interface: ``regtrack run | validate | replay``.

Output layout of ``run --out DIR``:

``run_NNNN.csv``
    one row per (t, node): ``t,node,ospa_m,cardinality,true_cardinality,consensus_steps``
``run_NNNN_edges.csv``
    one row per (t, node, neighbor): ``t,node,neighbor,drift_error_m,gamma_error_rad``
``mean_ospa.csv``, ``mean_registration.csv``
    means over runs (same keys, without the run dimension)
``summary.yaml``
    configuration, window means and failures; deterministic given the seed
``timing.yaml``
    wall-clock figures (the only non-deterministic artifact)

Node ids in all files are 1-based. Exit status: 0 success, 1 runtime
failure, 2 invalid scenario or unreadable input.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .errors import ScenarioError
from .jsr import MODES, JsrConfig

NODE_HEADER = ["t", "node", "ospa_m", "cardinality", "true_cardinality", "consensus_steps"]
EDGE_HEADER = ["t", "node", "neighbor", "drift_error_m", "gamma_error_rad"]


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_run(rec, out: Path):
    """Per-run record files."""
    n, T = rec.ospa.shape
    with open(out / f"run_{rec.run:04d}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(NODE_HEADER)
        for t in range(T):
            for i in range(n):
                w.writerow([t + 1, i + 1, _fmt(rec.ospa[i, t]), _fmt(rec.cardinality[i, t]), _fmt(rec.true_cardinality[t]), _fmt(rec.consensus_steps[t])])
    with open(out / f"run_{rec.run:04d}_edges.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EDGE_HEADER)
        for t in range(T):
            for e, (i, j) in enumerate(rec.directed_edges):
                w.writerow([t + 1, i + 1, j + 1, _fmt(rec.drift_error[e, t]), _fmt(rec.gamma_error[e, t])])


def read_table(path: Path) -> dict:
    """CSV file as a dict of numpy columns."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {}
    for k, name in enumerate(header):
        vals = [r[k] for r in body]
        if name in ("t", "node", "neighbor", "cardinality", "true_cardinality", "consensus_steps"):
            cols[name] = np.array([int(v) for v in vals], dtype=int)
        else:
            cols[name] = np.array([float(v) for v in vals], dtype=float)
    return cols


def aggregate(out: Path) -> dict:
    """Means over all run record files in ``out``; writes the mean tables."""
    node_files = sorted(p for p in out.glob("run_*.csv") if not p.name.endswith("_edges.csv"))
    if not node_files:
        raise FileNotFoundError(f"no run records in {out}")
    tabs = [read_table(p) for p in node_files]
    etabs = [read_table(p.with_name(p.stem + "_edges.csv")) for p in node_files]
    ospa = np.mean([t["ospa_m"] for t in tabs], axis=0)
    card = np.mean([t["cardinality"] for t in tabs], axis=0)
    de = np.mean([t["drift_error_m"] for t in etabs], axis=0) if etabs[0]["t"].size else np.zeros(0)
    ge = np.mean([t["gamma_error_rad"] for t in etabs], axis=0) if etabs[0]["t"].size else np.zeros(0)
    base, ebase = tabs[0], etabs[0]
    with open(out / "mean_ospa.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "node", "ospa_m", "mean_cardinality"])
        for k in range(len(ospa)):
            w.writerow([base["t"][k], base["node"][k], _fmt(ospa[k]), _fmt(card[k])])
    with open(out / "mean_registration.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EDGE_HEADER)
        for k in range(len(de)):
            w.writerow([ebase["t"][k], ebase["node"][k], ebase["neighbor"][k], _fmt(de[k]), _fmt(ge[k])])
    return {"n_runs": len(tabs), "t": base["t"], "node": base["node"], "ospa": ospa, "edges": ebase, "drift": de, "gamma": ge}


def _window_means(agg, windows=((50, 150), (200, 301))):
    out = {}
    for a, b in windows:
        sel = (agg["t"] >= a) & (agg["t"] < b)
        per_node = {}
        for node in np.unique(agg["node"]):
            m = sel & (agg["node"] == node)
            if m.any():
                per_node[int(node)] = float(np.mean(agg["ospa"][m]))
        out[f"mean_ospa_m_t{a}_{b - 1}"] = per_node
    return out


def _build_config(args, scenario) -> JsrConfig:
    return JsrConfig.from_scenario(
        scenario,
        mode=args.mode,
        registration=not args.no_registration,
        l_consensus=args.l_consensus,
        n_max=args.nmax,
        consensus_on_time=args.consensus_on_time,
    )


def cmd_validate(args) -> int:
    from .sim.scenario import resolve_scenario_path, validate_file

    path = resolve_scenario_path(args.scenario)
    try:
        violations = validate_file(path)
    except OSError as exc:
        print(f"error: cannot read {path}: {exc}", file=sys.stderr)
        return 2
    if violations:
        for line, msg in violations:
            print(f"{path}:{line}: {msg}")
        print(f"{len(violations)} violation(s)")
        return 2
    print(f"{path}: valid")
    return 0


def cmd_run(args) -> int:
    from .sim.scenario import load_scenario
    from .sim.simulate import run_monte_carlo

    try:
        scenario = load_scenario(args.scenario)
    except OSError as exc:
        print(f"error: cannot read scenario {args.scenario}: {exc}", file=sys.stderr)
        return 2
    except ScenarioError as exc:
        for line, msg in exc.violations:
            print(f"{args.scenario}:{line}: {msg}", file=sys.stderr)
        return 2
    if args.runs < 1:
        print("error: --runs must be at least 1", file=sys.stderr)
        return 2
    try:
        config = _build_config(args, scenario)
    except (TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    workers = int(os.environ.get("REGTRACK_WORKERS", "0")) or None
    t0 = time.perf_counter()
    try:
        records = run_monte_carlo(scenario, config, args.runs, args.seed, workers=workers)
        for rec in records:
            write_run(rec, out)
        agg = aggregate(out)
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    failures = [{"run": r.run, "t": f["t"], "error": f["error"]} for r in records for f in r.failures]
    summary = {
        "scenario": scenario.name,
        "mode": config.mode,
        "registration": config.registers,
        "runs": args.runs,
        "seed": args.seed,
        "horizon_steps": scenario.horizon,
        "l_consensus": config.l_consensus,
        "consensus_on_time_s": config.consensus_on_time,
        "n_max": config.n_max if config.n_max is not None else scenario.n_max,
        "consensus_iterations_total": int(sum(int(r.consensus_steps.sum()) for r in records)),
        **_window_means(agg),
        "failures": failures,
    }
    if len(agg["drift"]):
        last = agg["t"].max()
        sel = agg["edges"]["t"] == last
        summary["final_registration"] = [
            {"node": int(i), "neighbor": int(j), "drift_error_m": float(d), "gamma_error_deg": float(np.rad2deg(g))}
            for i, j, d, g in zip(agg["edges"]["node"][sel], agg["edges"]["neighbor"][sel], agg["drift"][sel], agg["gamma"][sel])
        ]
    (out / "summary.yaml").write_text(yaml.safe_dump(summary, sort_keys=False))
    timing = {
        "wall_time_s": time.perf_counter() - t0,
        "per_run_s": [float(getattr(r, "wall_time", 0.0)) for r in records],
        "mean_node_step_ms": float(np.mean([r.timing.mean() for r in records]) * 1e3),
    }
    (out / "timing.yaml").write_text(yaml.safe_dump(timing, sort_keys=False))
    print(f"wrote {len(records)} run(s) to {out}")
    return 1 if failures else 0


def cmd_replay(args) -> int:
    out = Path(args.out)
    try:
        agg = aggregate(out)
    except (OSError, ValueError, IndexError, KeyError) as exc:
        print(f"error: cannot replay {out}: {exc}", file=sys.stderr)
        return 2
    for key, per_node in _window_means(agg).items():
        print(key + ": " + ", ".join(f"node {k}: {v:.3f}" for k, v in per_node.items()))
    print(f"re-emitted mean tables from {agg['n_runs']} run(s) in {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regtrack", description="Joint distributed sensor registration and multitarget tracking")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run Monte Carlo experiments")
    r.add_argument("--scenario", required=True, help="scenario file or built-in name (ref_tree, ref_cycle)")
    r.add_argument("--mode", choices=MODES, default="jsr-dmt")
    r.add_argument("--runs", type=int, default=1)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default="results")
    r.add_argument("--l-consensus", type=int, default=None)
    r.add_argument("--nmax", type=int, default=None)
    r.add_argument("--consensus-on-time", type=int, default=None)
    r.add_argument("--no-registration", action="store_true", help="inject the true registration parameters")
    r.set_defaults(func=cmd_run)
    v = sub.add_parser("validate", help="check a scenario file")
    v.add_argument("--scenario", required=True)
    v.set_defaults(func=cmd_validate)
    rp = sub.add_parser("replay", help="re-emit mean tables from run records")
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
