"""Command line entry point: ``ddsafe validate|run|batch``."""

from __future__ import annotations

import argparse
import csv
import glob
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .scenario import ParseError, ValidationFailed, build_scenario, load_config, run_checks, validate
from .sim import run_closed_loop

OUT_ENV = "DDSAFE_OUT"

AGGREGATE_FIELDS = ["scenario", "file", "passed", "status", "min_h", "min_hv", "max_e2", "max_j",
                    "switch_counts", "measurements", "mean_g_err", "final_g_err", "wall_time", "error"]


def _default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def cmd_validate(path) -> int:
    try:
        cfg = load_config(path)
    except (OSError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    checks = run_checks(cfg)
    for c in checks:
        print(f"[{'PASS' if c.ok else 'FAIL'}] {c.name}: {c.detail}")
    ok = all(c.ok for c in checks)
    print("all checks passed" if ok else "validation failed")
    return 0 if ok else 1


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


def write_plot_csvs(result, sc, out: Path) -> None:
    """Derived CSVs shaped for plotting: positions vs boundary, e2 trace, flags, inputs, g error."""
    log = result.log
    n, m = log.n, log.m
    t = log.column("t")
    X = np.stack([log.column(f"x{i + 1}") for i in range(2 * n)], axis=1)
    sel = list(sc.position_barrier.selector)
    with open(out / "plot_positions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"p{i + 1}" for i in sel] + ["h"])
        for k in range(len(t)):
            w.writerow([t[k], *X[k, sel], log.rows[k][log.header.index("h")]])
    with open(out / "plot_boundary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["angle", "b1", "b2"])
        r = math.sqrt(sc.position_barrier.level)
        for a in np.linspace(0, 2 * math.pi, 361):
            w.writerow([a, r * math.cos(a), r * math.sin(a)])
    e2 = []
    for x in X:
        try:
            e2.append(float(np.linalg.norm(sc.h_v.error(x))))
        except ValueError:
            e2.append(math.nan)
    cols = {
        "plot_e2.csv": (["t", "e2_norm"], lambda k: [e2[k]]),
        "plot_rho.csv": (["t", "rho1", "j"], lambda k: [log.rows[k][log.header.index("rho1")],
                                                      log.rows[k][log.header.index("j")]]),
        "plot_inputs.csv": (["t"] + [f"u{i + 1}" for i in range(m)] + [f"u_nom{i + 1}" for i in range(m)],
                            lambda k: [log.rows[k][log.header.index(c)] for c in
                                       [f"u{i + 1}" for i in range(m)] + [f"u_nom{i + 1}" for i in range(m)]]),
        "plot_g_err.csv": (["t", "g_err"], lambda k: [log.rows[k][log.header.index("g_err")]]),
    }
    for name, (header, fn) in cols.items():
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(len(t)):
                w.writerow([t[k], *fn(k)])


def run_one(path, out_root=None, seed=None, horizon=None, dt=None, safety=True, plots=False):
    """Run one scenario file; returns ``(exit_code, summary)``. Never raises for scenario errors."""
    summary = {"file": str(path), "scenario": Path(path).stem, "status": "error", "errors": []}
    try:
        cfg = load_config(path)
        summary["scenario"] = cfg.name
        if seed is not None:
            cfg.seed = int(seed)
        if horizon is not None:
            cfg.schedule.horizon = float(horizon)
        if dt is not None:
            cfg.schedule.dt = float(dt)
        validate(cfg)
        sc = build_scenario(cfg)
        result = run_closed_loop(sc, safety=safety)
        summary.update(result.summary)
        summary["file"] = str(path)
        root = Path(out_root) if out_root is not None else Path(cfg.output_dir or _default_out())
        out = root / cfg.name
        out.mkdir(parents=True, exist_ok=True)
        result.log.write(out / "trajectory.csv", out / "events.csv")
        if result.evidence is not None:
            (out / "evidence.txt").write_text(result.evidence.to_text())
        if plots:
            write_plot_csvs(result, sc, out)
        summary["out_dir"] = str(out)
        with open(out / "summary.json", "w") as fh:
            json.dump({k: _clean(v) for k, v in summary.items()}, fh, indent=2, default=_json_default)
    except (OSError, ParseError, ValidationFailed, ValueError, RuntimeError, FloatingPointError) as exc:
        summary["errors"].append(f"{type(exc).__name__}: {exc}")
        summary["status"] = "error"
        return 2, summary
    return (0 if summary["status"] == "ok" else 1), summary


def cmd_run(args) -> int:
    code, summary = run_one(args.file, args.out, args.seed, args.horizon, args.dt,
                            safety=not args.no_safety, plots=args.plots)
    for key in ("scenario", "status", "rows", "min_h", "min_hv", "max_e2", "max_j",
                "switch_counts", "mean_g_err", "final_g_err", "wall_time", "out_dir"):
        if key in summary:
            print(f"{key}: {summary[key]}")
    for e in summary.get("errors", []):
        print(f"error: {e}", file=sys.stderr)
    return code


def _batch_job(args):
    path, out = args
    code, summary = run_one(path, out)
    return code, summary


def cmd_batch(pattern, jobs=1, out=None) -> int:
    files = sorted(glob.glob(pattern))
    if not files:
        print(f"error: no scenario matches {pattern!r}", file=sys.stderr)
        return 2
    out_root = Path(out) if out is not None else _default_out()
    work = [(f, str(out_root)) for f in files]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_batch_job, work))
    else:
        results = [_batch_job(w) for w in work]
    out_root.mkdir(parents=True, exist_ok=True)
    agg = out_root / "aggregate.csv"
    with open(agg, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AGGREGATE_FIELDS)
        for code, s in results:
            row = dict(s)
            row["passed"] = int(code == 0)
            row["error"] = "; ".join(s.get("errors", []))
            w.writerow([_agg_value(row.get(k, "")) for k in AGGREGATE_FIELDS])
    for code, s in results:
        print(f"{'PASS' if code == 0 else 'FAIL'} {s['scenario']} ({s['status']})")
    print(f"aggregate written to {agg}")
    return 0 if all(code == 0 for code, _ in results) else 1


def _agg_value(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return json.dumps(v)
    return "" if v is None else v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddsafe", description="Data-driven safe control simulator")
    sub = p.add_subparsers(dest="command", required=True)
    v = sub.add_parser("validate", help="check a scenario file")
    v.add_argument("file")
    r = sub.add_parser("run", help="simulate one scenario")
    r.add_argument("file")
    r.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
    r.add_argument("--seed", type=int)
    r.add_argument("--horizon", type=float)
    r.add_argument("--dt", type=float)
    r.add_argument("--no-safety", action="store_true", help="apply the nominal input only")
    r.add_argument("--plots", action="store_true", help="also write plot-ready CSVs")
    b = sub.add_parser("batch", help="simulate every scenario matching a glob")
    b.add_argument("pattern")
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "validate":
        return cmd_validate(args.file)
    if args.command == "run":
        return cmd_run(args)
    return cmd_batch(args.pattern, args.jobs, args.out)


if __name__ == "__main__":
    sys.exit(main())
