"""Command line entry point: ``dptse {simulate,estimate,sweep,tune}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure in at
least one run (other runs still complete and are written).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .estimators import TECHNIQUES
from .scenario import ConfigError, load_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _grid(text: str) -> list[float]:
    """``"0.1,0.5,1"`` or ``"5:11"`` (inclusive integer range)."""
    if ":" in text:
        lo, hi = text.split(":")
        return [float(v) for v in range(int(lo), int(hi) + 1)]
    return [float(v) for v in text.split(",") if v.strip()]


def _seeds(args, cfg):
    return cfg.seeds if args.seed is None else tuple(args.seed)


def _techniques(args, cfg):
    if args.technique in (None, "all"):
        return cfg.techniques
    return (args.technique,)


def _emit(args) -> set[str]:
    return set(args.emit or ["csv", "manifest"])


def cmd_simulate(args, cfg) -> int:
    out = Path(args.out)
    seed = _seeds(args, cfg)[0]
    plant = ex.run_plant(cfg, seed)
    emit = _emit(args)
    if "csv" in emit:
        ex.write_trajectory(out / "trajectory.csv", plant.x, plant.x, cfg.params)
        np.savetxt(out / "inputs.csv", plant.u, delimiter=",", comments="",
                   header="D_in,w_in,rho_out," + ",".join(
                       f"u{i}" for i in range(3, plant.u.shape[1])))
    if "manifest" in emit:
        ex.write_manifest(out / "manifest.json", ex.manifest(cfg, [seed], []))
    print(f"simulated {cfg.duration} steps (seed {seed}) -> {out}")
    return EXIT_OK


def cmd_estimate(args, cfg) -> int:
    out = Path(args.out)
    seeds, techniques = _seeds(args, cfg), _techniques(args, cfg)
    emit = _emit(args)
    results = ex.run_experiment(cfg, techniques, seeds, keep_trace="csv" in emit)
    first = ex.warmup_steps(cfg)
    if "csv" in emit:
        plants = {s: ex.run_plant(cfg, s) for s in seeds}
        for r in results:
            if r.ok:
                tag = f"{r.technique}_seed{r.seed}"
                ex.write_trajectory(out / f"trajectory_{tag}.csv", plants[r.seed].x,
                                    r.estimates, cfg.params, first)
                ex.write_estimate_trace(out / f"trace_{tag}.csv", r.estimates, r.step_times)
        ex.write_report(out / "report.csv", results)
        ex.write_runs(out / "runs.csv", results)
    if "manifest" in emit:
        ex.write_manifest(out / "manifest.json", ex.manifest(cfg, seeds, techniques))
    _print(results)
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERICAL


def cmd_sweep(args, cfg) -> int:
    out = Path(args.out)
    seeds, techniques = _seeds(args, cfg), _techniques(args, cfg)
    if args.axis == "cv":
        grid = [int(v) for v in _grid(args.grid or "5:11")]
        results = ex.sweep_cv_segments(cfg, grid, techniques, seeds)
    else:
        default = "0.1,0.2,0.5,1" if args.axis == "epsilon" else "0.01,0.02,0.05,0.1"
        grid = _grid(args.grid or default)
        results = ex.sweep_privacy(cfg, args.axis, grid, techniques, seeds,
                                   cv_count=args.cv_count)
    emit = _emit(args)
    if "csv" in emit:
        ex.write_report(out / f"sweep_{args.axis}.csv", results)
        ex.write_runs(out / f"sweep_{args.axis}_runs.csv", results)
    if "manifest" in emit:
        ex.write_manifest(out / f"sweep_{args.axis}_manifest.json", ex.manifest(
            cfg, seeds, techniques, {"axis": args.axis, "grid": list(grid),
                                     "cv_count": args.cv_count}))
    _print(results)
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERICAL


def cmd_tune(args, cfg) -> int:
    rows = ex.tune_grid(cfg, args.technique, _grid(args.q_grid), _grid(args.r_scale_grid),
                        _seeds(args, cfg))
    print("q,r_scale,rmse_density,rmse_speed")
    for r in rows:
        print(",".join(f"{v:.6g}" for v in r))
    return EXIT_OK


def _print(results):
    for row in ex.aggregate(results):
        print(f"{row['technique']:>5} axis={row['axis_value']!s:>6} "
              f"rmse_density={row['rmse_density']:.4g} rmse_speed={row['rmse_speed']:.4g} "
              f"step={1e3 * row['mean_step_time_s']:.2f} ms")
    for r in results:
        if not r.ok:
            print(f"FAILED {r.technique} seed={r.seed} axis={r.axis_value}: {r.error}",
                  file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dptse", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, technique=True):
        p.add_argument("--config", help="scenario TOML or run manifest JSON (default: bundled)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, action="append",
                       help="seed (repeatable; default: the config's seeds)")
        p.add_argument("--emit", action="append", choices=["csv", "manifest"],
                       help="outputs to write (repeatable; default: both)")
        if technique:
            p.add_argument("--technique", choices=[*TECHNIQUES, "all"], default="all")

    common(sub.add_parser("simulate", help="run the ground-truth plant"), technique=False)
    common(sub.add_parser("estimate", help="run estimators on one scenario"))
    sw = sub.add_parser("sweep", help="CV-segment or privacy sweep")
    common(sw)
    sw.add_argument("--axis", choices=["cv", "epsilon", "delta"], required=True)
    sw.add_argument("--grid", help="comma list or lo:hi integer range")
    sw.add_argument("--cv-count", type=int, default=5,
                    help="CV segments for privacy sweeps (default 5)")
    tu = sub.add_parser("tune", help="grid search over q and r scaling")
    common(tu, technique=False)
    tu.add_argument("--technique", choices=TECHNIQUES, required=True)
    tu.add_argument("--q-grid", default="1,10,100")
    tu.add_argument("--r-scale-grid", default="1")
    return ap


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "sweep": cmd_sweep,
            "tune": cmd_tune}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ex.NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
