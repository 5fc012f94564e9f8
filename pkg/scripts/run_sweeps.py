"""Run the CV-count, epsilon and delta sweeps for every technique.

Writes sweep_<axis>.csv, sweep_<axis>_runs.csv and sweep_<axis>_manifest.json
per axis under --out, then prints a mean density RMSE table per axis.

    python scripts/run_sweeps.py --out results/sweeps [--seeds 0 1 2 3 4]
"""
import argparse
import csv
import warnings
from pathlib import Path

from dptse import cli

GRIDS = {"cv": "5:11", "epsilon": "0.1,0.2,0.5,1,2,5,10", "delta": "0.01,0.02,0.05,0.1"}


def print_table(path: Path, axis: str) -> None:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    techs = list(dict.fromkeys(r["technique"] for r in rows))
    values = list(dict.fromkeys(r["axis_value"] for r in rows))
    cell = {(r["technique"], r["axis_value"]): float(r["rmse_density"]) for r in rows}
    print(f"\n{axis:>8} " + " ".join(f"{t:>7}" for t in techs))
    for v in values:
        print(f"{float(v):>8g} " + " ".join(f"{cell[t, v]:>7.2f}" for t in techs))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out", default="results/sweeps")
    ap.add_argument("--axis", nargs="+", choices=list(GRIDS), default=list(GRIDS))
    ap.add_argument("--seeds", nargs="+", type=int)
    args = ap.parse_args()
    warnings.simplefilter("ignore")
    status = 0
    for axis in args.axis:
        argv = ["sweep", "--axis", axis, "--grid", GRIDS[axis], "--technique", "all",
                "--out", args.out]
        if args.config:
            argv += ["--config", args.config]
        for s in args.seeds or []:
            argv += ["--seed", str(s)]
        status = max(status, cli.main(argv))
        print_table(Path(args.out) / f"sweep_{axis}.csv", axis)
    return status


if __name__ == "__main__":
    raise SystemExit(main())
