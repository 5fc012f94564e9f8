"""Pick one process-noise scale q per technique.

For each technique, q is chosen from a grid to minimise the mean density RMSE
over the trend-check design points, on tuning seeds kept disjoint from the
evaluation seeds of the scenario.

    python scripts/tune_q.py --seeds 100 101 102 --q-grid 3 10 30 100 300
"""
import argparse
import warnings

from dptse import experiments as ex
from dptse.estimators import TECHNIQUES
from dptse.scenario import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--technique", nargs="+", default=list(TECHNIQUES))
    ap.add_argument("--seeds", nargs="+", type=int, default=[100, 101, 102])
    ap.add_argument("--q-grid", nargs="+", type=float, default=[3, 10, 30, 100, 300])
    args = ap.parse_args()
    warnings.simplefilter("ignore")
    cfg = load_config(args.config)
    for tech in args.technique:
        rows = ex.tune_design_points(cfg, tech, args.q_grid, args.seeds)
        for q, mean, per in sorted(rows):
            cells = " ".join(f"{k}={v:.2f}" for k, v in per.items())
            print(f"{tech:>5} q={q:<6g} mean={mean:.2f} {cells}", flush=True)
        print(f"{tech:>5} best q={rows[0][0]:g}", flush=True)


if __name__ == "__main__":
    main()
