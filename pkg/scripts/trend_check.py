"""Evaluate the CV-count and privacy trend checks on the evaluation seeds.

Prints the mean density RMSE per design point and technique, then the two
trend verdicts: RMSE(11 CV) < RMSE(5 CV), and RMSE(eps=0.1) >= 1.2 RMSE(eps=1)
with (max - min) / mean <= 0.10 across delta in {0.01, 0.05, 0.1}.

    python scripts/trend_check.py [--config F] [--seeds 0 1 2 3 4]
"""
import argparse
import warnings

import numpy as np

from dptse import experiments as ex
from dptse.scenario import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", nargs="+", type=int)
    args = ap.parse_args()
    warnings.simplefilter("ignore")
    cfg = load_config(args.config)
    seeds = tuple(args.seeds or cfg.seeds)
    table = {}
    for name, point in ex.design_points(cfg).items():
        res = ex.run_experiment(point, cfg.techniques, seeds, keep_trace=False)
        for tech in cfg.techniques:
            table[tech, name] = float(np.mean([r.rmse_density for r in res
                                               if r.technique == tech]))
    for tech in cfg.techniques:
        t = {name: table[tech, name] for name in ex.design_points(cfg)}
        d = [t["delta0.01"], t["cv5"], t["delta0.1"]]
        spread = (max(d) - min(d)) / np.mean(d)
        print(f"{tech:>5} " + " ".join(f"{k}={v:.2f}" for k, v in t.items())
              + f" | cv11<cv5={t['cv11'] < t['cv5']} eps_ratio={t['eps0.1'] / t['cv5']:.3f}"
              f" delta_spread={spread:.3f}", flush=True)


if __name__ == "__main__":
    main()
