"""Sweep tau, theta and N_a over a suite of synthetic episodes and print mean metrics per grid point.

    python scripts/threshold_sweep.py --episodes 5 --seed 0 > sweep.csv
"""
import argparse
import csv
import sys
import warnings
from itertools import product

import numpy as np

from dle.cli import DEFAULT_GRID
from dle.numerics import make_rng
from dle.pipeline import Config, run_pipeline
from dle.synthetic import SynthSpec, generate_synthetic_episode

METRICS = ("miou", "coverage", "precision", "self_loss")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--episodes", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--points", type=int, default=1024)
    ap.add_argument("--shift", type=float, default=0.6)
    ap.add_argument("--part-spread", type=float, default=0.8)
    args = ap.parse_args(argv)

    spec = SynthSpec(n_points=args.points, fg_fraction=0.3, shift=args.shift, part_spread=args.part_spread, part_dims=4,
                     distractor_count=args.points // 20)
    episodes = [generate_synthetic_episode(spec, make_rng(args.seed + i)) for i in range(args.episodes)]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["tau", "theta", "N_a", *METRICS])
    for tau, theta, n_a in product(DEFAULT_GRID["tau"], DEFAULT_GRID["theta"], DEFAULT_GRID["N_a"]):
        cfg = Config(tau=tau, theta=theta, n_agents=n_a)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            reps = [run_pipeline(ep, cfg, args.seed + i).report for i, ep in enumerate(episodes)]
        means = [np.mean([r[m] for r in reps if r[m] is not None]) for m in METRICS]
        w.writerow([tau, theta, n_a, *(f"{v:.4f}" for v in means)])
    return 0


if __name__ == "__main__":
    sys.exit(main())
