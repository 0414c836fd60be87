"""Momentum sweep on the desk profile; writes momentum_table.csv."""

import argparse
from pathlib import Path

from memreid.data import DESK_DETECTION_NOISE, DatasetSpec, gen_dataset
from memreid.harness import PROFILES, report, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--m", default="0,0.5,0.9,0.99,0.999,0.9999")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="runs/momentum")
    args = ap.parse_args()

    ds = gen_dataset(DatasetSpec())
    seeds = [int(s) for s in args.seeds.split(",")]
    grid = {"m": [float(x) for x in args.m.split(",")]}
    rows = run_ablation(grid, PROFILES["desk"], ds, seeds, DESK_DETECTION_NOISE, n_jobs=args.jobs)
    paths = report(rows, Path(args.out))
    print(paths["momentum_table"].read_text(), end="")


if __name__ == "__main__":
    main()
