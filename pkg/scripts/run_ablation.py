"""Memory-size ablation on the desk profile: L x U grid plus the OIM
baseline at a matched memory budget, averaged over seeds."""

import argparse
from pathlib import Path

from memreid.data import DESK_DETECTION_NOISE, DatasetSpec, gen_dataset
from memreid.harness import PROFILES, matched_oim_config, report, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--L", default="64,256", help="comma-separated labeled queue sizes")
    ap.add_argument("--U", default="0,64,256", help="comma-separated unlabeled queue sizes")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    ds = gen_dataset(DatasetSpec())
    base = PROFILES["desk"]
    seeds = [int(s) for s in args.seeds.split(",")]
    grid = {"L": [int(x) for x in args.L.split(",")], "U": [int(x) for x in args.U.split(",")]}
    rows = run_ablation(grid, base, ds, seeds, DESK_DETECTION_NOISE, n_jobs=args.jobs)
    oim = matched_oim_config(base, len(ds.train_identities()))
    rows += run_ablation({"loss_kind": ["oim"], "U": [oim.U]}, base, ds, seeds,
                         DESK_DETECTION_NOISE, n_jobs=args.jobs)
    paths = report(rows, Path(args.out))
    print(paths["summary"].read_text(), end="")


if __name__ == "__main__":
    main()
