"""Train one desk model and report mAP / CMC over growing gallery sizes."""

import argparse
from dataclasses import replace
from pathlib import Path

from memreid.data import DESK_DETECTION_NOISE, DatasetSpec, gen_dataset
from memreid.evalproto import EvalConfig, write_report
from memreid.harness import PROFILES, evaluate_checkpoint, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", default="10,20,50,100,200,400")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/gallery")
    args = ap.parse_args()

    ds = gen_dataset(DatasetSpec())
    sizes = tuple(int(s) for s in args.sizes.split(","))
    ckpt, _ = train(replace(PROFILES["desk"], seed=args.seed), ds)
    reports = evaluate_checkpoint(ckpt, ds, DESK_DETECTION_NOISE, EvalConfig(gallery_sizes=sizes))
    for rep in reports["sweep"]:
        print(f"gallery {rep.gallery_size:>5}: mAP {100 * rep.mAP:6.2f}  rank-1 {100 * rep.cmc[1]:6.2f}")
    print("->", write_report(reports["sweep"], Path(args.out) / "gallery_sweep.csv"))


if __name__ == "__main__":
    main()
