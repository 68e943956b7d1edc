"""Run the desk-scale pipeline and print the headline numbers.

    python scripts/run_desk_pipeline.py OUT_DIR

Stages that already finished in OUT_DIR are skipped, so an interrupted run
can be resumed.  Takes roughly 30-40 minutes on one CPU core.
"""
import argparse
import csv
from pathlib import Path

import numpy as np

from etta.pipeline import DeskConfig, adapt_csv, read_timings, run_desk_pipeline


def mean_post(path):
    rows = list(csv.DictReader(open(path)))
    return float(np.mean([(float(r["post_dice_c1"]) + float(r["post_dice_c2"])) / 2 for r in rows]))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("out_dir")
    args = ap.parse_args()
    cfg = DeskConfig()
    out = Path(args.out_dir)
    run_desk_pipeline(out, cfg)
    print(f"source test Dice       {mean_post(out / 'eval_source.csv'):.4f}")
    for b in cfg.batch_sizes:
        for s in cfg.target_seeds:
            line = [f"target s{s} B={b}:", f"unadapted {mean_post(out / f'eval_target_s{s}.csv'):.4f}"]
            for method in (*cfg.methods, "bnstats"):
                line.append(f"{method} {mean_post(adapt_csv(out, method, b, s)):.4f}")
            print("  ".join(line))
    for stage, seconds in read_timings(out).items():
        print(f"{stage:24s} {seconds:8.1f} s")


if __name__ == "__main__":
    main()
