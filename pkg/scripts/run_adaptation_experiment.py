#!/usr/bin/env python3
"""Adaptation-gain experiment: supervised baseline vs mean-teacher
adaptation vs the EMA-only ablation, over several seeds.

Trains on labeled domains 1+2, adapts toward the unlabeled domain-4
pool, and reports Dice on the held-out domain-4 test subjects plus the
domain-3 validation set.  Writes one CSV row per (seed, arm, model) and
prints a summary table with the per-seed teacher-over-baseline gain.
"""

import argparse
import csv
import math
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from mtseg.config import ExperimentConfig
from mtseg.data import generate_corpus, make_split
from mtseg.trainer import effective_config, evaluate_params, train_loop

ARMS = ("baseline", "adapt", "ablate_ema")
COLUMNS = ("seed", "arm", "model", "domain", "dice", "miou", "hausdorff",
           "epochs", "diverged", "train_seconds")


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="results/adaptation")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--rampup", type=int, default=15)
    ap.add_argument("--base-channels", type=int, default=8)
    ap.add_argument("--groups", type=int, default=4)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--dropout", type=float, default=0.5)
    ap.add_argument("--batch-size", type=int, default=12)
    ap.add_argument("--tau", type=float, default=0.5)
    ap.add_argument("--gamma-max", type=float, default=10.0)
    ap.add_argument("--ablation-alpha-late", type=float, default=0.99,
                    help="late EMA constant for the ablation arm only; at "
                         "short horizons the default 0.999 memory (~1000 "
                         "steps) spans most of the run and plain weight "
                         "averaging helps by itself, which is not what the "
                         "ablation is measuring")
    ap.add_argument("--skip-ablation", action="store_true")
    return ap.parse_args()


def run_arm(split, arm, seed, args):
    extra = {}
    if arm == "ablate_ema":
        extra["ema_alpha_late"] = args.ablation_alpha_late
    cfg = effective_config(ExperimentConfig(
        mode=arm, seed=seed, base_channels=args.base_channels,
        groups=args.groups, alpha_lr=args.lr, dropout_rate=args.dropout,
        batch_size=args.batch_size, threshold_tau=args.tau,
        gamma_max=args.gamma_max, total_epochs=args.epochs,
        rampup_epochs=args.rampup, **extra))
    t0 = time.perf_counter()
    result = train_loop(split, cfg)
    seconds = time.perf_counter() - t0
    rows = []
    for model, params in (("student", result.state.student),
                          ("teacher", result.state.teacher)):
        for domain, samples in ((3, split.validation), (4, split.test)):
            rec = evaluate_params(params, samples, args.tau)
            rows.append({"seed": seed, "arm": arm, "model": model,
                         "domain": domain, "dice": rec.dice, "miou": rec.miou,
                         "hausdorff": rec.hausdorff,
                         "epochs": len(result.log_rows),
                         "diverged": int(result.diverged),
                         "train_seconds": round(seconds, 1)})
    return rows


def main():
    args = parse_args()
    os.makedirs(args.out_dir, exist_ok=True)
    split = make_split(generate_corpus(seed=args.data_seed))
    arms = [a for a in ARMS if not (args.skip_ablation and a == "ablate_ema")]

    all_rows = []
    t0 = time.perf_counter()
    for seed in args.seeds:
        for arm in arms:
            rows = run_arm(split, arm, seed, args)
            all_rows.extend(rows)
            d4 = {r["model"]: r["dice"] for r in rows if r["domain"] == 4}
            print("seed %d %-10s d4 student=%.2f teacher=%.2f" %
                  (seed, arm, d4["student"], d4["teacher"]), flush=True)

    out_csv = os.path.join(args.out_dir, "summary.csv")
    with open(out_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(all_rows)

    def d4_dice(seed, arm, model):
        for r in all_rows:
            if (r["seed"], r["arm"], r["model"], r["domain"]) == (seed, arm, model, 4):
                return r["dice"]
        return math.nan

    gains = [d4_dice(s, "adapt", "teacher") - d4_dice(s, "baseline", "student")
             for s in args.seeds]
    print("\nteacher-over-baseline gain on domain-4 test:")
    for seed, gain in zip(args.seeds, gains):
        print("  seed %d: %+.2f" % (seed, gain))
    print("  mean:   %+.2f  (wall %.0fs)" % (float(np.mean(gains)),
                                             time.perf_counter() - t0))
    print("rows -> %s" % out_csv)


if __name__ == "__main__":
    main()
