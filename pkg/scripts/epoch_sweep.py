"""Copy-prefix validation Rouge-1 as a function of the epoch budget.

The learning-rate schedule depends on the total step count, so every budget
is a separate run from scratch.

    python3 scripts/epoch_sweep.py --epochs 20 40 60 80 --seeds 0 1
"""
import argparse
import csv
import sys

from tcr.experiments import CopyPrefixSetup, copy_prefix_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, nargs="+", default=[20, 40, 60, 80])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--lr", type=float, default=1e-3)
    args = ap.parse_args()
    w = csv.writer(sys.stdout)
    w.writerow(["epochs", "seed", "r1", "r2", "rl", "best_epoch", "seconds"])
    for ep in args.epochs:
        for seed in args.seeds:
            run = copy_prefix_run(CopyPrefixSetup(epochs=ep, seed=seed, lr=args.lr))
            m = run.metrics
            w.writerow([ep, seed, f"{m['r1']:.4f}", f"{m['r2']:.4f}", f"{m['rl']:.4f}", m["best_epoch"], f"{run.seconds:.0f}"])
            sys.stdout.flush()


if __name__ == "__main__":
    main()
