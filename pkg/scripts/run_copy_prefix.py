"""Copy-prefix run on the tiny model; prints validation Rouge and writes a report.

    python3 scripts/run_copy_prefix.py --epochs 20 --out runs/copy_prefix.json
"""
import argparse
import json
from dataclasses import fields
from pathlib import Path

from tcr.experiments import CopyPrefixSetup, copy_prefix_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for f in fields(CopyPrefixSetup):
        ap.add_argument(f"--{f.name.replace('_', '-')}", type=type(f.default), default=f.default)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    setup = CopyPrefixSetup(**{f.name: getattr(args, f.name) for f in fields(CopyPrefixSetup)})
    run = copy_prefix_run(setup)
    m = run.metrics
    print(f"R-1 {m['r1']:.4f}  R-2 {m['r2']:.4f}  R-L {m['rl']:.4f}  best epoch {m['best_epoch']}  ({run.seconds:.0f}s)")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps({"metrics": m, "log": run.log}, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
