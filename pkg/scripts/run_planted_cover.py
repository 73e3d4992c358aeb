"""Planted-cover run: how often the attention-argmax cover is the planted frame.

    python3 scripts/run_planted_cover.py --epochs 150 --layer -1 --heads mean
"""
import argparse
import json
from dataclasses import fields
from pathlib import Path

from tcr.experiments import PlantedCoverSetup, planted_cover_run


def _layer(s: str):
    return None if s == "mean" else int(s)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for f in fields(PlantedCoverSetup):
        flag = f"--{f.name.replace('_', '-')}"
        if f.name == "layer":
            ap.add_argument(flag, type=_layer, default=f.default, help="layer index or 'mean'")
        else:
            ap.add_argument(flag, type=type(f.default), default=f.default)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    setup = PlantedCoverSetup(**{f.name: getattr(args, f.name) for f in fields(PlantedCoverSetup)})
    run = planted_cover_run(setup)
    m = run.metrics
    print(f"cover accuracy {m['cover_accuracy']:.2f} ({m['hits']}/{m['n_test']})  best epoch {m['best_epoch']}  ({run.seconds:.0f}s)")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps({"metrics": m, "log": run.log}, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
