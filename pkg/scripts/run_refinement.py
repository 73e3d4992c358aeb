"""One refinement iteration on copy-prefix data with label-corrupted samples.

Reports which share of the corrupted ids the sample filter dropped.

    python3 scripts/run_refinement.py --epochs 150 --corrupt-fraction 0.2
"""
import argparse
import json
from dataclasses import fields
from pathlib import Path

from tcr.experiments import CorruptedRefineSetup, corrupted_refine_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for f in fields(CorruptedRefineSetup):
        ap.add_argument(f"--{f.name.replace('_', '-')}", type=type(f.default), default=f.default)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    setup = CorruptedRefineSetup(**{f.name: getattr(args, f.name) for f in fields(CorruptedRefineSetup)})
    run = corrupted_refine_run(setup)
    rep = run.result.reports[0]
    print(
        f"dropped {len(rep.dropped_ids)}/{rep.n_before}; corrupted ids dropped {run.recall:.2f} "
        f"of {len(run.corrupted_ids)}; validation {rep.val_scores}  ({run.seconds:.0f}s)"
    )
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        body = {"recall": run.recall, "corrupted_ids": run.corrupted_ids, "report": rep.to_dict()}
        args.out.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
