"""Overfit smoke: Stage I on 50 fixed patches, then Stage II on 8 fixed grids.

    python scripts/overfit_smoke.py --seed 0 --out runs/overfit
"""

import argparse
import csv
import json
from pathlib import Path

from patchifier.experiments import overfit_smoke


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/overfit"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    s1, s2 = overfit_smoke(seed=args.seed)
    for name, res in (("stage1", s1), ("stage2", s2)):
        with open(args.out / f"{name}_history.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "eval_loss"])
            w.writerows(res.history)
    summary = {
        "stage1": {"reached": s1.reached, "steps": s1.steps, "initial_mse": s1.initial, "final_mse": s1.final, "seconds": s1.seconds},
        "stage2": {"reached": s2.reached, "steps": s2.steps, "initial_loss": s2.initial, "final_loss": s2.final, "seconds": s2.seconds},
    }
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
