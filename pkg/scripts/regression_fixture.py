"""Two-target regression on synthetic band-energy clips under full fine-tuning.

Pre-trains on the classification fixture (or reuses ``--ckpt``), then
fine-tunes on 64 regression clips and reports per-target R².

    python scripts/regression_fixture.py --out runs/regression
"""

import argparse
import json
import logging
from pathlib import Path

from patchifier.experiments import finetune_modes, pretrain_on_manifest, write_class_fixture, write_regression_fixture
from patchifier.finetune import FreezeMode, write_curve


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ckpt", type=Path, help="existing Stage II checkpoint")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--mode", default="full")
    ap.add_argument("--out", type=Path, default=Path("runs/regression"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    ckpt = args.ckpt
    if ckpt is None:
        ckpt = pretrain_on_manifest(write_class_fixture(args.out / "pretrain_data", seed=args.seed), args.out / "pretrain")
    manifest = write_regression_fixture(args.out / "data", seed=args.seed)
    mode = FreezeMode.parse(args.mode)
    report = finetune_modes(ckpt, manifest, modes=(mode,), epochs=args.epochs, seed=args.seed)[mode.value]
    write_curve(args.out / "curve.csv", report.curve)
    (args.out / "report.json").write_text(report.to_json() + "\n")
    print(json.dumps(report.metric, indent=2))


if __name__ == "__main__":
    main()
