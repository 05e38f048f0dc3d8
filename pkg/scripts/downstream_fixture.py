"""Pre-train on the 64-clip, 4-class synthetic fixture and fine-tune under every freezing mode.

Writes one curve CSV per mode plus ``summary.json``; the per-epoch held-out
accuracy curves are what to compare when asking which mode converges slowest.

    python scripts/downstream_fixture.py --out runs/fixture --epochs 30
"""

import argparse
import json
import logging
import time
from pathlib import Path

from patchifier.experiments import epochs_to_reach, finetune_modes, pretrain_on_manifest, write_class_fixture
from patchifier.finetune import write_curve


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30, help="fine-tuning epochs per mode")
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--out", type=Path, default=Path("runs/fixture"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    start = time.perf_counter()
    manifest = write_class_fixture(args.out / "data", seed=args.seed)
    ckpt = pretrain_on_manifest(manifest, args.out / "pretrain", seed=args.seed)
    pretrain_s = time.perf_counter() - start

    reports = finetune_modes(ckpt, manifest, epochs=args.epochs, lr=args.lr, seed=args.seed)
    summary = {"pretrain_seconds": pretrain_s, "modes": {}}
    for mode, rep in reports.items():
        write_curve(args.out / f"curve_{mode}.csv", rep.curve)
        summary["modes"][mode] = {
            "held_out_accuracy": rep.metric["accuracy"],
            "first_epoch_at_0.9": epochs_to_reach(rep.curve, "eval_metric", 0.9),
            "final_train_loss": rep.curve[-1]["train_loss"],
        }
    summary["total_seconds"] = time.perf_counter() - start
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
