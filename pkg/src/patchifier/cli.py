"""``patchifier`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric error (non-finite values, failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import dsp
from .config import TrainConfig, build_config, parse_config_text
from .datapipe import PATCH_W, load_manifest, patchify, split_for, synth_clip, synth_regression_clip, write_manifest
from .errors import ConfigError, DataError, NumericError, PatchifierError
from .finetune import (
    FreezeMode,
    eval_split_name,
    load_finetuned,
    load_split,
    metric_for,
    predict,
    run_finetune,
    save_finetuned,
)
from .pretrain import load_pretrained, pretrain, sample_mask, stage2_forward

log = logging.getLogger("patchifier")

GRADCHECK_TOL = 1e-4


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this codebase reserves 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _global_flags() -> argparse.ArgumentParser:
    # Defaults are suppressed so a flag given before the subcommand is not
    # clobbered by the subparser's copy of the same flag.
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (overrides config)")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="BLAS thread cap (0 = library default)")
    p.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="'key = value' config file")
    p.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS, help="only log warnings")
    return p


def _training_overrides(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides (flag beats file)")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int, dest="batch_size")
    g.add_argument("--n-patches", type=int, dest="n_patches")
    g.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="any other config key; may be repeated"
    )


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    defaults = TrainConfig()
    parser = _Parser(
        prog="patchifier",
        parents=[common],
        description="Patch-based self-supervised spectrogram models.",
        epilog="config defaults: " + ", ".join(f"{k}={v}" for k, v in defaults.to_dict().items()),
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, help_text):
        return sub.add_parser(
            name, help=help_text, description=help_text, parents=[common], formatter_class=argparse.ArgumentDefaultsHelpFormatter
        )

    p = add("preprocess", "convert a directory of WAV files to .spg caches")
    p.add_argument("--in", dest="src", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sr", type=int, default=dsp.SAMPLE_RATE)
    p.add_argument("--mels", type=int, default=dsp.N_MELS)
    p.add_argument("--hop", type=int, default=dsp.HOP)
    p.add_argument("--nfft", type=int, default=dsp.N_FFT)

    p = add("synth", "write a synthetic WAV fixture and manifest.csv")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--task", choices=("cls", "reg"), default="cls")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=32, dest="per_class")
    p.add_argument("--count", type=int, default=64, help="number of clips for --task reg")
    p.add_argument("--seconds", type=float, default=3.0)

    p = add("pretrain1", "stage I: patch autoencoder on random crops")
    p.add_argument("--data", type=Path, required=True, help="directory of .spg (or .wav) files")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path)
    _training_overrides(p)

    p = add("pretrain2", "stage II: masked-sequence reconstruction")
    p.add_argument("--init", type=Path, help="stage I checkpoint")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path)
    p.add_argument("--allow-cold-start", action="store_true")
    _training_overrides(p)

    p = add("finetune", "train a task head on a stage II checkpoint")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--mode", default="linear-probe", help="linear-probe | freeze-fe | freeze-bottleneck | full")
    p.add_argument("--task", choices=("cls", "reg"), default="cls")
    p.add_argument("--out", type=Path, required=True)
    _training_overrides(p)

    p = add("evaluate", "score a fine-tuned model on a manifest split")
    p.add_argument("--ckpt", type=Path, required=True, help="finetune output directory")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", help="defaults to valid if present, else test")

    p = add("reconstruct", "mask a clip and write original / masked / reconstructed PGMs")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--spg", type=Path, required=True)
    p.add_argument("--mask-ratio", type=float, default=0.75, dest="mask_ratio")
    p.add_argument("--n-patches", type=int, dest="n_patches", help="default: as many as fit")
    p.add_argument("--out", type=Path, required=True)

    p = add("gradcheck", "finite-difference check of every differentiable op")
    p.add_argument(
        "--scope", default="all", help="all | ops | composites | comma-separated check names"
    )
    p.add_argument("--list", action="store_true", help="list check names and exit")
    return parser


# ---------------------------------------------------------------------------
# helpers


def _resolve_config(args, base: dict | None = None, **fixed) -> TrainConfig:
    """Layering, lowest first: ``base``, the ``--config`` file, ``--set``, explicit flags."""
    raw = dict(base or {})
    path = getattr(args, "config", None)
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file {path} not found")
        raw.update(parse_config_text(Path(path).read_text(), str(path)))
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip().replace("-", "_")] = v.strip()
    overrides = dict(fixed)
    for key in ("epochs", "lr", "batch_size", "n_patches", "seed", "threads"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    return build_config(raw, **overrides)


def _spectrogram_files(root: Path) -> list[Path]:
    if not root.is_dir():
        raise DataError(f"data directory {root} not found")
    files = sorted(root.rglob("*.spg")) or sorted(root.rglob("*.wav"))
    if not files:
        raise DataError(f"{root}: no .spg or .wav files")
    return files


def _load_corpus(root: Path, min_width: int | None = None) -> list[dsp.Spectrogram]:
    spgs = []
    for path in _spectrogram_files(root):
        s = dsp.load_spectrogram(path)
        if min_width is not None:
            dsp.check_pretrain_width(s, min_width)
        spgs.append(s)
    log.info("loaded %d spectrograms from %s", len(spgs), root)
    return spgs


def write_pgm(path: Path, image: np.ndarray) -> None:
    """Binary greyscale PGM; values in [-1, 1] map linearly to [0, 255]."""
    img = np.clip(np.rint((np.asarray(image, np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise DataError(f"{path}: not an 8-bit binary PGM")
    w, h = (int(x) for x in dims.split())
    return np.frombuffer(body, np.uint8).reshape(h, w)


def _grid_image(patches: np.ndarray) -> np.ndarray:
    """(n, 1, 64, 32) patches -> (64, n*32) image, lowest mel band on the bottom row."""
    return np.concatenate(list(patches[:, 0]), axis=1)[::-1]


# ---------------------------------------------------------------------------
# subcommands


def cmd_preprocess(args) -> int:
    src, out = args.src, args.out
    if not src.is_dir():
        raise DataError(f"input directory {src} not found")
    wavs = sorted(src.rglob("*.wav"))
    if not wavs:
        raise DataError(f"{src}: no .wav files")
    if out.resolve() == src.resolve():
        raise UsageError("--out must differ from --in so inputs are never overwritten")
    for wav in wavs:
        rel = wav.relative_to(src).with_suffix(".spg")
        spg = dsp.spectrogram_from_waveform(
            dsp.load_wav(wav), sample_rate=args.sr, n_mels=args.mels, hop=args.hop, n_fft=args.nfft
        )
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        dsp.write_spg(out / rel, spg)
        log.info("%s -> %s (W=%d, clamped=%d)", wav, out / rel, spg.width, spg.clamped)
    manifest = src / "manifest.csv"
    if manifest.exists():
        with open(manifest, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        for r in rows:
            if r[0].lower().endswith(".wav"):
                r[0] = r[0][:-4] + ".spg"
        write_manifest(out / "manifest.csv", rows)
    print(f"wrote {len(wavs)} spectrograms to {out}")
    return 0


def cmd_synth(args) -> int:
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    seed = getattr(args, "seed", 0)
    rows = []
    if args.task == "cls":
        if args.classes < 2 or args.per_class < 1:
            raise UsageError("--classes must be >= 2 and --per-class >= 1")
        for c in range(args.classes):
            for i in range(args.per_class):
                name = f"class{c}_{i:03d}.wav"
                clip_seed = seed * 1_000_003 + c * 10_007 + i
                dsp.write_wav(out / name, synth_clip(c, clip_seed, args.classes, args.seconds))
                rows.append((name, c, split_for(i)))
    else:
        if args.count < 2:
            raise UsageError("--count must be >= 2")
        for i in range(args.count):
            name = f"reg_{i:03d}.wav"
            wave, (arousal, valence) = synth_regression_clip(seed * 1_000_003 + i, seconds=args.seconds)
            dsp.write_wav(out / name, wave)
            rows.append((name, repr(arousal), repr(valence), split_for(i)))
    write_manifest(out / "manifest.csv", rows)
    print(f"wrote {len(rows)} clips and {out / 'manifest.csv'}")
    return 0


def cmd_pretrain(args, stage: int) -> int:
    cfg = _resolve_config(args, stage=stage)
    min_width = 2 * PATCH_W if stage == 1 else None
    spgs = _load_corpus(args.data, min_width)
    init = getattr(args, "init", None)
    path = pretrain(
        cfg, spgs, args.out, init=init, resume=args.resume, allow_cold_start=getattr(args, "allow_cold_start", False)
    )
    print(f"wrote {path}")
    return 0


def cmd_finetune(args) -> int:
    model, meta = load_pretrained(args.ckpt)
    if meta.get("stage") != "2":
        log.warning("%s reports stage %s, not a stage II checkpoint", args.ckpt, meta.get("stage"))
    base = {k[len("config.") :]: v for k, v in meta.items() if k.startswith("config.")}
    base.pop("stage", None)
    cfg = _resolve_config(args, base)
    shape_keys = ("fe_channels", "hidden", "layers", "heads", "ffn", "max_seq_len")
    if any(getattr(cfg, k) != getattr(model.cfg, k) for k in shape_keys):
        raise UsageError(f"model shape keys {shape_keys} must match the checkpoint {args.ckpt}")
    log.info("resolved config:\n%s", cfg.to_text())
    mode = FreezeMode.parse(args.mode)
    manifest = load_manifest(args.manifest)
    if manifest.task != args.task:
        raise UsageError(f"--task {args.task} but {args.manifest} is a {manifest.task} manifest")
    cache: dict = {}
    train = load_split(manifest, "train", cfg.n_patches, cache)
    held = load_split(manifest, eval_split_name(manifest), cfg.n_patches, cache)
    n_out = manifest.n_classes if args.task == "cls" else 2
    head, report = run_finetune(cfg, model, train, held, mode, args.task, n_out)
    save_finetuned(args.out, cfg, model, head, args.task, mode, report)
    print(report.to_json())
    return 0


def cmd_evaluate(args) -> int:
    model, head, meta, cfg = load_finetuned(args.ckpt)
    manifest = load_manifest(args.manifest)
    task = meta["task"]
    if manifest.task != task:
        raise DataError(f"checkpoint was trained for {task} but {args.manifest} is a {manifest.task} manifest")
    split = args.split or eval_split_name(manifest)
    data = load_split(manifest, split, cfg.n_patches)
    if len(data.grids) == 0:
        raise DataError(f"{args.manifest}: no usable clips in split {split!r}")
    metric = metric_for(task, predict(model, head, data.grids), data.labels)
    out = {"task": task, "mode": meta.get("mode"), "split": split, "n": len(data.grids), "metric": metric}
    curve = Path(args.ckpt) / "curve.csv" if Path(args.ckpt).is_dir() else None
    if curve is not None and curve.exists():
        with open(curve, newline="") as fh:
            out["curve"] = list(csv.DictReader(fh))
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def cmd_reconstruct(args) -> int:
    model, _ = load_pretrained(args.ckpt)
    spg = dsp.load_spectrogram(args.spg)
    grid = patchify(spg)
    n = args.n_patches or min(grid.n, model.cfg.max_seq_len - 1)
    if grid.n < 2 or n < 2:
        raise DataError(f"{args.spg}: clip too short, need at least 2 patches of width {PATCH_W}")
    if n > grid.n:
        raise DataError(f"{args.spg}: only {grid.n} patches, asked for {n}")
    if n + 1 > model.cfg.max_seq_len:
        raise UsageError(f"--n-patches {n} exceeds max_seq_len {model.cfg.max_seq_len} - 1")
    patches = grid.array()[:n]
    plan = sample_mask(n, args.mask_ratio, np.random.default_rng(getattr(args, "seed", 0)))
    out = stage2_forward(patches[None], model, plan.flags[None], training=False)
    recon = out.recon.data[0]
    masked_view = patches.copy()
    masked_view[plan.flags] = 0.0
    args.out.mkdir(parents=True, exist_ok=True)
    for name, arr in (("original", patches), ("masked", masked_view), ("reconstructed", recon)):
        write_pgm(args.out / f"{name}.pgm", _grid_image(arr))
    per_patch = ((recon.astype(np.float64) - patches) ** 2).reshape(n, -1).mean(axis=1)
    with open(args.out / "patch_mse.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch", "masked", "mse"])
        for i in range(n):
            w.writerow([i, int(plan.flags[i]), repr(float(per_patch[i]))])
    masked_mse = float(per_patch[plan.flags].mean())
    visible_mse = float(per_patch[~plan.flags].mean())
    print(f"patches={n} masked={len(plan.masked)} masked_mse={masked_mse:.6g} visible_mse={visible_mse:.6g}")
    return 0


def cmd_gradcheck(args) -> int:
    from . import gradsuite
    from .numerics.gradcheck import REGISTRY, run_registry

    if args.list:
        print("\n".join(REGISTRY))
        return 0
    if args.scope == "all":
        names = list(REGISTRY)
    elif args.scope == "ops":
        names = list(gradsuite.OP_CHECKS)
    elif args.scope == "composites":
        names = list(gradsuite.COMPOSITE_CHECKS)
    else:
        names = [s.strip() for s in args.scope.split(",") if s.strip()]
        unknown = [n for n in names if n not in REGISTRY]
        if unknown:
            raise UsageError(f"unknown gradcheck names {unknown}; see --list")
    worst = {}
    for name in names:
        try:
            worst[name] = run_registry([name], seed=getattr(args, "seed", 0))[name]
        except (NumericError, FloatingPointError) as exc:
            log.error("%s: %s", name, exc)
            worst[name] = math.inf
    failed = [n for n, e in worst.items() if not e < GRADCHECK_TOL]
    width = max(len(n) for n in names)
    for name, err in worst.items():
        print(f"{name:<{width}}  {err:.3e}  {'FAIL' if name in failed else 'ok'}")
    print(f"{len(names) - len(failed)}/{len(names)} checks below {GRADCHECK_TOL:g}")
    return 3 if failed else 0


COMMANDS = {
    "preprocess": cmd_preprocess,
    "synth": cmd_synth,
    "pretrain1": lambda a: cmd_pretrain(a, 1),
    "pretrain2": lambda a: cmd_pretrain(a, 2),
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "reconstruct": cmd_reconstruct,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("patchifier: a command is required", file=sys.stderr)
        return 1

    logging.basicConfig(
        level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    threads = getattr(args, "threads", 0) or None
    try:
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except PatchifierError as exc:
        print(f"patchifier {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"patchifier {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
