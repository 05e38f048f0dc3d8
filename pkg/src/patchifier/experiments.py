"""Scaled-down experiments shared by ``scripts/`` and the acceptance tests.

Everything here runs the real pipeline (dsp -> datapipe -> pretrain ->
finetune) on synthetic audio small enough for a single CPU core.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .datapipe import fixed_grids, load_manifest, split_for, synth_clip, synth_regression_clip, write_manifest
from .dsp import read_spg, spectrogram_from_waveform, write_spg
from .finetune import EvalReport, FreezeMode, eval_split_name, load_split, run_finetune
from .model import Patchifier
from .numerics import ops
from .numerics.optim import ParamGroup
from .numerics.tensor import Tensor, no_grad
from .pretrain import load_pretrained, pretrain, sample_mask, stage1_step, stage2_forward, stage2_step

log = logging.getLogger(__name__)


@dataclass
class OverfitResult:
    reached: bool
    steps: int
    initial: float
    final: float
    seconds: float
    history: list[tuple[int, float]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# overfit smoke


def smoke_grids(count: int = 8, n: int = 8, seed: int = 0) -> np.ndarray:
    """``count`` grids of ``n`` patches cut from synthetic clips of all four classes."""
    seconds = n * 32 * 512 / 22050 + 0.2
    spgs = [spectrogram_from_waveform(synth_clip(i % 4, seed * 1000 + i, seconds=seconds)) for i in range(count)]
    grids, kept = fixed_grids(spgs, n)
    assert len(kept) == count
    return grids


def recon_mse(model: Patchifier, patches: np.ndarray) -> float:
    """Eval-mode Stage I reconstruction error of a B x 1 x 64 x 32 batch."""
    with no_grad():
        x = Tensor(np.asarray(patches, np.float32))
        return float(ops.mse_loss(model.decoder.forward(model.fe.forward(x, False), False), x.data).data)


def overfit_stage1(model: Patchifier, patches: np.ndarray, cfg: TrainConfig, max_steps=500, target=1e-2) -> OverfitResult:
    """Full-batch Stage I steps until the eval-mode MSE on ``patches`` drops below ``target``."""
    group = ParamGroup(model.params(("fe", "decoder")))
    start = time.perf_counter()
    initial = recon_mse(model, patches)
    history = [(0, initial)]
    current = initial
    for step in range(1, max_steps + 1):
        train_loss = stage1_step(patches, model, group, cfg)
        if train_loss < target or step % 25 == 0 or step == max_steps:
            current = recon_mse(model, patches)
            history.append((step, current))
            if current < target:
                return OverfitResult(True, step, initial, current, time.perf_counter() - start, history)
    return OverfitResult(False, max_steps, initial, current, time.perf_counter() - start, history)


def overfit_stage2(
    model: Patchifier, grids: np.ndarray, cfg: TrainConfig, max_steps=300, drop=0.5, eval_every=10
) -> OverfitResult:
    """Stage II steps until the masked loss under a fixed evaluation mask set falls by more than ``drop``.

    Training draws a fresh mask every step; the evaluation masks are drawn
    once from a separate stream so the before/after numbers are comparable.
    """
    b, n = grids.shape[:2]
    eval_rng = np.random.default_rng([cfg.seed, 0xE7A1])
    flags = np.stack([sample_mask(n, cfg.mask_ratio, eval_rng).flags for _ in range(b)])

    def evaluate() -> float:
        with no_grad():
            return float(stage2_forward(grids, model, flags, False, cfg.loss_scope).loss.data)

    group = ParamGroup(model.params())
    rng_mask, rng_drop = (np.random.default_rng(s) for s in np.random.SeedSequence([cfg.seed, 0x2]).spawn(2))
    start = time.perf_counter()
    initial = evaluate()
    history = [(0, initial)]
    current = initial
    for step in range(1, max_steps + 1):
        stage2_step(grids, model, group, cfg, rng_mask, rng_drop)
        if step % eval_every == 0 or step == max_steps:
            current = evaluate()
            history.append((step, current))
            if current < (1 - drop) * initial:
                return OverfitResult(True, step, initial, current, time.perf_counter() - start, history)
    return OverfitResult(False, max_steps, initial, current, time.perf_counter() - start, history)


def smoke_config(**changes) -> TrainConfig:
    return TrainConfig(lr=1e-3, **changes)


def overfit_smoke(seed: int = 0, cfg: TrainConfig | None = None) -> tuple[OverfitResult, OverfitResult]:
    """Stage I on 50 fixed patches, then Stage II from that model on 8 fixed grids."""
    cfg = cfg or smoke_config(seed=seed)
    grids = smoke_grids(8, 8, seed)
    patches = grids.reshape(-1, *grids.shape[2:])[:50]
    model = Patchifier(cfg.model_config(), seed=seed)
    s1 = overfit_stage1(model, patches, cfg)
    s2 = overfit_stage2(model, grids, cfg.replace(stage=2))
    return s1, s2


# ---------------------------------------------------------------------------
# downstream fixtures


def write_class_fixture(out_dir, n_classes=4, per_class=16, seed=0, seconds=3.0) -> Path:
    """Spectrogram caches plus ``manifest.csv``; every fourth clip per class is held out."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for c in range(n_classes):
        for i in range(per_class):
            name = f"class{c}_{i:03d}.spg"
            write_spg(out / name, spectrogram_from_waveform(synth_clip(c, seed * 1_000_003 + c * 10_007 + i, n_classes, seconds)))
            rows.append((name, c, split_for(i)))
    write_manifest(out / "manifest.csv", rows)
    return out / "manifest.csv"


def write_regression_fixture(out_dir, count=64, seed=0, seconds=3.0) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(count):
        name = f"reg_{i:03d}.spg"
        wave, (arousal, valence) = synth_regression_clip(seed * 1_000_003 + i, seconds=seconds)
        write_spg(out / name, spectrogram_from_waveform(wave))
        rows.append((name, repr(arousal), repr(valence), split_for(i)))
    write_manifest(out / "manifest.csv", rows)
    return out / "manifest.csv"


def fixture_pretrain_configs(seed: int = 0, n_patches: int = 4) -> tuple[TrainConfig, TrainConfig]:
    stage1 = TrainConfig(stage=1, batch_size=32, epochs=2, seed=seed, crops_per_clip=25, n_patches=n_patches)
    stage2 = TrainConfig(stage=2, batch_size=16, epochs=60, seed=seed, n_patches=n_patches)
    return stage1, stage2


def pretrain_on_manifest(manifest, work_dir, seed: int = 0, configs=None) -> Path:
    """Stage I then Stage II on every clip listed in ``manifest`` (labels unused)."""
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    spgs = [read_spg(e.path) for e in load_manifest(manifest).entries]
    cfg1, cfg2 = configs or fixture_pretrain_configs(seed)
    s1 = pretrain(cfg1, spgs, work / "stage1.pckp")
    return pretrain(cfg2, spgs, work / "stage2.pckp", init=s1)


def finetune_modes(ckpt, manifest, modes=tuple(FreezeMode), epochs=30, lr=1e-4, seed=0) -> dict[str, EvalReport]:
    """Fine-tune a fresh copy of ``ckpt`` under each freezing mode."""
    man = load_manifest(manifest)
    task = man.task
    n_out = man.n_classes if task == "cls" else 2
    reports = {}
    cache: dict = {}
    for mode in modes:
        model, meta = load_pretrained(ckpt)
        cfg = TrainConfig(
            epochs=epochs, lr=lr, batch_size=16, seed=seed, n_patches=int(meta["config.n_patches"]),
            fe_channels=model.cfg.fe_channels, hidden=model.cfg.hidden, layers=model.cfg.layers,
            heads=model.cfg.heads, ffn=model.cfg.ffn, max_seq_len=model.cfg.max_seq_len, dropout=model.cfg.dropout,
        )  # fmt: skip
        train = load_split(man, "train", cfg.n_patches, cache)
        held = load_split(man, eval_split_name(man), cfg.n_patches, cache)
        start = time.perf_counter()
        _, report = run_finetune(cfg, model, train, held, mode, task, n_out)
        log.info("%s finished in %.1fs: %s", mode.value, time.perf_counter() - start, report.metric)
        reports[mode.value] = report
    return reports


def epochs_to_reach(curve: list[dict], key: str, level: float) -> int | None:
    for row in curve:
        if row.get(key, -np.inf) >= level:
            return int(row["epoch"])
    return None
