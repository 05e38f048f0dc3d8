"""Two-stage pre-training.

Stage I trains the feature extractor and decoder as a patch autoencoder on
random crops; the bottleneck is not touched. Stage II encodes the visible
patches of fixed-length grids, fills masked positions with the mask token,
runs the bottleneck, and reconstructs every position through the decoder.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .config import TrainConfig, build_config
from .datapipe import fixed_grids, make_batch, stage1_patches
from .dsp import Spectrogram
from .errors import ConfigError, DataError, NumericError
from .model import PATCH_SHAPE, Patchifier
from .numerics import ops
from .numerics.optim import ParamGroup, adamw_step
from .numerics.tensor import Tensor

log = logging.getLogger(__name__)

STREAMS = ("shuffle", "scale", "crop", "intensity", "mask", "dropout")


@dataclass
class MaskPlan:
    n: int
    masked: np.ndarray  # sorted distinct indices
    ratio: float

    @property
    def flags(self) -> np.ndarray:
        out = np.zeros(self.n, bool)
        out[self.masked] = True
        return out


def mask_count(n: int, ratio: float) -> int:
    return min(max(int(math.floor(ratio * n + 0.5)), 1), n - 1)


def sample_mask(n: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Uniformly random masked subset of size ``clamp(round(r*n), 1, n-1)``."""
    if n < 2:
        raise ConfigError(f"masking needs at least 2 patches, got {n}")
    k = mask_count(n, ratio)
    return MaskPlan(n, np.sort(rng.choice(n, size=k, replace=False)), ratio)


class RngStreams:
    """Independent per-purpose generators derived from one master seed."""

    def __init__(self, seed: int):
        children = np.random.SeedSequence([seed, 0x5EED]).spawn(len(STREAMS))
        self.gens = {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}

    def __getitem__(self, name: str) -> np.random.Generator:
        return self.gens[name]

    def state_json(self) -> str:
        return json.dumps({k: g.bit_generator.state for k, g in self.gens.items()}, sort_keys=True)

    def load_json(self, text: str) -> None:
        states = json.loads(text)
        for k, g in self.gens.items():
            g.bit_generator.state = states[k]


def _check_loss(loss: Tensor, what: str) -> float:
    val = float(loss.data)
    if not math.isfinite(val):
        raise NumericError(f"{what} loss is not finite")
    return val


def stage1_step(batch: np.ndarray, model: Patchifier, group: ParamGroup, cfg: TrainConfig) -> float:
    group.zero_grad()
    for p in model.bottleneck.params.values():
        p.grad = None
    x = Tensor(np.asarray(batch, dtype=np.float32))
    v = model.fe.forward(x, training=True)
    recon = model.decoder.forward(v, training=True)
    loss = ops.mse_loss(recon, x.data)
    loss.backward()
    for name, p in model.bottleneck.params.items():
        if p.grad is not None and np.any(p.grad):
            raise NumericError(f"stage I produced a gradient for bottleneck parameter {name}")
    adamw_step(group, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return _check_loss(loss, "stage I")


@dataclass
class Stage2Output:
    recon: Tensor  # B x n x 1 x 64 x 32
    hidden: Tensor  # B x (n+1) x H
    flags: np.ndarray  # B x n
    loss: Tensor


def stage2_forward(
    grids: np.ndarray,
    model: Patchifier,
    flags: np.ndarray,
    training: bool,
    loss_scope: str = "masked_only",
    rng_dropout: np.random.Generator | None = None,
) -> Stage2Output:
    """Masked reconstruction of B x n grids. Masked patches are only used as targets."""
    grids = np.asarray(grids, dtype=np.float32)
    b, n = grids.shape[:2]
    flags = np.asarray(flags, bool)
    if flags.shape != (b, n) or not flags.any(axis=1).all():
        raise ConfigError("every grid needs at least one masked position")
    flat = grids.reshape(b * n, *PATCH_SHAPE)
    visible = np.flatnonzero(~flags.reshape(-1))
    v_vis = model.fe.forward(Tensor(flat[visible]), training)
    v = ops.scatter_rows(v_vis, visible, b * n).reshape(b, n, model.cfg.hidden)
    seq = model.bottleneck.assemble(v, flags)
    h = model.bottleneck.forward(seq, training, rng_dropout)
    recon = model.decoder.forward(h[:, 1:, :], training)
    if loss_scope == "masked_only":
        weights = flags.astype(np.float32)[:, :, None, None, None]
    else:
        weights = None
    loss = ops.mse_loss(recon, grids, mask=weights)
    return Stage2Output(recon, h, flags, loss)


def stage2_step(
    grids: np.ndarray,
    model: Patchifier,
    group: ParamGroup,
    cfg: TrainConfig,
    rng_mask: np.random.Generator,
    rng_dropout: np.random.Generator | None = None,
) -> float:
    b, n = grids.shape[:2]
    if n + 1 > model.cfg.max_seq_len:
        raise ConfigError(f"grid of {n} patches + CLS exceeds max_seq_len {model.cfg.max_seq_len}")
    flags = np.stack([sample_mask(n, cfg.mask_ratio, rng_mask).flags for _ in range(b)])
    group.zero_grad()
    out = stage2_forward(grids, model, flags, True, cfg.loss_scope, rng_dropout)
    out.loss.backward()
    adamw_step(group, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return _check_loss(out.loss, "stage II")


# ---------------------------------------------------------------------------
# training loop


def stage_parts(stage: int) -> tuple[str, ...]:
    return ("fe", "decoder") if stage == 1 else Patchifier.PARTS


def checkpoint_meta(cfg: TrainConfig, epoch: int, streams: RngStreams, extra=None) -> dict[str, str]:
    meta = {"stage": str(cfg.stage), "seed": str(cfg.seed), "epoch": str(epoch), "rng": streams.state_json()}
    meta.update({f"config.{k}": v for k, v in cfg.to_dict().items()})
    meta.update(extra or {})
    return meta


def save_training_state(path, model: Patchifier, group: ParamGroup, cfg: TrainConfig, epoch: int, streams) -> None:
    arrays = model.arrays(stage_parts(cfg.stage))
    m, v, t = group.state()
    save_checkpoint(path, arrays, {"m": m, "v": v, "t": t}, checkpoint_meta(cfg, epoch, streams))


def loss_csv_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.stem + ".loss.csv")


def _read_loss_rows(path: Path, upto: int) -> list[list[str]]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [r for r in rows[1:] if r and int(r[0]) <= upto]


def run_epoch(cfg: TrainConfig, model: Patchifier, group: ParamGroup, data, streams: RngStreams) -> tuple[float, int]:
    """One pass; returns (mean batch loss, steps)."""
    losses = []
    if cfg.stage == 1:
        patches = stage1_patches(
            data, streams["scale"], streams["crop"], streams["intensity"], crops=cfg.crops_per_clip, augment=cfg.augment
        )
        order = streams["shuffle"].permutation(len(patches))
        for batch in make_batch([patches[i] for i in order], cfg.batch_size):
            losses.append(stage1_step(batch, model, group, cfg))
    else:
        order = streams["shuffle"].permutation(len(data))
        for batch in make_batch([data[i] for i in order], cfg.batch_size):
            losses.append(stage2_step(batch, model, group, cfg, streams["mask"], streams["dropout"]))
    return float(np.mean(losses)) if losses else float("nan"), len(losses)


def init_from_stage1(model: Patchifier, path) -> None:
    """Copy FE and decoder tensors (and batchnorm statistics) from a Stage I checkpoint."""
    arrays, _, meta = load_checkpoint(path, model.schema(("fe", "decoder")), allow_extra=True)
    if meta.get("stage") != "1":
        log.warning("init checkpoint %s reports stage %s", path, meta.get("stage"))
    model.load_arrays(arrays, ("fe", "decoder"))


def pretrain(
    cfg: TrainConfig,
    spectrograms: Sequence[Spectrogram],
    out,
    init=None,
    resume=None,
    allow_cold_start: bool = False,
) -> Path:
    """Run ``cfg.epochs`` epochs of stage ``cfg.stage``; returns the final checkpoint path.

    Writes ``<out stem>.loss.csv`` (epoch, loss, steps) and, with
    ``checkpoint_every = k``, ``<out stem>.epoch<k>.pckp`` snapshots.
    """
    out = Path(out)
    model = Patchifier(cfg.model_config(), seed=cfg.seed)
    parts = stage_parts(cfg.stage)
    streams = RngStreams(cfg.seed)

    if cfg.stage == 2 and init is None and resume is None and not allow_cold_start:
        raise ConfigError("stage II needs a stage I checkpoint (--init) unless --allow-cold-start is given")
    if cfg.stage == 2 and init is not None:
        init_from_stage1(model, init)

    if cfg.stage == 1:
        data = list(spectrograms)
        if not data:
            raise DataError("no spectrograms to train on")
    else:
        data, kept = fixed_grids(spectrograms, cfg.n_patches)
        skipped = len(spectrograms) - len(kept)
        if skipped:
            log.warning("skipped %d clips shorter than %d patches", skipped, cfg.n_patches)
        if len(data) == 0:
            raise DataError(f"no clip has at least {cfg.n_patches} patches")

    group = ParamGroup(model.params(parts))
    start = 0
    if resume is not None:
        arrays, opt_state, meta = load_checkpoint(resume, model.schema(parts))
        if opt_state is None:
            raise DataError(f"{resume}: no optimizer state to resume from")
        model.load_arrays(arrays, parts)
        group.load_state(opt_state["m"], opt_state["v"], opt_state["t"])
        streams.load_json(meta["rng"])
        start = int(meta["epoch"])

    csv_path = loss_csv_path(out)
    rows = _read_loss_rows(csv_path, start) if resume is not None else []
    log.info("resolved config:\n%s", cfg.to_text())
    for epoch in range(start + 1, cfg.epochs + 1):
        loss, steps = run_epoch(cfg, model, group, data, streams)
        rows.append([str(epoch), repr(loss), str(steps)])
        log.info("stage %d epoch %d loss %.6f (%d steps)", cfg.stage, epoch, loss, steps)
        _write_loss_csv(csv_path, rows)
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0 and epoch != cfg.epochs:
            save_training_state(out.with_name(f"{out.stem}.epoch{epoch}.pckp"), model, group, cfg, epoch, streams)
    save_training_state(out, model, group, cfg, cfg.epochs, streams)
    return out


def _write_loss_csv(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "steps"])
        w.writerows(rows)


def load_pretrained(path, cfg: TrainConfig | None = None) -> tuple[Patchifier, dict[str, str]]:
    """Rebuild a model from a stage II checkpoint using the config echoed in its metadata."""
    records, meta = read_checkpoint(path)
    if cfg is None:
        cfg = build_config({k[len("config.") :]: v for k, v in meta.items() if k.startswith("config.")})
    model = Patchifier(cfg.model_config(), seed=cfg.seed)
    arrays, _, meta = load_checkpoint(path, model.schema(), allow_extra=True)
    model.load_arrays(arrays)
    return model, meta
