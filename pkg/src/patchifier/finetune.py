"""Downstream fine-tuning under four freezing regimes, plus accuracy / R² evaluation."""

from __future__ import annotations

import csv
import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .config import TrainConfig, build_config
from .datapipe import DatasetManifest, fixed_grids, make_batch, patchify
from .dsp import load_spectrogram
from .errors import ConfigError, DataError, NumericError
from .model import Head, Patchifier
from .numerics import ops
from .numerics.optim import ParamGroup, adamw_step
from .numerics.tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class FreezeMode(enum.Enum):
    LINEAR_PROBE = "linear_probe"
    FREEZE_FE = "freeze_fe"
    FREEZE_BOTTLENECK = "freeze_bottleneck"
    FULL = "full"

    @classmethod
    def parse(cls, text: str) -> "FreezeMode":
        try:
            return cls(text.replace("-", "_"))
        except ValueError:
            raise ConfigError(f"unknown freeze mode {text!r}; choose from {[m.value for m in cls]}") from None

    @property
    def frozen(self) -> tuple[str, ...]:
        return {
            FreezeMode.LINEAR_PROBE: ("fe", "bottleneck"),
            FreezeMode.FREEZE_FE: ("fe",),
            FreezeMode.FREEZE_BOTTLENECK: ("bottleneck",),
            FreezeMode.FULL: (),
        }[self]


# ---------------------------------------------------------------------------
# metrics


def evaluate_accuracy(preds, labels) -> float:
    """Argmax match rate; ``np.argmax`` breaks ties toward the lowest index."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(np.argmax(preds, axis=1) == labels))


def evaluate_r2(preds, targets) -> tuple[float, float, float]:
    """Per-dimension coefficient of determination and their mean."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.ndim != 2 or preds.shape[1] != 2:
        raise ConfigError(f"R² expects matching B x 2 arrays, got {preds.shape} and {targets.shape}")
    if preds.shape[0] < 2:
        raise DataError("R² needs at least two samples")
    ss_res = np.sum((targets - preds) ** 2, axis=0)
    ss_tot = np.sum((targets - targets.mean(axis=0)) ** 2, axis=0)
    if np.any(ss_tot == 0):
        raise DataError("R² undefined: a target dimension has zero variance")
    r2 = 1.0 - ss_res / ss_tot
    return float(r2[0]), float(r2[1]), float(r2.mean())


# ---------------------------------------------------------------------------
# forward / step


def downstream_forward(
    model: Patchifier,
    head: Head,
    grids: np.ndarray,
    mode: FreezeMode,
    training: bool,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """fe -> assemble (no mask) -> bottleneck -> head on CLS. Frozen parts run in eval mode."""
    grids = np.asarray(grids, dtype=np.float32)
    b, n = grids.shape[:2]
    fe_train = training and "fe" not in mode.frozen
    bn_train = training and "bottleneck" not in mode.frozen
    v = model.fe.forward(Tensor(grids.reshape(b * n, *grids.shape[2:])), fe_train)
    seq = model.bottleneck.assemble(v.reshape(b, n, model.cfg.hidden))
    h = model.bottleneck.forward(seq, bn_train, rng)
    return head.forward(h[:, 0, :])


def task_loss(out: Tensor, labels, task: str) -> Tensor:
    if task == "cls":
        return ops.cross_entropy_loss(out, labels)
    targets = np.asarray(labels, dtype=np.float32)
    if targets.shape != out.shape:
        raise ConfigError(f"regression targets {targets.shape} do not match predictions {out.shape}")
    return ops.mse_loss(out, targets)


def trainable_group(model: Patchifier, head: Head, mode: FreezeMode) -> ParamGroup:
    """Head plus unfrozen parts; sets ``requires_grad`` accordingly.

    The mask token is excluded: downstream sequences are never masked.
    """
    for part in Patchifier.PARTS:
        getattr(model, part).set_trainable(False)
    head.set_trainable(True)
    params = dict(head.params)
    for part in ("fe", "bottleneck"):
        if part in mode.frozen:
            continue
        net = getattr(model, part)
        net.set_trainable(True)
        params.update(net.params)
    if "bottleneck.mask_token" in params:
        model.bottleneck.params["bottleneck.mask_token"].requires_grad = False
        del params["bottleneck.mask_token"]
    return ParamGroup(params)


def finetune_step(
    grids: np.ndarray,
    labels,
    model: Patchifier,
    head: Head,
    mode: FreezeMode,
    group: ParamGroup,
    task: str,
    lr: float = 1e-4,
    weight_decay: float = 0.01,
    rng: np.random.Generator | None = None,
) -> float:
    if task == "cls" and np.asarray(labels).ndim != 1:
        raise ConfigError("classification labels must be class ids")
    if task == "reg" and np.asarray(labels).ndim != 2:
        raise ConfigError("regression labels must be (arousal, valence) pairs")
    group.zero_grad()
    loss = task_loss(downstream_forward(model, head, grids, mode, True, rng), labels, task)
    loss.backward()
    adamw_step(group, lr=lr, weight_decay=weight_decay)
    val = float(loss.data)
    if not np.isfinite(val):
        raise NumericError("fine-tuning loss is not finite")
    return val


def predict(model: Patchifier, head: Head, grids: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Eval-mode outputs; no parameter, buffer, or optimizer state changes."""
    outs = []
    with no_grad():
        for batch in make_batch(list(grids), batch_size):
            outs.append(downstream_forward(model, head, batch, FreezeMode.FULL, training=False).data)
    return np.concatenate(outs) if outs else np.zeros((0, head.n_out), np.float32)


def extract_embedding(spg, model: Patchifier, n_patches: int | None = None) -> np.ndarray:
    """CLS output of the bottleneck in eval mode for the clip's leading patches."""
    grid = patchify(spg).array()
    limit = model.cfg.max_seq_len - 1 if n_patches is None else n_patches
    grid = grid[:limit]
    if len(grid) < 2:
        raise DataError("clip is shorter than 2 patches")
    with no_grad():
        return model.embed(Tensor(grid[None]), training=False).data[0].copy()


# ---------------------------------------------------------------------------
# runs


@dataclass
class EvalReport:
    task: str
    mode: str
    metric: dict
    curve: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def metric_for(task: str, preds: np.ndarray, labels) -> dict:
    if task == "cls":
        return {"accuracy": evaluate_accuracy(preds, labels)}
    r2a, r2v, mean = evaluate_r2(preds, labels)
    return {"r2_arousal": r2a, "r2_valence": r2v, "r2_mean": mean, "score_x100": 100.0 * mean}


def _headline(task: str, metric: dict) -> float:
    return metric["accuracy"] if task == "cls" else metric["r2_mean"]


@dataclass
class SplitData:
    grids: np.ndarray
    labels: np.ndarray


def load_split(manifest: DatasetManifest, split: str, n_patches: int, cache=None) -> SplitData:
    entries = manifest.split(split)
    spgs = []
    for e in entries:
        if cache is not None and e.path in cache:
            spgs.append(cache[e.path])
            continue
        s = load_spectrogram(e.path)
        if cache is not None:
            cache[e.path] = s
        spgs.append(s)
    grids, kept = fixed_grids(spgs, n_patches)
    if len(kept) < len(entries):
        log.warning("%s: skipped %d clips shorter than %d patches", split, len(entries) - len(kept), n_patches)
    labels = [entries[i].label for i in kept]
    if manifest.task == "cls":
        return SplitData(grids, np.asarray(labels, dtype=np.intp).reshape(len(kept)))
    return SplitData(grids, np.asarray(labels, dtype=np.float32).reshape(len(kept), 2))


def eval_split_name(manifest: DatasetManifest) -> str:
    for name in ("test", "valid"):
        if manifest.split(name):
            return name
    return "train"


def run_finetune(
    cfg: TrainConfig,
    model: Patchifier,
    train: SplitData,
    held_out: SplitData | None,
    mode: FreezeMode,
    task: str,
    n_out: int,
    lr: float | None = None,
) -> tuple[Head, EvalReport]:
    """Train a fresh head (and unfrozen parts) for ``cfg.epochs`` epochs."""
    if len(train.grids) == 0:
        raise DataError("no training clips")
    if task == "cls" and train.labels.ndim != 1:
        raise ConfigError("task cls needs a classification manifest")
    if task == "reg" and train.labels.ndim != 2:
        raise ConfigError("task reg needs a regression manifest")
    ss = np.random.SeedSequence([cfg.seed, 0xF17E])
    head_rng, shuffle_rng, drop_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    head = Head(model.cfg.hidden, n_out, head_rng)
    group = trainable_group(model, head, mode)
    lr = cfg.lr if lr is None else lr
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train.grids))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            losses.append(
                finetune_step(
                    train.grids[idx], train.labels[idx], model, head, mode, group, task, lr, cfg.weight_decay, drop_rng
                )
            )
        row = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        row["train_metric"] = _headline(task, metric_for(task, predict(model, head, train.grids), train.labels))
        if held_out is not None and len(held_out.grids):
            row["eval_metric"] = _headline(task, metric_for(task, predict(model, head, held_out.grids), held_out.labels))
        curve.append(row)
        log.info("finetune %s epoch %d: %s", mode.value, epoch, row)
    final = held_out if held_out is not None and len(held_out.grids) else train
    report = EvalReport(task, mode.value, metric_for(task, predict(model, head, final.grids), final.labels), curve, cfg.to_dict())
    return head, report


def write_curve(path, curve: Sequence[dict]) -> None:
    if not curve:
        return
    keys = list(curve[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for row in curve:
            w.writerow(row)


FINETUNED_NAME = "finetuned.pckp"


def save_finetuned(out_dir, cfg: TrainConfig, model: Patchifier, head: Head, task: str, mode: FreezeMode, report: EvalReport):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arrays = model.arrays()
    arrays.update(head.arrays())
    meta = {"task": task, "mode": mode.value, "n_out": str(head.n_out), "seed": str(cfg.seed)}
    meta.update({f"config.{k}": v for k, v in cfg.to_dict().items()})
    save_checkpoint(out_dir / FINETUNED_NAME, arrays, None, meta)
    write_curve(out_dir / "curve.csv", report.curve)
    (out_dir / "report.json").write_text(report.to_json() + "\n")


def load_finetuned(ckpt_dir) -> tuple[Patchifier, Head, dict[str, str], TrainConfig]:
    path = Path(ckpt_dir)
    if path.is_dir():
        path = path / FINETUNED_NAME
    _, meta = read_checkpoint(path)
    cfg = build_config({k[len("config.") :]: v for k, v in meta.items() if k.startswith("config.")})
    model = Patchifier(cfg.model_config(), seed=cfg.seed)
    head = Head(model.cfg.hidden, int(meta["n_out"]), np.random.default_rng(0))
    schema = model.schema()
    schema.update(head.schema())
    arrays, _, meta = load_checkpoint(path, schema)
    model.load_arrays(arrays)
    head.load_arrays(arrays)
    return model, head, meta, cfg
