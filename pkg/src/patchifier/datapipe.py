"""Patches, augmentations, batching, manifests, and synthetic fixtures."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dsp import SAMPLE_RATE, Spectrogram, Waveform, hz_to_mel, mel_to_hz
from .errors import ConfigError, DataError, ShapeError

PATCH_W = 32
SPLITS = ("train", "valid", "test")


@dataclass
class Patch:
    values: np.ndarray  # (1, 64, 32)
    index: int = 0


@dataclass
class PatchGrid:
    patches: list[Patch]
    source: str = ""

    @property
    def n(self) -> int:
        return len(self.patches)

    def array(self) -> np.ndarray:
        """Stacked grid, shape ``(n, 1, 64, 32)``."""
        return np.stack([p.values for p in self.patches])


def _values(s) -> np.ndarray:
    return s.values if isinstance(s, Spectrogram) else np.asarray(s)


def patchify(s, patch_w: int = PATCH_W) -> PatchGrid:
    """Cut columns ``[i*patch_w, (i+1)*patch_w)`` left to right; remainder dropped."""
    vals = _values(s)
    n = vals.shape[-1] // patch_w
    if n < 1:
        raise DataError(f"spectrogram width {vals.shape[-1]} shorter than one patch ({patch_w})")
    patches = [Patch(vals[..., i * patch_w : (i + 1) * patch_w].copy(), i) for i in range(n)]
    return PatchGrid(patches, getattr(s, "name", ""))


def resize_width(vals: np.ndarray, new_w: int) -> np.ndarray:
    """Linear interpolation along time with aligned end points."""
    w = vals.shape[-1]
    if new_w == w:
        return vals.copy()
    pos = np.arange(new_w) * ((w - 1) / max(new_w - 1, 1))
    lo = np.minimum(np.floor(pos).astype(np.intp), w - 1)
    hi = np.minimum(lo + 1, w - 1)
    frac = (pos - lo).astype(vals.dtype)
    return vals[..., lo] * (1 - frac) + vals[..., hi] * frac


def random_resize_width(s, rng: np.random.Generator, ratio=(0.9, 1.2)) -> Spectrogram:
    vals = _values(s)
    if vals.shape[-1] < 2:
        raise DataError("random_resize_width needs W >= 2")
    r = rng.uniform(*ratio) if ratio[0] != ratio[1] else ratio[0]
    new_w = max(1, int(math.floor(vals.shape[-1] * r + 0.5)))
    out = np.clip(resize_width(vals, new_w), -1.0, 1.0).astype(np.float32)
    if isinstance(s, Spectrogram):
        return Spectrogram(out, s.sample_rate, s.hop, name=s.name)
    return Spectrogram(out)


def random_crop_patches(s, rng: np.random.Generator, count: int = 25, patch_w: int = PATCH_W) -> list[Patch]:
    """``count`` crops with left edges uniform on ``[0, W - patch_w]`` (with replacement)."""
    vals = _values(s)
    w = vals.shape[-1]
    if w < patch_w:
        raise DataError(f"cannot crop a {patch_w}-wide patch from W={w}")
    lefts = rng.integers(0, w - patch_w + 1, size=count)
    return [Patch(vals[..., x : x + patch_w].copy(), int(x)) for x in lefts]


def random_intensity(p: Patch, rng: np.random.Generator, ratio=(0.8, 1.2)) -> Patch:
    """Multiply each element by its own ratio drawn from ``ratio``; re-clamp to [-1, 1]."""
    r = rng.uniform(ratio[0], ratio[1], size=p.values.shape).astype(np.float32)
    return Patch(np.clip(p.values * r, -1.0, 1.0), p.index)


def make_batch(items: Sequence, batch_size: int = 32) -> list[np.ndarray]:
    """Stack items into batches along a new leading axis; last partial batch kept."""
    arrays = [np.asarray(it.values if isinstance(it, Patch) else it) for it in items]
    if not arrays:
        return []
    shape = arrays[0].shape
    for a in arrays:
        if a.shape != shape:
            raise ShapeError(f"heterogeneous batch: {a.shape} vs {shape}")
    return [np.stack(arrays[i : i + batch_size]) for i in range(0, len(arrays), batch_size)]


def stage1_patches(spgs: Sequence, rng_scale, rng_crop, rng_int, crops: int = 25, augment: bool = True) -> list[Patch]:
    """Scaling -> crop -> intensity, per clip, in clip order."""
    out = []
    for s in spgs:
        src = random_resize_width(s, rng_scale) if augment else s
        for p in random_crop_patches(src, rng_crop, count=crops):
            out.append(random_intensity(p, rng_int) if augment else p)
    return out


def fixed_grids(spgs: Sequence, n: int, patch_w: int = PATCH_W) -> tuple[np.ndarray, list[int]]:
    """First-``n``-patch grids for every clip long enough; returns (grids, kept indices)."""
    grids, kept = [], []
    for i, s in enumerate(spgs):
        if _values(s).shape[-1] < n * patch_w:
            continue
        grids.append(patchify(s, patch_w).array()[:n])
        kept.append(i)
    if not grids:
        return np.zeros((0, n, 1, 64, patch_w), np.float32), kept
    return np.stack(grids).astype(np.float32), kept


# ---------------------------------------------------------------------------
# synthetic fixtures

SYNTH_SECONDS = 3.0
_SYNTH_LO_HZ = 150.0
_SYNTH_HI_HZ = 8000.0


def class_bands(n_classes: int) -> list[tuple[float, float]]:
    """Disjoint frequency bands (Hz), equal width on the mel scale."""
    edges = mel_to_hz(np.linspace(hz_to_mel(_SYNTH_LO_HZ), hz_to_mel(_SYNTH_HI_HZ), n_classes + 1))
    return [(float(edges[i]), float(edges[i + 1])) for i in range(n_classes)]


def _band_tones(band, rng, count=3):
    lo, hi = hz_to_mel(band[0]), hz_to_mel(band[1])
    width = hi - lo
    # keep tones in the middle of the band so filter skirts stay inside it
    return mel_to_hz(rng.uniform(lo + 0.3 * width, hi - 0.3 * width, size=count))


def synth_clip(class_id: int, seed: int, n_classes: int = 4, seconds: float = SYNTH_SECONDS) -> Waveform:
    """Tones from the class band plus seeded noise at 10% amplitude; peak <= 1."""
    if not 0 <= class_id < n_classes:
        raise ConfigError(f"class_id {class_id} outside [0, {n_classes})")
    rng = np.random.default_rng([seed, class_id, n_classes])
    t = np.arange(int(seconds * SAMPLE_RATE)) / SAMPLE_RATE
    freqs = _band_tones(class_bands(n_classes)[class_id], rng)
    phases = rng.uniform(0, 2 * np.pi, size=len(freqs))
    amps = np.full(len(freqs), 0.9 / len(freqs))
    x = sum(a * np.sin(2 * np.pi * f * t + ph) for a, f, ph in zip(amps, freqs, phases))
    x = x + rng.uniform(-0.1, 0.1, size=t.shape)
    return Waveform(x, SAMPLE_RATE)


REG_GAIN_DB = (-24.0, 0.0)
REG_TILT_DB = (-12.0, 12.0)


def regression_targets(gain_db: float, tilt_db: float) -> tuple[float, float]:
    """(arousal, valence) in [-1, 1]: arousal follows overall level, valence the spectral tilt."""
    lo, hi = REG_GAIN_DB
    arousal = 2.0 * (gain_db - lo) / (hi - lo) - 1.0
    lo, hi = REG_TILT_DB
    valence = 2.0 * (tilt_db - lo) / (hi - lo) - 1.0
    return float(arousal), float(valence)


def synth_regression_clip(seed: int, n_bands: int = 4, seconds: float = SYNTH_SECONDS):
    """Two tones per band plus noise, with a seeded overall gain and low-to-high tilt.

    The tilt moves the highest band up by ``tilt_db / 2`` and the lowest down by
    the same amount, linearly in between. Returns (waveform, (arousal, valence)).
    """
    rng = np.random.default_rng([seed, 7919, n_bands])
    t = np.arange(int(seconds * SAMPLE_RATE)) / SAMPLE_RATE
    gain_db = rng.uniform(*REG_GAIN_DB)
    tilt_db = rng.uniform(*REG_TILT_DB)
    band_db = np.linspace(-0.5, 0.5, n_bands) * tilt_db
    freqs = np.concatenate([_band_tones(band, rng, count=2) for band in class_bands(n_bands)])
    amps = np.repeat(10.0 ** (band_db / 20.0), 2)
    amps *= 0.8 / amps.sum()
    phases = rng.uniform(0, 2 * np.pi, size=len(freqs))
    x = sum(a * np.sin(2 * np.pi * f * t + ph) for a, f, ph in zip(amps, freqs, phases))
    x = (x + rng.uniform(-0.1, 0.1, size=t.shape)) * 10.0 ** (gain_db / 20.0)
    return Waveform(x, SAMPLE_RATE), regression_targets(gain_db, tilt_db)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    path: Path
    label: int | tuple[float, float]
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    task: str  # "cls" or "reg"
    n_classes: int = 0

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]


def load_manifest(path) -> DatasetManifest:
    """Parse ``path,label[,label2],split`` rows; relative paths resolve against the manifest dir."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} not found")
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            row = [c.strip() for c in row]
            if not row or not row[0] or row[0].startswith("#"):
                continue
            if lineno == 1 and row[0].lower() == "path":
                continue
            rows.append((lineno, row))
    if not rows:
        raise DataError(f"manifest {path} has no entries")
    widths = {len(r) for _, r in rows}
    if len(widths) != 1 or widths.pop() not in (3, 4):
        raise DataError(f"manifest {path}: rows must all have 3 (class) or 4 (arousal,valence) columns")
    task = "cls" if len(rows[0][1]) == 3 else "reg"

    entries, seen = [], set()
    for lineno, row in rows:
        p = Path(row[0])
        if not p.is_absolute():
            p = path.parent / p
        if p in seen:
            raise DataError(f"manifest {path}:{lineno}: duplicate path {row[0]}")
        seen.add(p)
        split = row[-1]
        if split not in SPLITS:
            raise DataError(f"manifest {path}:{lineno}: unknown split tag {split!r}")
        try:
            if task == "cls":
                label = int(row[1])
            else:
                label = (float(row[1]), float(row[2]))
        except ValueError as exc:
            raise DataError(f"manifest {path}:{lineno}: bad label ({exc})") from exc
        if task == "reg" and not all(math.isfinite(v) for v in label):
            raise DataError(f"manifest {path}:{lineno}: non-finite regression target")
        entries.append(ManifestEntry(p, label, split))

    n_classes = 0
    if task == "cls":
        ids = sorted({e.label for e in entries})
        if ids != list(range(len(ids))):
            raise DataError(f"manifest {path}: class ids {ids} are not dense in [0, C)")
        n_classes = len(ids)
    return DatasetManifest(entries, task, n_classes)


def write_manifest(path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in rows:
            w.writerow(row)


def split_for(i: int) -> str:
    """Every fourth item of a class goes to test, the rest to train."""
    return "test" if i % 4 == 3 else "train"
