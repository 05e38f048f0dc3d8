"""WAV decoding, resampling, and the normalized log-mel spectrogram.

Pipeline: ``load_wav`` -> ``resample_linear`` (22050 Hz) -> ``mel_spectrogram``
(64 mels, n_fft 1024, hop 512, Hann, dB) -> ``normalize`` (x0.01, clamp).
"""

from __future__ import annotations

import logging
import os
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

SAMPLE_RATE = 22050
N_MELS = 64
N_FFT = 1024
HOP = 512
DB_FLOOR = 1e-10
SPG_MAGIC = b"SPG1"


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ConfigError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    values: np.ndarray  # (1, n_mels, W) float32
    sample_rate: int = SAMPLE_RATE
    hop: int = HOP
    clamped: int = 0
    name: str = field(default="")

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop


# ---------------------------------------------------------------------------
# WAV I/O


def load_wav(path) -> Waveform:
    """Decode 16-bit PCM WAV; stereo is averaged to mono."""
    try:
        with wave.open(os.fspath(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            nframes = w.getnframes()
            raw = w.readframes(nframes)
    except wave.Error as exc:
        raise DataError(f"{path}: unsupported or malformed WAV ({exc})") from exc
    except EOFError as exc:
        raise DataError(f"{path}: truncated WAV header") from exc
    if width != 2:
        raise DataError(f"{path}: unsupported sample width {8 * width} bits (need 16-bit PCM)")
    if channels not in (1, 2):
        raise DataError(f"{path}: unsupported channel count {channels}")
    if len(raw) != nframes * channels * width:
        raise DataError(f"{path}: truncated data chunk ({len(raw)} of {nframes * channels * width} bytes)")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels == 2:
        pcm = pcm.reshape(-1, 2).mean(axis=1)
    return Waveform(pcm, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(os.fspath(path), "wb") as out:
        out.setnchannels(1)
        out.setsampwidth(2)
        out.setframerate(w.sample_rate)
        out.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# resampling / mel


def resample_linear(w: Waveform, target_rate: int = SAMPLE_RATE) -> Waveform:
    """Linear interpolation at ``j * src/target`` source positions (phase 0)."""
    if w.sample_rate == target_rate:
        return Waveform(w.samples.copy(), target_rate)
    n = len(w.samples)
    if n == 0:
        return Waveform(w.samples.copy(), target_rate)
    m = (n - 1) * target_rate // w.sample_rate + 1
    pos = np.arange(m) * (w.sample_rate / target_rate)
    return Waveform(np.interp(pos, np.arange(n), w.samples), target_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Filter edge/center frequencies in Hz, ``n_mels + 2`` points from 0 to Nyquist."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular HTK-mel filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    if n_mels < 1:
        raise ConfigError("n_mels must be >= 1")
    pts = mel_centers(n_mels, sample_rate)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    empty = np.flatnonzero(fb.max(axis=1) <= 0)
    if empty.size:
        raise ConfigError(f"{n_mels} mel bins too many for n_fft={n_fft}: rows {empty.tolist()} are empty")
    return fb


def frame_count(n_samples: int, n_fft: int = N_FFT, hop: int = HOP) -> int:
    return 1 + (n_samples - n_fft) // hop


def power_spectra(samples: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Hann-windowed power spectra, one row per frame (no center padding)."""
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) < n_fft:
        raise DataError(f"audio has {len(samples)} samples, shorter than one {n_fft}-sample frame")
    frames = sliding_window_view(samples, n_fft)[::hop]
    window = np.hanning(n_fft + 1)[:-1]  # periodic Hann
    bins = np.fft.rfft(frames * window, axis=1)
    return bins.real**2 + bins.imag**2


def mel_spectrogram(
    w: Waveform, n_fft: int = N_FFT, hop: int = HOP, n_mels: int = N_MELS
) -> np.ndarray:
    """dB mel spectrogram of shape ``(1, n_mels, W)``, ``W = 1 + (N - n_fft) // hop``."""
    power = power_spectra(w.samples, n_fft, hop)
    fb = mel_filterbank(n_mels, n_fft, w.sample_rate)
    energy = fb @ power.T
    db = 10.0 * np.log10(np.maximum(energy, DB_FLOOR))
    return db[None].astype(np.float32)


def normalize(values: np.ndarray, hop: int = HOP, sample_rate: int = SAMPLE_RATE) -> Spectrogram:
    """Scale dB values by 0.01 and clamp to [-1, 1]."""
    scaled = np.asarray(values, dtype=np.float32) * np.float32(0.01)
    clamped = int(np.count_nonzero(np.abs(scaled) > 1.0))
    return Spectrogram(np.clip(scaled, -1.0, 1.0), sample_rate=sample_rate, hop=hop, clamped=clamped)


def spectrogram_from_waveform(
    w: Waveform,
    sample_rate: int = SAMPLE_RATE,
    n_mels: int = N_MELS,
    hop: int = HOP,
    n_fft: int = N_FFT,
) -> Spectrogram:
    w = resample_linear(w, sample_rate)
    spg = normalize(mel_spectrogram(w, n_fft=n_fft, hop=hop, n_mels=n_mels), hop=hop, sample_rate=sample_rate)
    if spg.clamped:
        log.info("clamped %d spectrogram values to [-1, 1]", spg.clamped)
    return spg


def check_pretrain_width(spg: Spectrogram, min_width: int = 64) -> None:
    if spg.width < min_width:
        raise DataError(f"spectrogram {spg.name or ''} has W={spg.width} < {min_width}")
    if spg.width < 2 * min_width:
        log.warning("spectrogram %s is short (W=%d < %d)", spg.name, spg.width, 2 * min_width)


# ---------------------------------------------------------------------------
# .spg cache


def write_spg(path, spg: Spectrogram) -> None:
    _, mels, width = spg.values.shape
    body = np.ascontiguousarray(spg.values[0], dtype="<f4").tobytes()
    header = SPG_MAGIC + struct.pack("<IIII", mels, width, spg.sample_rate, spg.hop)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + body)
    os.replace(tmp, path)


def read_spg(path) -> Spectrogram:
    raw = Path(path).read_bytes()
    if raw[:4] != SPG_MAGIC:
        raise DataError(f"{path}: not an SPG1 file")
    if len(raw) < 20:
        raise DataError(f"{path}: truncated header")
    mels, width, rate, hop = struct.unpack("<IIII", raw[4:20])
    need = 20 + 4 * mels * width
    if len(raw) != need:
        raise DataError(f"{path}: expected {need} bytes, found {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f4", offset=20).reshape(1, mels, width).astype(np.float32)
    return Spectrogram(vals, sample_rate=rate, hop=hop, name=Path(path).stem)


def load_spectrogram(path, **kw) -> Spectrogram:
    """Read a ``.spg`` cache or compute from a ``.wav`` file."""
    path = Path(path)
    if path.suffix.lower() == ".spg":
        return read_spg(path)
    spg = spectrogram_from_waveform(load_wav(path), **kw)
    spg.name = path.stem
    return spg
