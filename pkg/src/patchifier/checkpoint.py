"""The ``.pckp`` archive: magic, version, key=value metadata, named f32 tensors.

Layout (little endian)::

    b"PCKP" | u32 version | u32 meta_len | meta (UTF-8 "key=value" lines)
    | u32 count | count x (u16 name_len | name | u8 rank | rank x u64 dim | f32 data)

Optimizer moments are stored as ordinary records named ``opt.m.<param>`` and
``opt.v.<param>``; the step count goes in metadata as ``opt.t``.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, DataError, ShapeError

MAGIC = b"PCKP"
VERSION = 1


class CheckpointError(DataError):
    pass


class CheckpointShapeError(CheckpointError, ShapeError):
    pass


def _encode_meta(meta: Mapping[str, object]) -> bytes:
    lines = []
    for k, v in meta.items():
        v = str(v)
        if "=" in k or "\n" in k or "\n" in v:
            raise ConfigError(f"metadata entry {k!r} cannot contain '=' in the key or newlines")
        lines.append(f"{k}={v}\n")
    return "".join(lines).encode("utf-8")


def _decode_meta(raw: bytes) -> dict[str, str]:
    out = {}
    for line in raw.decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            out[k] = v
    return out


def save_checkpoint(
    path,
    params: Mapping[str, np.ndarray],
    opt_state: Mapping | None = None,
    meta: Mapping[str, object] | None = None,
) -> None:
    """Write atomically (temp file + rename); partial files are removed on failure."""
    records: list[tuple[str, np.ndarray]] = list(params.items())
    meta = dict(meta or {})
    if opt_state is not None:
        records += [(f"opt.m.{k}", v) for k, v in opt_state["m"].items()]
        records += [(f"opt.v.{k}", v) for k, v in opt_state["v"].items()]
        meta["opt.t"] = int(opt_state["t"])
    names = [n for n, _ in records]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ConfigError(f"duplicate tensor names: {dupes}")

    chunks = [MAGIC, struct.pack("<I", VERSION)]
    meta_bytes = _encode_meta(meta)
    chunks += [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(records))]
    for name, arr in records:
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            for c in chunks:
                fh.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """All records and metadata, without schema validation."""
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a PCKP checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = r.unpack("<I")
    meta = _decode_meta(r.take(meta_len))
    (count,) = r.unpack("<I")
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        if name in records:
            raise CheckpointError(f"{path}: duplicate record {name}")
        records[name] = data
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return records, meta


def load_checkpoint(
    path,
    expected_schema: Mapping[str, tuple[int, ...]] | None = None,
    allow_extra: bool = False,
) -> tuple[dict[str, np.ndarray], dict | None, dict[str, str]]:
    """Return ``(params, opt_state, meta)``.

    With ``expected_schema``, every listed name must be present with those dims;
    names outside it are an error unless ``allow_extra``. Optimizer records are
    split off into ``opt_state`` and never count as extra.
    """
    if not Path(path).exists():
        raise CheckpointError(f"checkpoint {path} not found")
    records, meta = read_checkpoint(path)
    params = {k: v for k, v in records.items() if not k.startswith("opt.")}
    opt_state = None
    if "opt.t" in meta:
        opt_state = {
            "m": {k[6:]: v for k, v in records.items() if k.startswith("opt.m.")},
            "v": {k[6:]: v for k, v in records.items() if k.startswith("opt.v.")},
            "t": int(meta["opt.t"]),
        }
    if expected_schema is not None:
        for name, dims in expected_schema.items():
            if name not in params:
                raise CheckpointError(f"{path}: missing tensor {name}")
            if tuple(params[name].shape) != tuple(dims):
                raise CheckpointShapeError(f"{path}: tensor {name} has dims {params[name].shape}, expected {tuple(dims)}")
        extra = sorted(set(params) - set(expected_schema))
        if extra and not allow_extra:
            raise CheckpointError(f"{path}: unexpected tensors {extra[:5]}{'...' if len(extra) > 5 else ''}")
        if allow_extra:
            params = {k: params[k] for k in expected_schema}
    return params, opt_state, meta
