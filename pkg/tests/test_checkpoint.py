import struct

import numpy as np
import pytest

from patchifier.checkpoint import (
    CheckpointError,
    CheckpointShapeError,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from patchifier.errors import ConfigError, ShapeError
from patchifier.model import ModelConfig, Patchifier


def test_round_trip_is_bitwise(tmp_path, rng):
    params = {
        "a.weight": rng.normal(size=(3, 4)).astype(np.float32),
        "b": np.array([np.float32(1e-38), -0.0, np.inf], np.float32),
        "scalar": np.array(2.5, np.float32),
    }
    opt = {"m": {"a.weight": np.ones((3, 4))}, "v": {"a.weight": np.full((3, 4), 0.5)}, "t": 7}
    meta = {"stage": 1, "note": "x = y", "empty": ""}
    save_checkpoint(tmp_path / "c.pckp", params, opt, meta)
    got, got_opt, got_meta = load_checkpoint(tmp_path / "c.pckp")
    assert list(got) == list(params)
    for k in params:
        assert got[k].dtype == np.float32 and got[k].tobytes() == params[k].tobytes()
    assert got_opt["t"] == 7
    np.testing.assert_array_equal(got_opt["v"]["a.weight"], 0.5)
    assert got_meta == {"stage": "1", "note": "x = y", "empty": "", "opt.t": "7"}


def test_empty_checkpoint(tmp_path):
    save_checkpoint(tmp_path / "e.pckp", {})
    raw = (tmp_path / "e.pckp").read_bytes()
    assert raw == b"PCKP" + struct.pack("<III", 1, 0, 0)
    assert read_checkpoint(tmp_path / "e.pckp") == ({}, {})


def test_duplicate_names_rejected(tmp_path):
    opt = {"m": {"opt.m.w": np.zeros(1)}, "v": {}, "t": 0}
    with pytest.raises(ConfigError, match="duplicate"):
        save_checkpoint(tmp_path / "d.pckp", {"opt.m.opt.m.w": np.zeros(1)}, opt)
    assert list(tmp_path.iterdir()) == []


def test_failed_write_leaves_no_partial_file(tmp_path):
    with pytest.raises(ConfigError):
        save_checkpoint(tmp_path / "m.pckp", {"w": np.zeros(1)}, meta={"bad\nkey": 1})
    assert list(tmp_path.iterdir()) == []


@pytest.mark.parametrize(
    "damage,match",
    [
        (lambda raw: b"NOPE" + raw[4:], "magic"),
        (lambda raw: raw[:4] + struct.pack("<I", 9) + raw[8:], "version"),
        (lambda raw: raw[:-1], "truncated"),
        (lambda raw: raw + b"\0", "trailing"),
    ],
)
def test_corrupt_files(tmp_path, damage, match):
    save_checkpoint(tmp_path / "c.pckp", {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    (tmp_path / "c.pckp").write_bytes(damage((tmp_path / "c.pckp").read_bytes()))
    with pytest.raises(CheckpointError, match=match):
        load_checkpoint(tmp_path / "c.pckp")


def test_shape_mismatch_names_the_tensor(tmp_path):
    save_checkpoint(tmp_path / "c.pckp", {"fe.proj.weight": np.zeros((2, 3)), "x": np.zeros(1)})
    with pytest.raises(ShapeError, match="fe.proj.weight"):
        load_checkpoint(tmp_path / "c.pckp", {"fe.proj.weight": (3, 2), "x": (1,)})
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(tmp_path / "c.pckp", {"fe.proj.weight": (3, 2), "x": (1,)})


def test_schema_missing_and_extra(tmp_path):
    save_checkpoint(tmp_path / "c.pckp", {"a": np.zeros(1), "b": np.zeros(2)})
    with pytest.raises(CheckpointError, match="missing tensor c"):
        load_checkpoint(tmp_path / "c.pckp", {"c": (1,)})
    with pytest.raises(CheckpointError, match="unexpected"):
        load_checkpoint(tmp_path / "c.pckp", {"a": (1,)})
    params, _, _ = load_checkpoint(tmp_path / "c.pckp", {"a": (1,)}, allow_extra=True)
    assert list(params) == ["a"]


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none.pckp")


def test_stage1_subset_restores_fe_and_decoder(tmp_path):
    cfg = ModelConfig.tiny()
    src = Patchifier(cfg, seed=1)
    save_checkpoint(tmp_path / "s1.pckp", src.arrays(("fe", "decoder")), meta={"stage": 1})
    dst = Patchifier(cfg, seed=2)
    fresh_bottleneck = {k: v.copy() for k, v in dst.bottleneck.arrays().items()}
    arrays, _, _ = load_checkpoint(tmp_path / "s1.pckp", dst.schema(("fe", "decoder")))
    dst.load_arrays(arrays, ("fe", "decoder"))
    for k, v in src.arrays(("fe", "decoder")).items():
        assert np.array_equal(dst.arrays()[k], v)
    for k, v in fresh_bottleneck.items():
        assert np.array_equal(dst.bottleneck.arrays()[k], v)
    with pytest.raises(CheckpointError, match="bottleneck"):
        load_checkpoint(tmp_path / "s1.pckp", dst.schema())
