import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from patchifier import cli
from patchifier.checkpoint import save_checkpoint
from patchifier.config import TrainConfig
from patchifier.datapipe import patchify
from patchifier.dsp import read_spg
from patchifier.experiments import overfit_stage1
from patchifier.model import Patchifier
from patchifier.numerics.gradcheck import REGISTRY

TINY_CONFIG = """\
# tiny shape so the whole pipeline runs in seconds
fe_channels = 2,2,2,2,2
hidden = 8
layers = 2
heads = 2
ffn = 16
max_seq_len = 8
dropout = 0.0
n_patches = 3
crops_per_clip = 3
batch_size = 8
lr = 1e-3
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> preprocess -> pretrain1 -> pretrain2 through the CLI, shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY_CONFIG)
    cfg = ["--config", str(root / "tiny.cfg"), "-q"]
    assert cli.main(["synth", "--out", str(root / "wav"), "--classes", "2", "--per-class", "4", "--seconds", "3.2", "-q"]) == 0
    assert cli.main(["preprocess", "--in", str(root / "wav"), "--out", str(root / "data"), "-q"]) == 0
    assert cli.main(["pretrain1", "--data", str(root / "data"), "--out", str(root / "s1.pckp"), *cfg]) == 0
    assert cli.main(["pretrain2", "--init", str(root / "s1.pckp"), "--data", str(root / "data"), "--out", str(root / "s2.pckp"), *cfg]) == 0
    return root


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    assert "pretrain2" in capsys.readouterr().out


def test_help_via_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "patchifier", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "usage" in proc.stdout


def test_unknown_command_is_usage_error(capsys):
    assert cli.main(["explode"]) == 1
    assert cli.main([]) == 1


def test_bad_flag_value_is_usage_error():
    assert cli.main(["gradcheck", "--seed", "abc"]) == 1


def test_pretrain2_requires_init(workspace, capsys):
    code = cli.main(["pretrain2", "--data", str(workspace / "data"), "--out", str(workspace / "x.pckp"), "-q"])
    assert code == 1
    assert "--init" in capsys.readouterr().err


def test_missing_data_is_a_data_error(tmp_path):
    assert cli.main(["pretrain1", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "o.pckp"), "-q"]) == 2


def test_unknown_config_key(tmp_path, workspace):
    (tmp_path / "bad.cfg").write_text("learning_rate = 1\n")
    code = cli.main(["pretrain1", "--config", str(tmp_path / "bad.cfg"), "--data", str(workspace / "data"), "--out", str(tmp_path / "o.pckp")])
    assert code == 1


def test_pretraining_writes_loss_csv(workspace):
    rows = (workspace / "s2.loss.csv").read_text().splitlines()
    assert rows[0] == "epoch,loss,steps" and len(rows) == 2


def test_finetune_and_evaluate(workspace, tmp_path, capsys):
    out = tmp_path / "ft"
    code = cli.main(
        ["finetune", "--ckpt", str(workspace / "s2.pckp"), "--manifest", str(workspace / "data" / "manifest.csv"),
         "--mode", "full", "--out", str(out), "--epochs", "2", "-q"]
    )  # fmt: skip
    assert code == 0
    assert (out / "finetuned.pckp").exists() and (out / "curve.csv").exists()
    capsys.readouterr()
    assert cli.main(["evaluate", "--ckpt", str(out), "--manifest", str(workspace / "data" / "manifest.csv"), "-q"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert 0.0 <= report["metric"]["accuracy"] <= 1.0
    assert len(report["curve"]) == 2


def test_finetune_rejects_shape_override(workspace, tmp_path):
    code = cli.main(
        ["finetune", "--ckpt", str(workspace / "s2.pckp"), "--manifest", str(workspace / "data" / "manifest.csv"),
         "--out", str(tmp_path / "ft"), "--set", "hidden=16", "-q"]
    )  # fmt: skip
    assert code == 1


def read_pgm_dims(path):
    head = path.read_bytes().split(b"\n", 3)
    assert head[0] == b"P5"
    w, h = map(int, head[1].split())
    return w, h


def test_reconstruct_outputs(workspace, tmp_path, capsys):
    spg_path = sorted((workspace / "data").rglob("*.spg"))[0]
    before = spg_path.read_bytes()
    code = cli.main(
        ["reconstruct", "--ckpt", str(workspace / "s2.pckp"), "--spg", str(spg_path), "--n-patches", "4",
         "--mask-ratio", "0.5", "--out", str(tmp_path), "-q"]
    )  # fmt: skip
    assert code == 0
    assert spg_path.read_bytes() == before
    for name in ("original", "masked", "reconstructed"):
        assert read_pgm_dims(tmp_path / f"{name}.pgm") == (4 * 32, 64)
    line = capsys.readouterr().out.strip()
    assert "patches=4 masked=2" in line
    with open(tmp_path / "patch_mse.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert sum(int(r["masked"]) for r in rows) == 2


def test_reconstruct_too_many_patches(workspace, tmp_path):
    spg_path = sorted((workspace / "data").rglob("*.spg"))[0]
    args = ["reconstruct", "--ckpt", str(workspace / "s2.pckp"), "--spg", str(spg_path), "--n-patches", "40", "--out", str(tmp_path), "-q"]
    assert cli.main(args) == 2


def _save_as_pretrained(path, model, cfg):
    meta = {"stage": "2", **{f"config.{k}": v for k, v in cfg.to_dict().items()}}
    save_checkpoint(path, model.arrays(), None, meta)


def _patch_mse(out_dir):
    with open(out_dir / "patch_mse.csv") as fh:
        rows = list(csv.DictReader(fh))
    masked = [float(r["mse"]) for r in rows if r["masked"] == "1"]
    visible = [float(r["mse"]) for r in rows if r["masked"] == "0"]
    return np.mean(masked), np.mean(visible)


def test_overfit_model_reconstructs_visible_patches_better_than_init(workspace, tmp_path):
    spg_path = sorted((workspace / "data").rglob("*.spg"))[0]
    cfg = TrainConfig(fe_channels=(4, 8, 8, 16, 16), hidden=32, layers=1, heads=2, ffn=64, max_seq_len=8, n_patches=4, lr=3e-3, dropout=0.0)
    model = Patchifier(cfg.model_config(), seed=0)
    _save_as_pretrained(tmp_path / "init.pckp", model, cfg)
    patches = patchify(read_spg(spg_path)).array()[:4]
    assert overfit_stage1(model, patches, cfg, max_steps=300, target=1e-2).reached
    _save_as_pretrained(tmp_path / "fit.pckp", model, cfg)
    base = ["reconstruct", "--spg", str(spg_path), "--n-patches", "4", "--seed", "1", "-q"]
    assert cli.main([*base, "--ckpt", str(tmp_path / "init.pckp"), "--out", str(tmp_path / "a")]) == 0
    assert cli.main([*base, "--ckpt", str(tmp_path / "fit.pckp"), "--out", str(tmp_path / "b")]) == 0
    init_masked, _ = _patch_mse(tmp_path / "a")
    _, fit_visible = _patch_mse(tmp_path / "b")
    assert fit_visible < init_masked


def test_gradcheck_lists_every_registered_check(capsys):
    assert cli.main(["gradcheck", "--list"]) == 0
    listed = capsys.readouterr().out.split()
    assert listed == list(REGISTRY)


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck", "--scope", "relu,softmax,head", "-q"]) == 0
    out = capsys.readouterr().out
    assert "3/3 checks" in out


def test_gradcheck_detects_corrupted_backward(monkeypatch, capsys):
    from patchifier.numerics import ops

    real_tanh = ops.tanh

    def broken_tanh(x):
        out = real_tanh(x)
        out._backward = lambda g: x._accumulate(2 * g)
        return out

    monkeypatch.setattr(ops, "tanh", broken_tanh)
    assert cli.main(["gradcheck", "--scope", "tanh", "-q"]) == 3
    assert "FAIL" in capsys.readouterr().out


def test_gradcheck_unknown_name():
    assert cli.main(["gradcheck", "--scope", "nope"]) == 1


def test_preprocess_mirrors_tree(tmp_path, capsys):
    from patchifier.datapipe import synth_clip
    from patchifier.dsp import write_wav

    (tmp_path / "wav" / "a").mkdir(parents=True)
    write_wav(tmp_path / "wav" / "a" / "x.wav", synth_clip(0, 0, seconds=1.0))
    (tmp_path / "wav" / "manifest.csv").write_text("a/x.wav,0,train\n")
    assert cli.main(["preprocess", "--in", str(tmp_path / "wav"), "--out", str(tmp_path / "spg"), "-q"]) == 0
    assert read_spg(tmp_path / "spg" / "a" / "x.spg").values.shape == (1, 64, 42)
    assert (tmp_path / "spg" / "manifest.csv").read_text().strip() == "a/x.spg,0,train"
    assert cli.main(["preprocess", "--in", str(tmp_path / "wav"), "--out", str(tmp_path / "wav"), "-q"]) == 1
