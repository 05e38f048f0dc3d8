import numpy as np
import pytest

from patchifier import datapipe as dp
from patchifier.dsp import Spectrogram, mel_filterbank, spectrogram_from_waveform
from patchifier.errors import ConfigError, DataError, ShapeError


def spg(width, rng=None, fill=None):
    if fill is not None:
        return Spectrogram(np.full((1, 64, width), fill, np.float32))
    return Spectrogram(rng.uniform(-1, 1, (1, 64, width)).astype(np.float32))


# --- patchify -----------------------------------------------------------------


@pytest.mark.parametrize("width,n", [(320, 10), (65, 2), (32, 1)])
def test_patch_counts(width, n, rng):
    s = spg(width, rng)
    grid = dp.patchify(s)
    assert grid.n == n
    joined = np.concatenate([p.values for p in grid.patches], axis=-1)
    np.testing.assert_array_equal(joined, s.values[..., : n * 32])


def test_patchify_too_short(rng):
    with pytest.raises(DataError):
        dp.patchify(spg(31, rng))


def test_fixed_grids_skip_short_clips(rng):
    grids, kept = dp.fixed_grids([spg(100, rng), spg(40, rng), spg(200, rng)], 3)
    assert grids.shape == (2, 3, 1, 64, 32)
    assert kept == [0, 2]


# --- augmentations -------------------------------------------------------------


def test_resize_100_to_120(rng):
    out = dp.random_resize_width(spg(100, rng), rng, ratio=(1.2, 1.2))
    assert out.values.shape == (1, 64, 120)


def test_resize_identity_ratio(rng):
    s = spg(77, rng)
    np.testing.assert_array_equal(dp.random_resize_width(s, rng, ratio=(1.0, 1.0)).values, s.values)


@pytest.mark.parametrize("ratio", [0.9, 1.05, 1.2])
def test_resize_constant(ratio, rng):
    out = dp.random_resize_width(spg(50, fill=-0.3), rng, ratio=(ratio, ratio))
    np.testing.assert_allclose(out.values, -0.3, atol=1e-7)


def test_resize_keeps_end_points(rng):
    s = spg(40, rng)
    out = dp.resize_width(s.values, 47)
    np.testing.assert_array_equal(out[..., 0], s.values[..., 0])
    np.testing.assert_allclose(out[..., -1], s.values[..., -1], atol=1e-6)


def test_crop_from_exact_width(rng):
    s = spg(32, rng)
    crops = dp.random_crop_patches(s, rng, count=25)
    assert len(crops) == 25
    assert all(c.index == 0 and np.array_equal(c.values, s.values) for c in crops)


def test_crops_are_seeded(rng):
    s = spg(320, rng)
    a = dp.random_crop_patches(s, np.random.default_rng(5))
    b = dp.random_crop_patches(s, np.random.default_rng(5))
    assert [p.index for p in a] == [p.index for p in b]
    assert all(p.values.shape == (1, 64, 32) and 0 <= p.index <= 288 for p in a)


def test_crop_too_narrow(rng):
    with pytest.raises(DataError):
        dp.random_crop_patches(spg(20, rng), rng)


def test_intensity_zero_and_identity(rng):
    zero = dp.Patch(np.zeros((1, 64, 32), np.float32))
    assert not dp.random_intensity(zero, rng).values.any()
    p = dp.Patch(rng.uniform(-1, 1, (1, 64, 32)).astype(np.float32))
    np.testing.assert_array_equal(dp.random_intensity(p, rng, ratio=(1.0, 1.0)).values, p.values)


def test_intensity_bound(rng):
    p = dp.Patch(rng.uniform(-1, 1, (1, 64, 32)).astype(np.float32))
    out = dp.random_intensity(p, rng).values
    assert np.all(np.abs(out) <= np.minimum(1.0, 1.2 * np.abs(p.values)) + 1e-7)
    assert np.all(np.abs(out) >= np.minimum(1.0, 0.8 * np.abs(p.values)) - 1e-7)


def test_stage1_patches_stay_in_range(rng):
    spgs = [spg(90, rng, fill=None) for _ in range(3)]
    gens = [np.random.default_rng(i) for i in range(3)]
    out = dp.stage1_patches(spgs, *gens, crops=5)
    assert len(out) == 15
    assert all(np.abs(p.values).max() <= 1.0 for p in out)


# --- batching --------------------------------------------------------------------


def test_batch_sizes(rng):
    items = [rng.normal(size=(1, 64, 32)) for _ in range(70)]
    batches = dp.make_batch(items, 32)
    assert [len(b) for b in batches] == [32, 32, 6]
    np.testing.assert_array_equal(np.concatenate(batches), np.stack(items))
    assert [len(b) for b in dp.make_batch(items[:1])] == [1]


def test_heterogeneous_batch(rng):
    with pytest.raises(ShapeError):
        dp.make_batch([np.zeros((1, 64, 32)), np.zeros((1, 64, 31))])


# --- synthetic fixtures -------------------------------------------------------------


def test_synth_is_deterministic_and_bounded():
    a = dp.synth_clip(2, 11)
    b = dp.synth_clip(2, 11)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert a.samples.shape == (3 * 22050,)
    assert np.abs(a.samples).max() <= 1.0
    assert not np.array_equal(a.samples, dp.synth_clip(2, 12).samples)


def test_synth_rejects_unknown_class():
    with pytest.raises(ConfigError):
        dp.synth_clip(4, 0, n_classes=4)


def test_classes_occupy_disjoint_mel_bins():
    fb = mel_filterbank()
    hz_per_bin = 22050 / 1024
    bins = []
    for c, (lo, hi) in enumerate(dp.class_bands(4)):
        vals = spectrogram_from_waveform(dp.synth_clip(c, 0)).values[0]
        top = set(np.argmax(vals, axis=0).tolist())
        bins.append(top)
        # the dominant mel bin's peak response sits inside the class band
        for b in top:
            centre_hz = np.argmax(fb[b]) * hz_per_bin
            assert lo * 0.8 <= centre_hz <= hi * 1.2
    for i in range(4):
        for j in range(i + 1, 4):
            assert bins[i].isdisjoint(bins[j])


def test_regression_targets_range_and_examples():
    assert dp.regression_targets(-24.0, -12.0) == pytest.approx((-1.0, -1.0))
    assert dp.regression_targets(0.0, 12.0) == pytest.approx((1.0, 1.0))
    assert dp.regression_targets(-12.0, 0.0) == pytest.approx((0.0, 0.0))
    wave, (a, v) = dp.synth_regression_clip(3)
    assert -1 <= a <= 1 and -1 <= v <= 1
    assert np.abs(wave.samples).max() <= 1.0


def test_regression_clips_carry_their_targets():
    clips = [dp.synth_regression_clip(i, seconds=1.0) for i in range(12)]
    spgs = [spectrogram_from_waveform(w).values[0] for w, _ in clips]
    arousal = [t[0] for _, t in clips]
    valence = [t[1] for _, t in clips]
    level = [s.mean() for s in spgs]
    tilt = [s[32:].mean() - s[:32].mean() for s in spgs]
    assert np.corrcoef(level, arousal)[0, 1] > 0.9
    assert np.corrcoef(tilt, valence)[0, 1] > 0.9


# --- manifests ------------------------------------------------------------------------


def write(tmp_path, text):
    p = tmp_path / "manifest.csv"
    p.write_text(text)
    return p


def test_manifest_classification(tmp_path):
    m = dp.load_manifest(write(tmp_path, "a.spg,0,train\nb.spg,1,valid\nc.spg,2,test\n"))
    assert (m.task, m.n_classes) == ("cls", 3)
    assert [e.path.name for e in m.split("train")] == ["a.spg"]
    assert m.entries[0].path == tmp_path / "a.spg"


def test_manifest_regression(tmp_path):
    m = dp.load_manifest(write(tmp_path, "path,arousal,valence,split\na.spg,0.5,-0.25,train\n"))
    assert m.task == "reg"
    assert m.entries[0].label == (0.5, -0.25)


@pytest.mark.parametrize(
    "text,match",
    [
        ("a.spg,0,train\nb.spg,2,train\n", "dense"),
        ("a.spg,0,train\na.spg,0,test\n", "duplicate"),
        ("a.spg,0,holdout\n", "split"),
        ("a.spg,x,train\n", "label"),
        ("a.spg,0,train\nb.spg,0.1,0.2,train\n", "columns"),
        ("# only a comment\n", "no entries"),
        ("a.spg,nan,0.1,train\n", "non-finite"),
    ],
)
def test_manifest_errors(tmp_path, text, match):
    with pytest.raises(DataError, match=match):
        dp.load_manifest(write(tmp_path, text))


def test_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        dp.load_manifest(tmp_path / "nope.csv")


def test_split_rule():
    assert [dp.split_for(i) for i in range(8)] == ["train"] * 3 + ["test"] + ["train"] * 3 + ["test"]
