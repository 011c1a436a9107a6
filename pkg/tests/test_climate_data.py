import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from stormseg.checkpoint import load_checkpoint, save_checkpoint
from stormseg.climate_data import tensorfile as tf
from stormseg.climate_data.dataset import (
    PAPER_TEST_YEARS,
    PAPER_TRAIN_YEARS,
    PAPER_VAL_YEARS,
    Dataset,
    class_frequencies,
    compute_class_weights,
    compute_normalization_stats,
    load_manifest,
    load_split_samples,
    roll_longitude,
    split_arrays,
    split_by_year,
    standardize,
    write_dataset,
)
from stormseg.climate_data.sample import ClimateSample, GridGeometry
from stormseg.climate_data.synthetic import (
    SyntheticConfig,
    SyntheticOverlapError,
    gen_synthetic_dataset,
)
from stormseg.model import TINY_CONFIG, forward, init_model

GOLDEN_1X1 = bytes.fromhex("43 47 54 31 01 02 01 00 00 00 01 00 00 00 00 00 80 3F")


# ----------------------------------------------------------------------------
# CGT1 container
# ----------------------------------------------------------------------------

def test_golden_one_by_one_float32():
    arr = np.array([[1.0]], np.float32)
    assert tf.encode_tensor(arr) == GOLDEN_1X1
    back = tf.decode_tensor(GOLDEN_1X1)
    assert back.dtype == np.float32 and back.shape == (1, 1) and back[0, 0] == 1.0


def test_golden_file_round_trip(tmp_path):
    p = tmp_path / "one.cgt"
    p.write_bytes(GOLDEN_1X1)
    tf.write_tensor_file(tf.read_tensor_file(p), tmp_path / "two.cgt")
    assert (tmp_path / "two.cgt").read_bytes() == GOLDEN_1X1


@settings(max_examples=60, deadline=None)
@given(st.sampled_from([np.float32, np.float64, np.uint8]).flatmap(
    lambda dt: hnp.arrays(dt, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5))))
def test_round_trip_is_bitwise(arr):
    buf = tf.encode_tensor(arr)
    back = tf.decode_tensor(buf)
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == np.ascontiguousarray(arr).tobytes()
    assert tf.encode_tensor(back) == buf


def test_uint8_and_float64_codes():
    assert tf.encode_tensor(np.zeros((2,), np.uint8))[4] == 2
    assert tf.encode_tensor(np.zeros((2,), np.float64))[4] == 3


def test_decode_errors():
    with pytest.raises(tf.BadMagicError):
        tf.decode_tensor(b"XXXX" + GOLDEN_1X1[4:])
    with pytest.raises(tf.UnknownDtypeError):
        tf.decode_tensor(GOLDEN_1X1[:4] + b"\x09" + GOLDEN_1X1[5:])
    with pytest.raises(tf.TruncatedFileError):
        tf.decode_tensor(GOLDEN_1X1[:-1])
    with pytest.raises(tf.TruncatedFileError):
        tf.decode_tensor(GOLDEN_1X1[:8])
    with pytest.raises(tf.TensorFileError, match="trailing"):
        tf.decode_tensor(GOLDEN_1X1 + b"\x00")
    with pytest.raises(tf.UnknownDtypeError):
        tf.encode_tensor(np.zeros(2, np.int32))


def test_read_error_names_path(tmp_path):
    bad = tmp_path / "bad.cgt"
    bad.write_bytes(b"nope")
    with pytest.raises(tf.TensorFileError, match="bad.cgt"):
        tf.read_tensor_file(bad)
    with pytest.raises(FileNotFoundError, match="missing.cgt"):
        tf.read_tensor_file(tmp_path / "missing.cgt")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    tf.write_tensor_file(np.arange(4, dtype=np.float32), tmp_path / "a" / "x.cgt")
    assert sorted(os.listdir(tmp_path / "a")) == ["x.cgt"]


# ----------------------------------------------------------------------------
# geometry, samples, datasets
# ----------------------------------------------------------------------------

def test_regular_geometry_is_cell_centred():
    g = GridGeometry.regular(4, 8)
    np.testing.assert_allclose(g.lat, [-67.5, -22.5, 22.5, 67.5])
    assert g.dlon_deg == 45.0
    assert GridGeometry.from_dict(json.loads(json.dumps(g.to_dict()))) == g
    with pytest.raises(ValueError):
        GridGeometry(np.array([0.0, 0.0, 1.0]), np.arange(4.0))
    with pytest.raises(ValueError):
        GridGeometry(np.array([0.0, 100.0]), np.arange(4.0))


def test_sample_validation():
    g = GridGeometry.regular(4, 8)
    with pytest.raises(ValueError, match="unknown channel"):
        ClimateSample({"FOO": np.zeros((4, 8))}, np.zeros((4, 8)), g)
    with pytest.raises(ValueError, match="does not match geometry"):
        ClimateSample({"TMQ": np.zeros((4, 7))}, np.zeros((4, 8)), g)
    s = ClimateSample({"TMQ": np.ones((4, 8)), "PSL": np.zeros((4, 8))}, np.zeros((4, 8)), g)
    assert s.stack(["PSL", "TMQ"]).shape == (2, 4, 8)
    with pytest.raises(KeyError, match="U850"):
        s.stack(["U850"])


@pytest.fixture(scope="module")
def small_synthetic():
    return gen_synthetic_dataset(SyntheticConfig(counts={"train": 6, "val": 2, "test": 2}, seed=4))


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_dataset_write_read_round_trip(tmp_path, small_synthetic):
    samples, splits = small_synthetic
    man = write_dataset(tmp_path, samples, splits)
    ds = Dataset(tmp_path)
    assert ds.manifest == load_manifest(tmp_path) == man
    assert man.split_counts() == {"train": 6, "val": 2, "test": 2}
    for s, rec in zip(samples, ds.records()):
        back = ds.load_sample(rec)
        assert back.sample_id == s.sample_id and back.year == s.year
        assert np.array_equal(back.labels, s.labels)
        for c in s.channels:
            assert np.array_equal(back.channels[c], s.channels[c].astype(np.float32))
    # normalisation comes from the stored float32 train samples
    stats = compute_normalization_stats(ds.samples("train"), man.channels)
    assert stats == man.normalization


def test_corrupt_manifest_names_path(tmp_path, small_synthetic):
    write_dataset(tmp_path, *small_synthetic)
    (tmp_path / "manifest.json").write_text("{broken")
    with pytest.raises(ValueError, match="manifest.json"):
        Dataset(tmp_path)
    with pytest.raises(FileNotFoundError):
        Dataset(tmp_path / "nowhere")


def test_reading_does_not_mutate_dataset(tmp_path, small_synthetic):
    write_dataset(tmp_path, *small_synthetic)
    before = tree_digest(tmp_path)
    ds = Dataset(tmp_path)
    split_arrays(ds, "train", ["TMQ", "U850", "V850", "PSL", "VRT850"])
    assert tree_digest(tmp_path) == before


def test_engineered_channels_derived_on_the_fly(tmp_path, small_synthetic):
    write_dataset(tmp_path, *small_synthetic)
    ds = Dataset(tmp_path)
    out = load_split_samples(ds, "val", ["TMQ", "WS850", "VRTBOT"])
    assert list(out[0].channels) == ["TMQ", "WS850", "VRTBOT"]
    with pytest.raises(KeyError, match="Z200"):
        load_split_samples(ds, "val", ["Z200"])


def test_split_arrays_are_standardised(tmp_path, small_synthetic):
    write_dataset(tmp_path, *small_synthetic)
    x, y, samples = split_arrays(Dataset(tmp_path), "train", ["TMQ", "PSL"])
    assert x.shape == (6, 2, 32, 64) and y.shape == (6, 32, 64) and y.dtype == np.uint8
    np.testing.assert_allclose(x.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
    np.testing.assert_allclose(x.std(axis=(0, 2, 3)), 1.0, rtol=1e-6)


def test_split_by_year(small_synthetic, tmp_path):
    man = write_dataset(tmp_path, *small_synthetic)
    years = sorted({r.year for r in man.samples})
    re = split_by_year(man, years[:-1], [], years[-1:])
    assert all(r.split == "test" for r in re.samples if r.year == years[-1])
    with pytest.raises(ValueError, match="both"):
        split_by_year(man, years, years[:1], [])
    with pytest.raises(ValueError, match="not assigned"):
        split_by_year(man, years[:1], [], [])


def test_year_constants():
    assert PAPER_TRAIN_YEARS == tuple(range(1996, 2008))
    assert PAPER_VAL_YEARS == (2008, 2009, 2010) and PAPER_TEST_YEARS == (2011, 2012, 2013)


def test_class_frequencies_and_weights():
    labs = [np.array([[0, 0, 0, 1]]), np.array([[0, 2, 2, 0]])]
    f = class_frequencies(labs)
    assert f.counts.tolist() == [5, 1, 2] and f.total == 8
    w = compute_class_weights(f, "inverse", "none")
    np.testing.assert_allclose(w.w, [8 / 5, 8.0, 4.0])
    assert sum(compute_class_weights(f, "inverse").w) == pytest.approx(3.0)
    ws = compute_class_weights(f, "inverse_sqrt", "convex")
    assert sum(ws.w) == pytest.approx(1.0) and ws.w[1] > ws.w[2] > ws.w[0]
    with pytest.raises(ValueError, match="zero"):
        compute_class_weights(class_frequencies([np.zeros((2, 2))]), "inverse")
    assert class_frequencies([np.zeros((2, 2))]).fractions.tolist() == [1.0, 0.0, 0.0]


def test_standardize_and_std_floor():
    g = GridGeometry.regular(2, 4)
    s = ClimateSample({"TMQ": np.arange(8.0).reshape(2, 4), "PSL": np.full((2, 4), 5.0)},
                      np.zeros((2, 4)), g)
    stats = compute_normalization_stats([s], ["TMQ", "PSL"])
    assert stats["TMQ"]["std"] == pytest.approx(np.arange(8.0).std())
    z = standardize(s, stats)
    assert np.isfinite(z.channels["PSL"]).all() and (z.channels["PSL"] == 0).all()
    with pytest.raises(KeyError, match="TMQ"):
        standardize(s, {"PSL": stats["PSL"]})


def test_roll_longitude_moves_grids_and_longitudes():
    g = GridGeometry.regular(2, 8)
    s = ClimateSample({"TMQ": np.arange(16.0).reshape(2, 8)}, np.eye(2, 8), g)
    r = roll_longitude(s, 3)
    assert np.array_equal(r.channels["TMQ"], np.roll(s.channels["TMQ"], 3, axis=1))
    assert np.array_equal(r.labels, np.roll(s.labels, 3, axis=1))
    # the column now at position 3 carries the longitude of original column 0
    assert r.geometry.lon[3] % 360 == g.lon[0]


# ----------------------------------------------------------------------------
# synthetic generator
# ----------------------------------------------------------------------------

def test_synthetic_is_deterministic(small_synthetic):
    again, _ = gen_synthetic_dataset(SyntheticConfig(counts={"train": 6, "val": 2, "test": 2}, seed=4))
    for a, b in zip(small_synthetic[0], again):
        assert np.array_equal(a.labels, b.labels)
        assert all(np.array_equal(a.channels[c], b.channels[c]) for c in a.channels)


def test_synthetic_properties(small_synthetic):
    samples, splits = small_synthetic
    assert splits == ["train"] * 6 + ["val"] * 2 + ["test"] * 2
    for s, sp in zip(samples, splits):
        assert (s.labels == 0).mean() >= 0.9
        assert (s.labels == 1).any()
        years = {"train": PAPER_TRAIN_YEARS, "val": PAPER_VAL_YEARS, "test": PAPER_TEST_YEARS}[sp]
        assert s.year in years
        tc_rows = np.flatnonzero((s.labels == 1).any(axis=1))
        assert (np.abs(s.geometry.lat[tc_rows]) <= 50).all()
        # pressure minimum along TC pixels sits below the grid median
        assert s.channels["PSL"][s.labels == 1].min() < np.median(s.channels["PSL"])


def test_synthetic_all_channels():
    samples, _ = gen_synthetic_dataset(SyntheticConfig(counts={"train": 1}, all_channels=True))
    assert len(samples[0].channels) == 16


def test_synthetic_overlap_budget_error():
    cfg = SyntheticConfig(counts={"train": 1}, height=16, width=16, tc_per_sample=(6, 6),
                          tc_radius=(5, 5), retry_budget=3)
    with pytest.raises(SyntheticOverlapError, match="overlap"):
        gen_synthetic_dataset(cfg)


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

def test_checkpoint_round_trip_is_bitwise(tmp_path):
    mp = init_model(TINY_CONFIG)
    x = np.random.default_rng(2).normal(size=(2, 4, 32, 32))
    forward(x, mp, TINY_CONFIG, "train")  # move the running buffers off their init
    save_checkpoint(tmp_path / "ck", mp, TINY_CONFIG, {"channels": ["TMQ"]})
    mp2, cfg2, meta = load_checkpoint(tmp_path / "ck")
    assert cfg2 == TINY_CONFIG and meta == {"channels": ["TMQ"]}
    assert all(np.array_equal(mp[k].data, mp2[k].data) for k in mp.params)
    assert all(np.array_equal(mp.buffers[k], mp2.buffers[k]) for k in mp.buffers)
    assert np.array_equal(forward(x, mp, TINY_CONFIG).data, forward(x, mp2, cfg2).data)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path)
    (tmp_path / "checkpoint.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValueError, match="not a version"):
        load_checkpoint(tmp_path)
