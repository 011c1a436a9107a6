"""Dataset directories, splits, class statistics and per-sample transforms.

Directory layout::

    <root>/manifest.json
    <root>/samples/<sample id>/<CHANNEL>.cgt   float32 H x W
    <root>/samples/<sample id>/LABELS.cgt      uint8 H x W (0 BG, 1 TC, 2 AR)

``manifest.json``::

    {"format": "stormseg-dataset", "format_version": 1,
     "geometry": {"lat": [...], "lon": [...]},
     "channels": [{"name": "TMQ", "units": "kg/m^2"}, ...],
     "normalization": {"TMQ": {"mean": m, "std": s}, ...},
     "samples": [{"id": "...", "year": 1996, "index": 0, "split": "train",
                  "path": "samples/..."}, ...]}

Normalisation statistics are computed over the train split only. Exporting
real ClimateNet netCDF files amounts to writing one CGT1 file per channel
under this layout.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .sample import ALL_CHANNELS, ENGINEERED_CHANNELS, ClimateSample, GridGeometry
from .tensorfile import atomic_write_bytes, read_tensor_file, write_tensor_file

FORMAT_NAME = "stormseg-dataset"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
STD_FLOOR = 1e-8
N_CLASSES = 3

PAPER_TRAIN_YEARS = tuple(range(1996, 2008))
PAPER_VAL_YEARS = (2008, 2009, 2010)
PAPER_TEST_YEARS = (2011, 2012, 2013)


@dataclass
class SampleRecord:
    id: str
    year: int
    index: int
    split: str
    path: str

    def to_dict(self) -> dict:
        return {"id": self.id, "year": self.year, "index": self.index, "split": self.split,
                "path": self.path}


@dataclass
class DatasetManifest:
    samples: list[SampleRecord]
    channels: list[str]
    geometry: GridGeometry
    normalization: dict[str, dict[str, float]] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        for rec in self.samples:
            if rec.split not in SPLITS:
                raise ValueError(f"sample {rec.id}: split {rec.split!r} not in {SPLITS}")
        ids = [r.id for r in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate sample ids in manifest")

    def split(self, name: str) -> list[SampleRecord]:
        return [r for r in self.samples if r.split == name]

    def split_counts(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "format_version": self.format_version,
            "geometry": self.geometry.to_dict(),
            "channels": [{"name": c, "units": ALL_CHANNELS[c][1]} for c in self.channels],
            "normalization": {c: dict(v) for c, v in self.normalization.items()},
            "samples": [r.to_dict() for r in self.samples],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        if d.get("format") != FORMAT_NAME:
            raise ValueError(f"not a {FORMAT_NAME} manifest")
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported manifest version {d.get('format_version')}")
        return cls(
            samples=[SampleRecord(**r) for r in d["samples"]],
            channels=[c["name"] for c in d["channels"]],
            geometry=GridGeometry.from_dict(d["geometry"]),
            normalization={c: {"mean": float(v["mean"]), "std": float(v["std"])}
                           for c, v in d.get("normalization", {}).items()},
        )


def save_manifest(manifest: DatasetManifest, root) -> None:
    text = json.dumps(manifest.to_dict(), indent=1, sort_keys=True)
    atomic_write_bytes(Path(root) / "manifest.json", (text + "\n").encode("utf-8"))


def load_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no manifest.json in dataset directory {root}")
    try:
        return DatasetManifest.from_dict(json.loads(path.read_text("utf-8")))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValueError(f"corrupt manifest {path}: {exc}") from None


class Dataset:
    """A dataset directory opened for reading."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = load_manifest(self.root)

    def records(self, split: Optional[str] = None) -> list[SampleRecord]:
        if split is None:
            return list(self.manifest.samples)
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return self.manifest.split(split)

    def record(self, sample_id: str) -> SampleRecord:
        for r in self.manifest.samples:
            if r.id == sample_id:
                return r
        raise KeyError(f"no sample {sample_id!r} in {self.root}")

    def load_sample(self, rec: SampleRecord, channels: Optional[Sequence[str]] = None) -> ClimateSample:
        names = self.manifest.channels if channels is None else list(channels)
        folder = self.root / rec.path
        grids = {name: read_tensor_file(folder / f"{name}.cgt") for name in names}
        labels = read_tensor_file(folder / "LABELS.cgt")
        return ClimateSample(grids, labels, self.manifest.geometry, rec.year, rec.index, rec.id)

    def samples(self, split: Optional[str] = None, channels=None) -> list[ClimateSample]:
        return [self.load_sample(r, channels) for r in self.records(split)]


def write_dataset(root, samples: Sequence[ClimateSample], splits: Sequence[str],
                  normalization: Optional[dict] = None) -> DatasetManifest:
    """Write ``samples`` (channels as float32) and a manifest; returns the manifest.

    Normalisation stats default to those of the samples tagged ``train``.
    """
    root = Path(root)
    if not samples:
        raise ValueError("no samples to write")
    geometry = samples[0].geometry
    channels = list(samples[0].channels)
    records = []
    for s, split in zip(samples, splits, strict=True):
        if list(s.channels) != channels:
            raise ValueError(f"sample {s.sample_id} has channels {list(s.channels)}, expected {channels}")
        sid = s.sample_id or f"{s.year}-{s.index:04d}"
        rel = f"samples/{sid}"
        for name, grid in s.channels.items():
            write_tensor_file(np.asarray(grid, dtype=np.float32), root / rel / f"{name}.cgt")
        write_tensor_file(np.asarray(s.labels, dtype=np.uint8), root / rel / "LABELS.cgt")
        records.append(SampleRecord(sid, int(s.year), int(s.index), split, rel))
    if normalization is None:
        train = [s for s, sp in zip(samples, splits) if sp == "train"]
        # stats of the stored (float32) values so the round trip is exact
        normalization = compute_normalization_stats(_as_stored(train), channels) if train else {}
    manifest = DatasetManifest(records, channels, geometry, normalization)
    save_manifest(manifest, root)
    return manifest


def _as_stored(samples):
    for s in samples:
        yield ClimateSample({k: np.asarray(v, np.float32) for k, v in s.channels.items()},
                            s.labels, s.geometry, s.year, s.index, s.sample_id)


# ----------------------------------------------------------------------------
# splits and statistics
# ----------------------------------------------------------------------------

def split_by_year(manifest: DatasetManifest, train_years: Iterable[int], val_years: Iterable[int],
                  test_years: Iterable[int]) -> DatasetManifest:
    """Re-tag every sample by its year. Year lists must be disjoint and cover
    every sample year."""
    groups = {"train": set(train_years), "val": set(val_years), "test": set(test_years)}
    names = list(groups)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            common = groups[a] & groups[b]
            if common:
                raise ValueError(f"years {sorted(common)} appear in both {a} and {b}")
    lookup = {y: split for split, years in groups.items() for y in years}
    records = []
    for r in manifest.samples:
        if r.year not in lookup:
            raise ValueError(f"sample {r.id} year {r.year} is not assigned to any split")
        records.append(replace(r, split=lookup[r.year]))
    return replace(manifest, samples=records)


@dataclass
class ClassFrequencies:
    fractions: np.ndarray
    counts: np.ndarray
    total: int


def class_frequencies(labels: Iterable) -> ClassFrequencies:
    """Pixel fractions per class over label grids (or samples)."""
    counts = np.zeros(N_CLASSES, np.int64)
    for lab in labels:
        arr = lab.labels if isinstance(lab, ClimateSample) else np.asarray(lab)
        counts += np.bincount(arr.ravel().astype(np.int64), minlength=N_CLASSES)[:N_CLASSES]
    total = int(counts.sum())
    if total == 0:
        raise ValueError("no pixels to count")
    return ClassFrequencies(counts / total, counts, total)


def compute_class_weights(freqs, scheme: str = "inverse", normalization: str = "mean_one",
                          manual: Optional[Sequence[float]] = None, smoothing: float = 0.0):
    """Rare-class weights: ``inverse`` (1/f), ``inverse_sqrt`` (1/sqrt f) or
    ``manual``; then normalised to mean one or to a convex combination."""
    from ..losses import ClassWeights

    f = np.asarray(freqs.fractions if isinstance(freqs, ClassFrequencies) else freqs, np.float64)
    if scheme == "manual":
        if manual is None:
            raise ValueError("manual scheme needs explicit weights")
        raw = np.asarray(manual, np.float64)
    elif scheme in ("inverse", "inverse_sqrt"):
        f = f + smoothing
        if (f <= 0).any():
            raise ValueError(f"class frequency is zero for classes {np.flatnonzero(f <= 0).tolist()}; "
                             "pass smoothing > 0")
        raw = 1.0 / f if scheme == "inverse" else 1.0 / np.sqrt(f)
    else:
        raise ValueError(f"unknown weighting scheme {scheme!r}")
    return ClassWeights(tuple(raw), normalization)


def compute_normalization_stats(samples: Iterable[ClimateSample], channels: Sequence[str]) -> dict:
    """Per-channel mean and population std over every pixel of ``samples``."""
    sums = {c: 0.0 for c in channels}
    sq = {c: 0.0 for c in channels}
    count = 0
    cached = []
    for s in samples:
        cached.append(s)
        for c in channels:
            sums[c] += float(np.asarray(s.channels[c], np.float64).sum())
        count += s.labels.size
    if count == 0:
        raise ValueError("no samples for normalisation statistics")
    means = {c: sums[c] / count for c in channels}
    for s in cached:
        for c in channels:
            d = np.asarray(s.channels[c], np.float64) - means[c]
            sq[c] += float((d * d).sum())
    return {c: {"mean": means[c], "std": float(np.sqrt(sq[c] / count))} for c in channels}


def standardize(sample: ClimateSample, stats: dict) -> ClimateSample:
    """``(x - mean) / max(std, 1e-8)`` per channel; labels untouched."""
    channels = {}
    for name, grid in sample.channels.items():
        if name not in stats:
            raise KeyError(f"no normalisation statistics for channel {name}")
        st = stats[name]
        channels[name] = (np.asarray(grid, np.float64) - st["mean"]) / max(st["std"], STD_FLOOR)
    return ClimateSample(channels, sample.labels, sample.geometry, sample.year, sample.index,
                         sample.sample_id, dict(sample.extra))


def roll_longitude(sample: ClimateSample, offset: int) -> ClimateSample:
    """Circular shift of every grid (and the longitudes) by ``offset`` columns."""
    channels = {k: np.roll(v, offset, axis=-1) for k, v in sample.channels.items()}
    return ClimateSample(channels, np.roll(sample.labels, offset, axis=-1),
                         sample.geometry.rolled(offset), sample.year, sample.index,
                         sample.sample_id, dict(sample.extra))


# ----------------------------------------------------------------------------
# arrays for training
# ----------------------------------------------------------------------------

def _with_features(sample: ClimateSample, names: Sequence[str]) -> ClimateSample:
    need = [n for n in names if n in ENGINEERED_CHANNELS and n not in sample.channels]
    if not need:
        return sample
    from ..features import engineer_features

    base = ClimateSample({k: v for k, v in sample.channels.items() if k not in ENGINEERED_CHANNELS},
                         sample.labels, sample.geometry, sample.year, sample.index, sample.sample_id)
    return engineer_features(base)


def load_split_samples(ds: Dataset, split: str, channels: Sequence[str]) -> list[ClimateSample]:
    """Samples restricted to ``channels``; missing engineered channels are derived."""
    stored = set(ds.manifest.channels)
    missing = [c for c in channels if c not in stored and c not in ENGINEERED_CHANNELS]
    if missing:
        raise KeyError(f"dataset {ds.root} lacks channels {missing}")
    read = [c for c in channels if c in stored]
    if any(c not in stored for c in channels):
        read += [c for c in ("U850", "V850", "UBOT", "VBOT") if c not in read]
    out = []
    for rec in ds.records(split):
        s = _with_features(ds.load_sample(rec, read), channels)
        out.append(ClimateSample({c: s.channels[c] for c in channels}, s.labels, s.geometry,
                                 s.year, s.index, s.sample_id))
    return out


def dataset_stats(ds: Dataset, channels: Sequence[str]) -> dict:
    """Manifest statistics, with any missing channel computed from the train split."""
    stats = {c: ds.manifest.normalization[c] for c in channels if c in ds.manifest.normalization}
    missing = [c for c in channels if c not in stats]
    if missing:
        train = load_split_samples(ds, "train", missing)
        stats.update(compute_normalization_stats(train, missing))
    return stats


def split_arrays(ds: Dataset, split: str, channels: Sequence[str], stats: Optional[dict] = None):
    """(X: N x C x H x W float64 standardised, Y: N x H x W uint8, samples)."""
    samples = load_split_samples(ds, split, channels)
    if stats is None:
        stats = dataset_stats(ds, channels)
    if not samples:
        h, w = ds.manifest.geometry.shape
        return np.zeros((0, len(channels), h, w)), np.zeros((0, h, w), np.uint8), []
    std = [standardize(s, stats) for s in samples]
    x = np.stack([s.stack(channels) for s in std])
    y = np.stack([s.labels for s in std])
    return x, y, samples
