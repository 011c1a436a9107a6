"""Synthetic storm fields for desk-scale experiments.

Each sample is a smooth random background plus labelled events:

* tropical cyclone (label 1): a disk of radius ``R`` pixels around a centre at
  8-35 degrees latitude, carrying a Gaussian sea-level pressure low, a moisture
  bump and a modified Rankine vortex (solid-body rotation out to ``R/2``,
  ~1/r decay beyond), cyclonic in each hemisphere;
* atmospheric river (label 2): a long, thin band of high precipitable water
  running poleward and eastward, with winds along the band.

Only imbalance, locality and the rotational signature matter; intensities are
fixed, arbitrary constants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import PAPER_TEST_YEARS, PAPER_TRAIN_YEARS, PAPER_VAL_YEARS
from .sample import CHANNEL_CATALOG, ClimateSample, GridGeometry

CORE_CHANNELS = ("TMQ", "U850", "V850", "PSL", "UBOT", "VBOT")


class SyntheticOverlapError(RuntimeError):
    pass


@dataclass
class SyntheticConfig:
    counts: dict = field(default_factory=lambda: {"train": 24, "val": 4, "test": 4})
    height: int = 32
    width: int = 64
    tc_per_sample: tuple[int, int] = (1, 2)
    ar_per_sample: tuple[int, int] = (0, 1)
    tc_radius: tuple[float, float] = (3.0, 5.0)
    ar_half_width: tuple[float, float] = (1.2, 2.0)
    ar_length: tuple[float, float] = (0.3, 0.5)   # fraction of the grid width
    min_background_fraction: float = 0.90
    max_tc_fraction: float = 1.0
    all_channels: bool = False
    lat_extent: float = 80.0
    noise: float = 0.05
    retry_budget: int = 200
    seed: int = 0

    def validate(self):
        if self.height < 8 or self.width < 8:
            raise ValueError("synthetic grids must be at least 8 x 8")
        for k, v in self.counts.items():
            if k not in ("train", "val", "test") or v < 0:
                raise ValueError(f"bad split count {k}={v}")
        if not 0.0 <= self.min_background_fraction <= 1.0:
            raise ValueError("min_background_fraction must lie in [0, 1]")


def _smooth_field(rng, h, w, n_modes=4):
    """Sum of a few low-wavenumber sinusoids, periodic in longitude, unit scale."""
    y = np.linspace(0, np.pi, h)[:, None]
    x = np.linspace(0, 2 * np.pi, w, endpoint=False)[None, :]
    f = np.zeros((h, w))
    for _ in range(n_modes):
        kx = rng.integers(1, 4)
        ky = rng.uniform(0.5, 3.0)
        f += rng.normal() * np.sin(kx * x + rng.uniform(0, 2 * np.pi)) * np.cos(ky * y + rng.uniform(0, 2 * np.pi))
    return f / math.sqrt(n_modes)


def _offsets(h, w, cy, cx):
    """Row and periodic column offsets (pixels) from a centre."""
    dy = np.arange(h)[:, None] - cy
    dx = (np.arange(w)[None, :] - cx + w / 2) % w - w / 2
    return np.broadcast_to(dy, (h, w)), np.broadcast_to(dx, (h, w))


def _background(rng, geom: GridGeometry, all_channels: bool):
    h, w = geom.shape
    phi = np.deg2rad(geom.lat)[:, None] * np.ones((1, w))
    ch = {
        "TMQ": 8.0 + 35.0 * np.cos(phi) ** 2 + 3.0 * _smooth_field(rng, h, w),
        "U850": 12.0 * np.sin(2 * phi) ** 2 * np.sign(phi) + 3.0 * _smooth_field(rng, h, w),
        "V850": 3.0 * _smooth_field(rng, h, w),
        "PSL": 101300.0 + 600.0 * _smooth_field(rng, h, w) - 800.0 * np.cos(2 * phi) ** 2,
    }
    ch["UBOT"] = 0.7 * ch["U850"] + 1.0 * _smooth_field(rng, h, w)
    ch["VBOT"] = 0.7 * ch["V850"] + 1.0 * _smooth_field(rng, h, w)
    if all_channels:
        base = {"QREFHT": (0.01, 0.003), "PS": (98000.0, 800.0), "T200": (218.0, 4.0),
                "T500": (255.0, 5.0), "PRECT": (3e-8, 1e-8), "TS": (285.0, 10.0),
                "TREFHT": (284.0, 9.0), "Z1000": (110.0, 60.0), "Z200": (11800.0, 150.0),
                "ZBOT": (60.0, 5.0)}
        for name, (mean, scale) in base.items():
            ch[name] = mean + scale * _smooth_field(rng, h, w)
    return ch


def _add_tc(rng, ch, geom, cy, cx, radius):
    h, w = geom.shape
    dy, dx = _offsets(h, w, cy, cx)
    r = np.hypot(dx, dy)
    r_max = radius / 2.0
    v_max = rng.uniform(30.0, 45.0)
    speed = np.where(r < r_max, v_max * r / r_max, v_max * (r_max / np.maximum(r, 1e-9)) ** 1.2)
    sense = 1.0 if geom.lat[int(round(cy)) % h] >= 0 else -1.0
    with np.errstate(invalid="ignore", divide="ignore"):
        tu = np.where(r > 0, -dy / r, 0.0)
        tv = np.where(r > 0, dx / r, 0.0)
    ch["U850"] = ch["U850"] + sense * speed * tu
    ch["V850"] = ch["V850"] + sense * speed * tv
    ch["UBOT"] = ch["UBOT"] + 0.8 * sense * speed * tu
    ch["VBOT"] = ch["VBOT"] + 0.8 * sense * speed * tv
    ch["PSL"] = ch["PSL"] - rng.uniform(2500.0, 4000.0) * np.exp(-(r / (0.7 * radius)) ** 2)
    ch["TMQ"] = ch["TMQ"] + rng.uniform(20.0, 30.0) * np.exp(-(r / (0.8 * radius)) ** 2)
    if "PS" in ch:
        ch["PS"] = ch["PS"] - 2000.0 * np.exp(-(r / (0.7 * radius)) ** 2)
    return r <= radius


def _add_ar(rng, ch, geom, cy, cx, length, half_width, north):
    h, w = geom.shape
    angle = np.deg2rad(rng.uniform(15.0, 40.0)) * (1.0 if north else -1.0)
    ex, ey = math.cos(angle), math.sin(angle)
    dy, dx = _offsets(h, w, cy, cx)
    along = dx * ex + dy * ey
    across = -dx * ey + dy * ex
    t = np.clip(along, 0.0, length)
    dist = np.hypot(along - t, across)
    shape = np.exp(-(dist / half_width) ** 2)
    ch["TMQ"] = ch["TMQ"] + rng.uniform(18.0, 26.0) * shape
    ch["U850"] = ch["U850"] + 10.0 * ex * shape
    ch["V850"] = ch["V850"] + 10.0 * ey * shape
    ch["UBOT"] = ch["UBOT"] + 6.0 * ex * shape
    ch["VBOT"] = ch["VBOT"] + 6.0 * ey * shape
    return dist <= half_width


def _dilate(mask, steps=2):
    out = mask.copy()
    for _ in range(steps):
        grown = out.copy()
        grown[1:] |= out[:-1]
        grown[:-1] |= out[1:]
        grown |= np.roll(out, 1, axis=1) | np.roll(out, -1, axis=1)
        out = grown
    return out


def _lat_rows(geom, lo, hi):
    lat = np.abs(geom.lat)
    rows = np.flatnonzero((lat >= lo) & (lat <= hi))
    if rows.size == 0:
        raise ValueError(f"grid has no rows between {lo} and {hi} degrees latitude")
    return rows


def make_sample(rng, cfg: SyntheticConfig, geom: GridGeometry, year: int, index: int) -> ClimateSample:
    h, w = geom.shape
    tc_rows = _lat_rows(geom, 8.0, 35.0)
    ar_rows = _lat_rows(geom, 10.0, 30.0)
    for _ in range(cfg.retry_budget):
        ch = _background(rng, geom, cfg.all_channels)
        labels = np.zeros((h, w), np.uint8)
        occupied = np.zeros((h, w), bool)
        ok = True
        n_tc = int(rng.integers(cfg.tc_per_sample[0], cfg.tc_per_sample[1] + 1))
        n_ar = int(rng.integers(cfg.ar_per_sample[0], cfg.ar_per_sample[1] + 1))
        events = ["ar"] * n_ar + ["tc"] * n_tc
        for kind in events:
            placed = False
            for _ in range(cfg.retry_budget):
                trial = {k: v for k, v in ch.items()}
                if kind == "tc":
                    cy = float(rng.choice(tc_rows)) + rng.uniform(-0.5, 0.5)
                    cx = rng.uniform(0, w)
                    mask = _add_tc(rng, trial, geom, cy, cx, rng.uniform(*cfg.tc_radius))
                else:
                    cy = float(rng.choice(ar_rows))
                    cx = rng.uniform(0, w)
                    length = rng.uniform(*cfg.ar_length) * w
                    mask = _add_ar(rng, trial, geom, cy, cx, length,
                                   rng.uniform(*cfg.ar_half_width), geom.lat[int(cy)] >= 0)
                if mask.any() and not (_dilate(mask) & occupied).any():
                    ch = trial
                    labels[mask] = 1 if kind == "tc" else 2
                    occupied |= mask
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if not ok:
            continue
        bg = float((labels == 0).mean())
        tc = float((labels == 1).mean())
        if bg >= cfg.min_background_fraction and tc <= cfg.max_tc_fraction:
            ch = {name: ch[name] for name in CHANNEL_CATALOG if name in ch}
            for name in ch:
                ch[name] = ch[name] + cfg.noise * np.std(ch[name]) * rng.normal(size=(h, w))
            return ClimateSample(ch, labels, geom, year, index, f"{year}-{index:04d}")
    raise SyntheticOverlapError(
        f"could not place storms without overlap within {cfg.retry_budget} attempts "
        f"(sample {index}); lower the storm counts or sizes")


def gen_synthetic_dataset(cfg: SyntheticConfig) -> tuple[list[ClimateSample], list[str]]:
    """Deterministic samples and their split tags.

    Years follow the train/val/test year ranges, cycling within each range.
    """
    cfg.validate()
    geom = GridGeometry.regular(cfg.height, cfg.width, cfg.lat_extent)
    rng = np.random.default_rng(cfg.seed)
    year_sets = {"train": PAPER_TRAIN_YEARS, "val": PAPER_VAL_YEARS, "test": PAPER_TEST_YEARS}
    samples, splits = [], []
    index = 0
    for split in ("train", "val", "test"):
        years = year_sets[split]
        for k in range(cfg.counts.get(split, 0)):
            samples.append(make_sample(rng, cfg, geom, years[k % len(years)], index))
            splits.append(split)
            index += 1
    return samples, splits


def channel_names(cfg: SyntheticConfig) -> list[str]:
    names = CHANNEL_CATALOG if cfg.all_channels else CORE_CHANNELS
    return [c for c in CHANNEL_CATALOG if c in names]
