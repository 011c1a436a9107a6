"""Grid geometry, the channel catalogue and the per-timestep sample container."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# name -> (description, units)
CHANNEL_CATALOG = {
    "TMQ": ("Total (vertically integrated) precipitable water", "kg/m^2"),
    "U850": ("Zonal wind at 850 mbar pressure surface", "m/s"),
    "V850": ("Meridional wind at 850 mbar pressure surface", "m/s"),
    "UBOT": ("Lowest level zonal wind", "m/s"),
    "VBOT": ("Lowest model level meridional wind", "m/s"),
    "QREFHT": ("Reference height humidity", "kg/kg"),
    "PS": ("Surface pressure", "Pa"),
    "PSL": ("Sea level pressure", "Pa"),
    "T200": ("Temperature at 200 mbar pressure surface", "K"),
    "T500": ("Temperature at 500 mbar pressure surface", "K"),
    "PRECT": ("Total (convective and large-scale) precipitation rate", "m/s"),
    "TS": ("Surface temperature (radiative)", "K"),
    "TREFHT": ("Reference height temperature", "K"),
    "Z1000": ("Geopotential Z at 1000 mbar pressure surface", "m"),
    "Z200": ("Geopotential Z at 200 mbar pressure surface", "m"),
    "ZBOT": ("Lowest model level height", "m"),
}
ENGINEERED_CATALOG = {
    "WS850": ("Wind speed at 850 mbar pressure surface", "m/s"),
    "VRT850": ("Relative wind vorticity at 850 mbar pressure surface", "m/s"),
    "WSBOT": ("Lowest level wind speed", "m/s"),
    "VRTBOT": ("Lowest level relative wind vorticity", "m/s"),
}
ALL_CHANNELS = {**CHANNEL_CATALOG, **ENGINEERED_CATALOG}

BASELINE_CHANNELS = ("TMQ", "U850", "V850", "PSL")
ENGINEERED_CHANNELS = tuple(ENGINEERED_CATALOG)
LABEL_NAMES = ("BG", "TC", "AR")


@dataclass(frozen=True)
class GridGeometry:
    """Latitudes (degrees, strictly monotonic) by longitudes (degrees,
    uniformly spaced, periodic). Angular derivatives use radians and the
    unit sphere; no earth-radius factor is applied."""

    lat: np.ndarray
    lon: np.ndarray

    def __post_init__(self):
        lat = np.asarray(self.lat, dtype=np.float64)
        lon = np.asarray(self.lon, dtype=np.float64)
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)
        if lat.ndim != 1 or lon.ndim != 1 or len(lat) < 2 or len(lon) < 2:
            raise ValueError("lat and lon must be 1-d with at least two points")
        if (np.abs(lat) > 90).any():
            raise ValueError("latitudes must lie in [-90, 90]")
        dlat = np.diff(lat)
        if not ((dlat > 0).all() or (dlat < 0).all()):
            raise ValueError("latitudes must be strictly monotonic")
        dlon = np.diff(lon)
        if np.abs(dlon - dlon[0]).max() > 1e-9 or dlon[0] == 0:
            raise ValueError("longitudes must be uniformly spaced")

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.lat), len(self.lon)

    @property
    def dlon_deg(self) -> float:
        return float(self.lon[1] - self.lon[0])

    @classmethod
    def regular(cls, height: int, width: int, lat_extent: float = 90.0) -> "GridGeometry":
        """Cell-centred grid; ``lat_extent`` < 90 restricts to a band."""
        dlat = 2 * lat_extent / height
        lat = -lat_extent + dlat * (np.arange(height) + 0.5)
        lon = 360.0 / width * np.arange(width)
        return cls(lat, lon)

    def rolled(self, offset: int) -> "GridGeometry":
        """Geometry after ``np.roll(grid, offset, axis=-1)``; longitudes stay
        uniform (unwrapped) rather than being taken modulo 360."""
        return GridGeometry(self.lat.copy(), self.lon - offset * self.dlon_deg)

    def to_dict(self) -> dict:
        return {"lat": self.lat.tolist(), "lon": self.lon.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GridGeometry":
        return cls(np.asarray(d["lat"]), np.asarray(d["lon"]))

    def __eq__(self, other):
        return (isinstance(other, GridGeometry) and np.array_equal(self.lat, other.lat)
                and np.array_equal(self.lon, other.lon))

    __hash__ = None


@dataclass
class ClimateSample:
    """One time step: named H x W channel grids, an H x W uint8 label grid."""

    channels: dict[str, np.ndarray]
    labels: np.ndarray
    geometry: GridGeometry
    year: int = 0
    index: int = 0
    sample_id: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = self.geometry.shape
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.shape != shape:
            raise ValueError(f"labels shape {self.labels.shape} does not match geometry {shape}")
        for name, grid in self.channels.items():
            if name not in ALL_CHANNELS:
                raise ValueError(f"unknown channel {name!r}")
            if np.shape(grid) != shape:
                raise ValueError(f"channel {name} shape {np.shape(grid)} does not match geometry {shape}")

    @property
    def channel_names(self) -> list[str]:
        return list(self.channels)

    def stack(self, names) -> np.ndarray:
        """C x H x W float64 array in the order of ``names``."""
        missing = [n for n in names if n not in self.channels]
        if missing:
            raise KeyError(f"sample {self.sample_id or self.index} lacks channels {missing}")
        return np.stack([np.asarray(self.channels[n], dtype=np.float64) for n in names])
