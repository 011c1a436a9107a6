"""Engineered wind channels: speed and relative vorticity on a lat/lon grid.

Vorticity follows the formula
``zeta = du/dlambda - (1/cos phi) d(v cos phi)/dphi`` in radians on the unit
sphere. This is the formula as the channel was defined for the dataset, not
the meteorological curl (which would be ``dv/dx - du/dy`` with a
``1/(a cos phi)`` metric factor); as a learned input feature only its spatial
pattern matters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .climate_data.sample import ENGINEERED_CHANNELS, ClimateSample, GridGeometry

POLE_TOL_DEG = 1e-9


@dataclass
class WindComponents:
    u: np.ndarray
    v: np.ndarray
    level: str = "850mbar"

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape:
            raise ValueError(f"u shape {self.u.shape} does not match v shape {self.v.shape}")
        if self.level not in ("850mbar", "bottom"):
            raise ValueError(f"unknown level {self.level!r}")


def wind_speed(w: WindComponents) -> np.ndarray:
    return np.sqrt(w.u * w.u + w.v * w.v)


def lon_derivative(f: np.ndarray, dlon_rad: float) -> np.ndarray:
    """Periodic second-order central difference along the last axis."""
    return (np.roll(f, -1, axis=-1) - np.roll(f, 1, axis=-1)) / (2.0 * dlon_rad)


def lat_derivative(f: np.ndarray, lat_rad: np.ndarray) -> np.ndarray:
    """Central differences along axis -2, second-order one-sided at the edge rows."""
    return np.gradient(f, lat_rad, axis=-2, edge_order=2)


def relative_vorticity(w: WindComponents, geom: GridGeometry, mask_poles: bool = True) -> np.ndarray:
    """Discrete vorticity on ``geom``.

    Rows at exactly +-90 degrees have ``cos phi = 0``. With ``mask_poles`` they
    are set to 0; otherwise a ValueError is raised.
    """
    h, width = geom.shape
    if w.u.shape[-2:] != (h, width):
        raise ValueError(f"wind grid {w.u.shape} does not match geometry {geom.shape}")
    if h < 3 or width < 3:
        raise ValueError("vorticity needs at least 3 x 3 grid points")
    phi = np.deg2rad(geom.lat)
    dlon = np.deg2rad(geom.dlon_deg)
    pole = np.abs(np.abs(geom.lat) - 90.0) < POLE_TOL_DEG
    if pole.any() and not mask_poles:
        raise ValueError("grid contains pole rows where 1/cos(lat) is singular")
    cos_phi = np.cos(phi)
    cos_phi[pole] = 0.0
    dq = lat_derivative(w.v * cos_phi[:, None], phi)
    safe = np.where(pole, 1.0, cos_phi)
    zeta = lon_derivative(w.u, dlon) - dq / safe[:, None]
    zeta[..., pole, :] = 0.0
    return zeta


_SOURCES = {"850mbar": ("U850", "V850", "WS850", "VRT850"),
            "bottom": ("UBOT", "VBOT", "WSBOT", "VRTBOT")}


def engineer_features(sample: ClimateSample) -> ClimateSample:
    """New sample with WS850, VRT850, WSBOT, VRTBOT appended."""
    for name in ENGINEERED_CHANNELS:
        if name in sample.channels:
            raise ValueError(f"channel {name} already present")
    for level in _SOURCES.values():
        for src in level[:2]:
            if src not in sample.channels:
                raise KeyError(f"missing source channel {src}")
    channels = dict(sample.channels)
    for level, (u_name, v_name, ws_name, vrt_name) in _SOURCES.items():
        w = WindComponents(sample.channels[u_name], sample.channels[v_name], level)
        channels[ws_name] = wind_speed(w)
        channels[vrt_name] = relative_vorticity(w, sample.geometry)
    return ClimateSample(channels, sample.labels.copy(), sample.geometry, sample.year,
                         sample.index, sample.sample_id, dict(sample.extra))
