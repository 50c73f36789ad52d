"""Deterministic synthetic weather-like fields for desk-scale runs.

The toy scene is two Gaussian features advecting zonally at constant (and
different) speeds on a pole-free equiangular grid: a deep low that doubles
as a trackable storm in the ``msl`` channel and a weaker high. Successive
frames are a deterministic function of the current one, so short-horizon
skill is learnable from small data.
"""

from __future__ import annotations

from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .grid import CatalogEntry, GridSpec, Snapshot, VariableCatalog
from . import tensorio


def toy_grid(n_lat: int = 16, n_lon: int = 32) -> GridSpec:
    """Pole-free symmetric grid; rows at +-(90 - step/2) and inward."""
    lat_step = 180.0 / n_lat
    return GridSpec(
        n_lat=n_lat,
        n_lon=n_lon,
        lat_start_deg=90.0 - lat_step / 2.0,
        lat_step_deg=-lat_step,
        lon_start_deg=0.0,
        lon_step_deg=360.0 / n_lon,
        south_pole_cropped=True,
    )


def toy_catalog() -> VariableCatalog:
    return VariableCatalog(
        (
            CatalogEntry("msl", "single"),
            CatalogEntry("2t", "single"),
            CatalogEntry("10u", "single"),
            CatalogEntry("lsm", "static"),
        )
    )


def angular_distance_deg(grid: GridSpec, lat0: float, lon0: float) -> np.ndarray:
    """Great-circle distance (degrees) from each grid node to (lat0, lon0)."""
    lat = np.deg2rad(grid.latitudes())[:, None]
    lon = np.deg2rad(grid.longitudes())[None, :]
    la0, lo0 = np.deg2rad(lat0), np.deg2rad(lon0)
    cos_d = np.sin(lat) * np.sin(la0) + np.cos(lat) * np.cos(la0) * np.cos(lon - lo0)
    return np.rad2deg(np.arccos(np.clip(cos_d, -1.0, 1.0)))


def gaussian_bump(grid: GridSpec, lat0: float, lon0: float, radius_deg: float) -> np.ndarray:
    d = angular_distance_deg(grid, lat0, lon0)
    return np.exp(-0.5 * (d / radius_deg) ** 2)


def land_mask(grid: GridSpec) -> np.ndarray:
    """Fixed smooth pseudo-continents in [0, 1]."""
    a = gaussian_bump(grid, 35.0, 90.0, 30.0)
    b = gaussian_bump(grid, -20.0, 300.0, 25.0)
    return np.clip(1.2 * a + 1.0 * b, 0.0, 1.0)


LOW_LAT = 22.5
HIGH_LAT = -33.75
LOW_SPEED_DEG = 12.4  # eastward per 6-hour step
HIGH_SPEED_DEG = -8.6


def storm_position(step: int, lon0: float = 45.0) -> tuple[float, float]:
    return LOW_LAT, (lon0 + LOW_SPEED_DEG * step) % 360.0


def blob_snapshot(
    grid: GridSpec, catalog: VariableCatalog, timestamp: datetime, step: int, lon0: float = 45.0
) -> Snapshot:
    low_lat, low_lon = storm_position(step, lon0)
    high_lon = (200.0 + HIGH_SPEED_DEG * step) % 360.0
    low = gaussian_bump(grid, low_lat, low_lon, 24.0)
    high = gaussian_bump(grid, HIGH_LAT, high_lon, 30.0)
    coslat = np.cos(np.deg2rad(grid.latitudes()))[:, None]
    ones = np.ones((grid.n_lat, grid.n_lon))

    fields = {
        "msl": 101300.0 * ones - 3200.0 * low + 900.0 * high,
        "2t": 255.0 + 40.0 * coslat * ones + 6.0 * low - 3.0 * high,
        "10u": 5.0 * coslat * ones - 4.0 * low + 6.0 * high,
        "lsm": land_mask(grid),
    }
    data = np.stack([fields[name] for name in catalog.channel_names()])
    return Snapshot(grid, timestamp, data.astype(np.float32), catalog)


def blob_series(
    n_steps: int,
    grid: GridSpec | None = None,
    start: datetime | None = None,
    step_hours: int = 6,
    lon0: float = 45.0,
) -> list[Snapshot]:
    grid = grid or toy_grid()
    catalog = toy_catalog()
    start = start or datetime(2000, 3, 1, tzinfo=timezone.utc)
    return [
        blob_snapshot(grid, catalog, start + timedelta(hours=step_hours * k), k, lon0)
        for k in range(n_steps)
    ]


def write_series(out_dir: str | Path, snapshots: list[Snapshot]) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, snap in enumerate(snapshots):
        paths.append(tensorio.write_snapshot(out_dir / f"snapshot_{k:05d}.ldct", snap))
    return paths
