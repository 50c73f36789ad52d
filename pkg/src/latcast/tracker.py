"""Heuristic storm-center tracker over gridded mean-sea-level-pressure fields.

Starting from a known position snapped to the grid, each 6-hour step searches
for the lowest msl value inside progressively smaller boxes centered on the
current position. A candidate is rejected when it lies on the search-box
edge, when it is not the strict minimum of its own validation box (half-width
= the attempt's box size plus a 1.5-degree buffer), or when it does not move
the center. On total msl failure the search optionally repeats on
geopotential-700; if that also fails the position is carried unchanged and a
warning is recorded. Longitude wraps circularly; latitude clamps at the grid
limits, and a clamped boundary row still counts as a box edge.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .grid import GridSpec

logger = logging.getLogger(__name__)

LAND_THRESHOLD = 0.5  # land-sea-mask values above this are land


@dataclass(frozen=True)
class TrackerConfig:
    search_box_degrees: tuple[float, ...] = (7.0, 4.0, 1.0)
    inner_buffer_deg: float = 1.5
    step_hours: int = 6
    use_z700_fallback: bool = False
    use_land_sea_gate: bool = False
    grid_resolution_deg: float | None = None

    def __post_init__(self):
        boxes = self.search_box_degrees
        if not boxes:
            raise ValidationError("need at least one search box")
        # A trailing 0 is allowed: it degenerates to the current cell and can
        # only fail (spec'd as a deliberate last-resort skip).
        if any(b < 0 for b in boxes):
            raise ValidationError("search boxes must be nonnegative")
        if any(b2 >= b1 for b1, b2 in zip(boxes, boxes[1:])):
            raise ValidationError("search boxes must be strictly decreasing")
        if self.inner_buffer_deg < 0:
            raise ValidationError("buffer must be nonnegative")
        if self.step_hours <= 0:
            raise ValidationError("step_hours must be positive")


@dataclass(frozen=True)
class TrackPoint:
    timestamp: datetime
    lat_deg: float
    lon_deg: float
    source: str  # msl | z700 | carried
    min_value: float


@dataclass
class StormTrack:
    points: list[TrackPoint] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def positions(self) -> np.ndarray:
        return np.array([[p.lat_deg, p.lon_deg] for p in self.points])


def snap_to_grid(grid: GridSpec, lat_deg: float, lon_deg: float) -> tuple[int, int]:
    """Nearest grid node (row, col); rejects positions off the latitude range."""
    lats = grid.latitudes()
    lons = grid.longitudes()
    pad = abs(grid.lat_step_deg) / 2 + 1e-9
    if lat_deg > lats.max() + pad or lat_deg < lats.min() - pad:
        raise ValidationError(f"latitude {lat_deg} outside grid range")
    i = int(np.argmin(np.abs(lats - lat_deg)))
    dlon = np.abs((lons - lon_deg + 180.0) % 360.0 - 180.0)
    j = int(np.argmin(dlon))
    return i, j


def _window(
    grid: GridSpec, center: tuple[int, int], half_width_deg: float
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Row and (wrapped) column indices of a box, plus whether columns cover
    the full circle (in which case there is no longitude edge)."""
    ci, cj = center
    rows_half = int(round(half_width_deg / abs(grid.lat_step_deg))) if grid.n_lat > 1 else 0
    cols_half = int(round(half_width_deg / grid.lon_step_deg))
    rows = np.arange(max(0, ci - rows_half), min(grid.n_lat - 1, ci + rows_half) + 1)
    if 2 * cols_half + 1 >= grid.n_lon:
        cols = np.arange(grid.n_lon)
        full_circle = True
    else:
        cols = (np.arange(cj - cols_half, cj + cols_half + 1)) % grid.n_lon
        full_circle = False
    return rows, cols, full_circle


def _box_minimum(
    fld: np.ndarray, rows: np.ndarray, cols: np.ndarray, mask: np.ndarray | None
) -> tuple[int, int] | None:
    """Lowest cell in the box; ties break to the lower (row, col) grid index.
    Returns None when the box is fully masked out."""
    sub = fld[np.ix_(rows, cols)]
    if mask is not None:
        sub = np.where(mask[np.ix_(rows, cols)], np.inf, sub)
    if not np.isfinite(sub).any():
        return None
    lowest = sub.min()
    ties = np.argwhere(sub == lowest)
    cand = sorted((int(rows[r]), int(cols[c])) for r, c in ties)
    return cand[0]


def find_local_minimum(
    fld: np.ndarray,
    grid: GridSpec,
    center: tuple[int, int],
    search_deg: float,
    buffer_deg: float,
    mask: np.ndarray | None = None,
) -> tuple[int, int] | None:
    """One search attempt; returns the minimum's (row, col) or None on failure.

    The candidate must not lie on the search-box edge and must be the strict
    minimum of its own validation box of half-width ``search_deg +
    buffer_deg``. A ``mask`` (True = excluded cell) restricts both the search
    and the validation.
    """
    if fld.shape != (grid.n_lat, grid.n_lon):
        raise ValidationError(f"field shape {fld.shape} does not match grid")
    rows, cols, full_circle = _window(grid, center, search_deg)
    cand = _box_minimum(fld, rows, cols, mask)
    if cand is None:
        return None
    ci, cj = cand
    if search_deg > 0:
        on_lat_edge = ci == rows[0] or ci == rows[-1]
        on_lon_edge = (not full_circle) and (cj == cols[0] or cj == cols[-1])
        if on_lat_edge or on_lon_edge:
            return None
    vrows, vcols, _ = _window(grid, cand, search_deg + buffer_deg)
    vsub = fld[np.ix_(vrows, vcols)]
    if mask is not None:
        vsub = np.where(mask[np.ix_(vrows, vcols)], np.inf, vsub)
    center_val = fld[ci, cj]
    own = (vrows[:, None] == ci) & (vcols[None, :] == cj)
    if not np.all(vsub[~own] > center_val):
        return None
    return cand


def track_step(
    fields: dict[str, np.ndarray],
    grid: GridSpec,
    current: tuple[int, int],
    cfg: TrackerConfig,
) -> tuple[tuple[int, int], str]:
    """Advance one 6-hour step; returns the new (row, col) and its source."""
    if "msl" not in fields:
        raise ValidationError("track step requires an msl field")
    mask = None
    if cfg.use_land_sea_gate:
        if "lsm" not in fields:
            raise ValidationError("land-sea gate enabled but no lsm field provided")
        mask = fields["lsm"] > LAND_THRESHOLD
    for search_deg in cfg.search_box_degrees:
        cand = find_local_minimum(fields["msl"], grid, current, search_deg, cfg.inner_buffer_deg, mask)
        if cand is not None and cand != current:
            return cand, "msl"
    if cfg.use_z700_fallback:
        if "z700" not in fields:
            raise ValidationError("z700 fallback enabled but no z700 field provided")
        for search_deg in cfg.search_box_degrees:
            cand = find_local_minimum(fields["z700"], grid, current, search_deg, cfg.inner_buffer_deg)
            if cand is not None and cand != current:
                return cand, "z700"
    return current, "carried"


def track_cyclone(
    times: list[datetime],
    fields: dict[str, np.ndarray],
    grid: GridSpec,
    init_position: tuple[float, float],
    init_time: datetime,
    cfg: TrackerConfig,
) -> StormTrack:
    """Track one storm through a 6-hourly field series.

    ``fields["msl"]`` is ``[T, n_lat, n_lon]`` aligned with ``times`` (the
    first entry is the analysis at ``init_time``); optional ``z700`` has the
    same shape and ``lsm`` is a static ``[n_lat, n_lon]`` mask. The first
    track entry is the grid-snapped initial position.
    """
    if len(times) < 2:
        raise ValidationError("field series must cover at least one step beyond init")
    if times[0] != init_time:
        raise ValidationError("field series must start at the initial time")
    for a, b in zip(times, times[1:]):
        if b - a != timedelta(hours=cfg.step_hours):
            raise ValidationError(f"gap in field series between {a} and {b}")
    msl = np.asarray(fields["msl"])
    if msl.shape[0] != len(times):
        raise ValidationError("msl series length does not match times")

    lats, lons = grid.latitudes(), grid.longitudes()
    pos = snap_to_grid(grid, *init_position)
    track = StormTrack()
    track.points.append(
        TrackPoint(times[0], float(lats[pos[0]]), float(lons[pos[1]]), "msl", float(msl[0][pos]))
    )
    for k in range(1, len(times)):
        step_fields = {"msl": msl[k]}
        if "z700" in fields:
            step_fields["z700"] = np.asarray(fields["z700"])[k]
        if "lsm" in fields:
            step_fields["lsm"] = np.asarray(fields["lsm"])
        pos, source = track_step(step_fields, grid, pos, cfg)
        value = float(step_fields.get(source, step_fields["msl"])[pos])
        if source == "carried":
            msg = f"{times[k].isoformat()}: no valid minimum found, position carried"
            track.warnings.append(msg)
            logger.warning(msg)
        track.points.append(TrackPoint(times[k], float(lats[pos[0]]), float(lons[pos[1]]), source, value))
    return track


def write_track_csv(path: str | Path, tracks: dict[int, StormTrack]) -> Path:
    """Track CSV: (member_id, timestamp_iso8601, lat_deg, lon_deg, source, min_value)."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["member_id", "timestamp_iso8601", "lat_deg", "lon_deg", "source", "min_value"])
        for member_id in sorted(tracks):
            for p in tracks[member_id].points:
                writer.writerow(
                    [member_id, p.timestamp.isoformat(), repr(p.lat_deg), repr(p.lon_deg), p.source, repr(p.min_value)]
                )
    return path


def mean_track(tracks: list[StormTrack]) -> StormTrack:
    """Ensemble-mean track: arithmetic latitude, circular-mean longitude."""
    if not tracks:
        raise ValidationError("need at least one track")
    n_points = len(tracks[0].points)
    if any(len(t.points) != n_points for t in tracks):
        raise ValidationError("member tracks must share timestamps")
    out = StormTrack()
    for k in range(n_points):
        pts = [t.points[k] for t in tracks]
        lat = float(np.mean([p.lat_deg for p in pts]))
        ang = np.deg2rad([p.lon_deg for p in pts])
        lon = float(np.rad2deg(np.arctan2(np.mean(np.sin(ang)), np.mean(np.cos(ang)))) % 360.0)
        value = float(np.mean([p.min_value for p in pts]))
        out.points.append(TrackPoint(pts[0].timestamp, lat, lon, "mean", value))
    return out
