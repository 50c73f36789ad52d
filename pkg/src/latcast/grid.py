"""Equiangular lat/lon grid geometry, variable catalog, and field preprocessing.

Conventions used everywhere in this package:

* latitudes are stored north-to-south (``lat_start_deg`` at row 0, negative
  ``lat_step_deg``), in degrees within [-90, 90];
* longitudes start at 0 degrees, eastward-positive, in [0, 360);
* field tensors are ``[channels, n_lat, n_lon]``, channel order matching the
  catalog exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from datetime import datetime, timezone

import numpy as np

from .errors import ValidationError

# The 13 pressure levels (hPa) carried by every atmospheric variable in the
# canonical catalog.
PRESSURE_LEVELS_HPA = (1000, 925, 850, 700, 500, 400, 300, 250, 200, 150, 100, 70, 50)

SINGLE_VARIABLES = ("10u", "10v", "2t", "msl", "sst", "tp-6hr")
ATMOSPHERIC_VARIABLES = ("z", "q", "t", "u", "v", "w")
STATIC_VARIABLES = ("lsm", "sdor", "isor", "anor", "slor")

_KINDS = ("atmospheric", "single", "static", "clock")


@dataclass(frozen=True)
class GridSpec:
    """Equiangular latitude/longitude grid."""

    n_lat: int
    n_lon: int
    lat_start_deg: float = 90.0
    lat_step_deg: float = -1.5
    lon_start_deg: float = 0.0
    lon_step_deg: float = 1.5
    south_pole_cropped: bool = False

    def __post_init__(self):
        if self.n_lat < 1 or self.n_lon < 1:
            raise ValidationError("grid must have at least one row and column")
        if self.lat_step_deg == 0 and self.n_lat > 1:
            raise ValidationError("lat_step_deg must be nonzero for multi-row grids")
        lats = self.latitudes()
        if lats.min() < -90.0 - 1e-9 or lats.max() > 90.0 + 1e-9:
            raise ValidationError("latitudes must lie within [-90, 90]")
        if not (0.0 <= self.lon_start_deg < 360.0):
            raise ValidationError("lon_start_deg must lie in [0, 360)")
        if self.lon_step_deg <= 0:
            raise ValidationError("lon_step_deg must be positive")
        if self.n_lon * self.lon_step_deg > 360.0 + 1e-9:
            raise ValidationError("longitude rows must not wrap past 360 degrees")
        if self.south_pole_cropped:
            if self.n_lat % 2 != 0:
                raise ValidationError("south-pole-cropped grid must have even n_lat")
            if np.any(np.isclose(lats, -90.0)):
                raise ValidationError("cropped grid must not contain a -90 degree row")

    def latitudes(self) -> np.ndarray:
        return self.lat_start_deg + self.lat_step_deg * np.arange(self.n_lat)

    def longitudes(self) -> np.ndarray:
        return (self.lon_start_deg + self.lon_step_deg * np.arange(self.n_lon)) % 360.0

    def crop_south_pole(self) -> "GridSpec":
        """Drop the southernmost row, which must sit at exactly -90 degrees."""
        lats = self.latitudes()
        south = int(np.argmin(lats))
        if not math.isclose(lats[south], -90.0, abs_tol=1e-9):
            raise ValidationError("southernmost row is not at -90 degrees")
        if south != self.n_lat - 1:
            raise ValidationError("grid must be ordered north-to-south to crop")
        return replace(self, n_lat=self.n_lat - 1, south_pole_cropped=True)

    def block_centers(self, factor: int) -> tuple[np.ndarray, np.ndarray]:
        """Cell-center coordinates after coarsening by ``factor`` per axis.

        Used to place latent-grid tokens: each coarse cell's center is the
        mean of the fine coordinates it covers (linear in latitude; longitude
        offsets stay within one wrap so the plain mean is safe).
        """
        if self.n_lat % factor or self.n_lon % factor:
            raise ValidationError(
                f"grid {self.n_lat}x{self.n_lon} not divisible by factor {factor}"
            )
        half = (factor - 1) / 2.0
        lat = self.lat_start_deg + self.lat_step_deg * (factor * np.arange(self.n_lat // factor) + half)
        lon = (self.lon_start_deg + self.lon_step_deg * (factor * np.arange(self.n_lon // factor) + half)) % 360.0
        return lat, lon


@dataclass(frozen=True)
class CatalogEntry:
    short_name: str
    kind: str
    pressure_levels: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValidationError(f"unknown variable kind {self.kind!r}")
        if self.kind == "atmospheric" and not self.pressure_levels:
            raise ValidationError(f"atmospheric variable {self.short_name} needs pressure levels")
        if self.kind != "atmospheric" and self.pressure_levels:
            raise ValidationError(f"{self.kind} variable {self.short_name} must not carry levels")


@dataclass(frozen=True)
class VariableCatalog:
    """Ordered variable list; channel order is entry order, levels innermost."""

    entries: tuple[CatalogEntry, ...]

    def __post_init__(self):
        names = self.channel_names()
        if len(names) != len(set(names)):
            raise ValidationError("duplicate channel names in catalog")

    def channel_names(self) -> list[str]:
        names: list[str] = []
        for e in self.entries:
            if e.kind == "clock":
                continue
            if e.kind == "atmospheric":
                names.extend(f"{e.short_name}-{lev}" for lev in e.pressure_levels)
            else:
                names.append(e.short_name)
        return names

    @property
    def n_channels(self) -> int:
        return len(self.channel_names())

    @property
    def n_dynamic(self) -> int:
        return sum(
            len(e.pressure_levels) if e.kind == "atmospheric" else 1
            for e in self.entries
            if e.kind in ("atmospheric", "single")
        )

    @property
    def n_static(self) -> int:
        return sum(1 for e in self.entries if e.kind == "static")

    def channel_kinds(self) -> list[str]:
        kinds: list[str] = []
        for e in self.entries:
            if e.kind == "clock":
                continue
            n = len(e.pressure_levels) if e.kind == "atmospheric" else 1
            kinds.extend([e.kind] * n)
        return kinds

    def dynamic_indices(self) -> list[int]:
        return [i for i, k in enumerate(self.channel_kinds()) if k != "static"]

    def static_indices(self) -> list[int]:
        return [i for i, k in enumerate(self.channel_kinds()) if k == "static"]

    def index_of(self, channel_name: str) -> int:
        try:
            return self.channel_names().index(channel_name)
        except ValueError:
            raise ValidationError(f"channel {channel_name!r} not in catalog") from None

    def to_dict(self) -> list[dict]:
        return [
            {"short_name": e.short_name, "kind": e.kind, "pressure_levels": list(e.pressure_levels)}
            for e in self.entries
        ]

    @classmethod
    def from_dict(cls, entries: list[dict]) -> "VariableCatalog":
        return cls(
            tuple(
                CatalogEntry(d["short_name"], d["kind"], tuple(d.get("pressure_levels", ())))
                for d in entries
            )
        )


def canonical_catalog() -> VariableCatalog:
    """The 89-channel catalog: 6 single + 6 atmospheric x 13 levels + 5 static."""
    entries = [CatalogEntry(n, "single") for n in SINGLE_VARIABLES]
    entries += [CatalogEntry(n, "atmospheric", PRESSURE_LEVELS_HPA) for n in ATMOSPHERIC_VARIABLES]
    entries += [CatalogEntry(n, "static") for n in STATIC_VARIABLES]
    entries.append(CatalogEntry("year-progress", "clock"))
    return VariableCatalog(tuple(entries))


def canonical_grid() -> GridSpec:
    """Uncropped 1.5-degree global grid (121 x 240, poles included)."""
    return GridSpec(n_lat=121, n_lon=240)


@dataclass
class Snapshot:
    """One time instant of the full channel stack on a grid."""

    grid: GridSpec
    timestamp: datetime
    data: np.ndarray
    catalog: VariableCatalog

    def __post_init__(self):
        if self.timestamp.tzinfo is None:
            self.timestamp = self.timestamp.replace(tzinfo=timezone.utc)
        self.data = np.asarray(self.data, dtype=np.float32)
        expected = (self.catalog.n_channels, self.grid.n_lat, self.grid.n_lon)
        if self.data.shape != expected:
            raise ValidationError(f"snapshot data shape {self.data.shape} != {expected}")

    def channel(self, name: str) -> np.ndarray:
        return self.data[self.catalog.index_of(name)]


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean/std over a stated fitting period."""

    names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if not (len(self.names) == self.mean.shape[0] == self.std.shape[0]):
            raise ValidationError("stats names/mean/std lengths disagree")
        if np.any(~np.isfinite(self.mean)) or np.any(~np.isfinite(self.std)):
            raise ValidationError("stats must be finite")
        if np.any(self.std <= 0):
            bad = [n for n, s in zip(self.names, self.std) if s <= 0]
            raise ValidationError(f"non-positive std for channels {bad}")

    def for_channels(self, names: list[str]) -> tuple[np.ndarray, np.ndarray]:
        """Mean/std vectors aligned to ``names``; errors on a missing channel."""
        index = {n: i for i, n in enumerate(self.names)}
        try:
            sel = [index[n] for n in names]
        except KeyError as exc:
            raise ValidationError(f"missing stats for channel {exc.args[0]!r}") from None
        return self.mean[sel], self.std[sel]


def fit_channel_stats(fields: np.ndarray, names: list[str]) -> ChannelStats:
    """Fit per-channel stats over samples ``[n, C, H, W]``, ignoring NaNs."""
    fields = np.asarray(fields, dtype=np.float64)
    if fields.ndim != 4 or fields.shape[1] != len(names):
        raise ValidationError("expected fields of shape [n_samples, n_channels, H, W]")
    mean = np.nanmean(fields, axis=(0, 2, 3))
    std = np.nanstd(fields, axis=(0, 2, 3))
    if np.any(std <= 0) or np.any(~np.isfinite(std)):
        bad = [n for n, s in zip(names, std) if not (np.isfinite(s) and s > 0)]
        raise ValidationError(f"degenerate statistics for channels {bad}")
    return ChannelStats(tuple(names), mean, std)


def latitude_weights(grid: GridSpec, allow_zero_weight_rows: bool = False) -> np.ndarray:
    """Cosine-latitude area weights, normalized so the row mean is exactly 1.

    Rows at exactly +-90 degrees have zero weight; they are rejected unless
    ``allow_zero_weight_rows`` is set (the canonical cropped grid keeps its
    north-pole row, so the pipeline passes the flag).
    """
    lats = grid.latitudes()
    at_pole = np.isclose(np.abs(lats), 90.0)
    if np.any(at_pole) and not allow_zero_weight_rows:
        raise ValidationError(
            "grid has a +-90 degree row with zero cosine weight; "
            "pass allow_zero_weight_rows=True to accept degenerate rows"
        )
    cos = np.cos(np.deg2rad(lats))
    cos[at_pole] = 0.0
    return cos / cos.mean()


def normalize(snapshot: Snapshot, stats: ChannelStats) -> Snapshot:
    """Per-channel ``(x - mean) / std``; statics use the same mechanism."""
    mean, std = stats.for_channels(snapshot.catalog.channel_names())
    data = (snapshot.data.astype(np.float64) - mean[:, None, None]) / std[:, None, None]
    return Snapshot(snapshot.grid, snapshot.timestamp, data.astype(np.float32), snapshot.catalog)


def denormalize(snapshot: Snapshot, stats: ChannelStats) -> Snapshot:
    mean, std = stats.for_channels(snapshot.catalog.channel_names())
    data = snapshot.data.astype(np.float64) * std[:, None, None] + mean[:, None, None]
    return Snapshot(snapshot.grid, snapshot.timestamp, data.astype(np.float32), snapshot.catalog)


SST_FILL_VALUE = -2.0


def preprocess(raw: Snapshot, stats: ChannelStats) -> Snapshot:
    """South-pole crop, normalization, then sea-surface-temperature NaN fill.

    The sst channel's NaNs (land cells) become exactly -2.0 after
    normalization; any other remaining NaN is an error.
    """
    grid = raw.grid
    data = raw.data
    lats = grid.latitudes()
    if np.any(np.isclose(lats, -90.0)):
        south = int(np.argmin(lats))
        grid = grid.crop_south_pole()
        data = np.delete(data, south, axis=1)
    elif grid.n_lat % 2 != 0:
        raise ValidationError("odd-row grid without a -90 degree row to crop")
    snap = Snapshot(grid, raw.timestamp, data, raw.catalog)
    snap = normalize(snap, stats)
    names = snap.catalog.channel_names()
    if "sst" in names:
        sst = snap.data[snap.catalog.index_of("sst")]
        sst[np.isnan(sst)] = SST_FILL_VALUE
    bad = [n for i, n in enumerate(names) if np.any(np.isnan(snap.data[i]))]
    if bad:
        raise ValidationError(f"NaN values remain after preprocessing in channels {bad}")
    return snap


def derive_tp6(hourly_tp: np.ndarray) -> np.ndarray:
    """6-hour precipitation totals from hourly accumulations.

    ``hourly_tp`` is ``[T, ...]`` of hourly values; output ``[T-5, ...]``
    where entry ``k`` is the sum of hours ``k..k+5``, i.e. the total for the
    window ending at hour index ``k+5`` (the first valid target).
    """
    hourly_tp = np.asarray(hourly_tp)
    if hourly_tp.ndim < 1 or hourly_tp.shape[0] < 6:
        raise ValidationError("insufficient history: need at least 6 consecutive hourly fields")
    csum = np.cumsum(hourly_tp, axis=0, dtype=np.float64)
    total = csum[5:].copy()
    total[1:] -= csum[:-6]
    return total.astype(hourly_tp.dtype)
