"""Rotary phases for spherical attention and periodic conditioning embeddings.

Token positions carry three components: a frame index (conditioning frames
are negative, output frames 0..h-1), a latitude angle mapped linearly from
[-90, 90] degrees onto [-1.5*pi, 1.5*pi], and a longitude angle in [0, 2*pi).
Each attention head dimension is split across the three axes and rotated
pairwise, so dot products between rotated queries and keys depend only on
coordinate differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .errors import ValidationError

ROPE_BASE_DEFAULT = 256.0
YEAR_EMBED_BASE = 10000.0


@dataclass(frozen=True)
class GeoRopeConfig:
    """Per-head rotary configuration: axis split and frequency base."""

    head_dim: int
    axis_split: tuple[int, int, int]
    base: float = ROPE_BASE_DEFAULT

    def __post_init__(self):
        d_t, d_h, d_w = self.axis_split
        if d_t + d_h + d_w != self.head_dim:
            raise ValidationError("axis split must sum to head_dim")
        if any(d < 0 or d % 2 for d in self.axis_split):
            raise ValidationError("each axis split must be a nonnegative even count")
        if self.head_dim % 2:
            raise ValidationError("head_dim must be even")
        if self.base <= 1.0:
            raise ValidationError("rope base must exceed 1")

    def axis_frequencies(self, d_axis: int) -> np.ndarray:
        """theta_j = base^(-2j/d_axis) for j = 0..d_axis/2-1 (theta_0 = 1)."""
        j = np.arange(d_axis // 2, dtype=np.float64)
        return self.base ** (-2.0 * j / d_axis)


@dataclass(frozen=True)
class TokenCoord:
    t_index: float
    p_lat: float
    p_lon: float


def lat_to_rope(lat_deg) -> np.ndarray | float:
    """Linear map [-90, 90] degrees -> [-1.5*pi, 1.5*pi] radians."""
    return np.multiply(lat_deg, 1.5 * np.pi / 90.0)


def lon_to_rope(lon_deg) -> np.ndarray | float:
    return np.deg2rad(np.mod(lon_deg, 360.0))


@dataclass(frozen=True)
class YearClock:
    """Leap-aware fraction of year elapsed for a UTC timestamp."""

    timestamp: datetime

    def __post_init__(self):
        if self.timestamp.tzinfo is None:
            object.__setattr__(self, "timestamp", self.timestamp.replace(tzinfo=timezone.utc))

    @property
    def year_start(self) -> datetime:
        return datetime(self.timestamp.year, 1, 1, tzinfo=timezone.utc)

    @property
    def year_length_seconds(self) -> float:
        start = self.year_start
        end = datetime(self.timestamp.year + 1, 1, 1, tzinfo=timezone.utc)
        return (end - start).total_seconds()

    @property
    def phase(self) -> float:
        elapsed = (self.timestamp - self.year_start).total_seconds()
        return 2.0 * math.pi * elapsed / self.year_length_seconds


def rope_phases(coord: TokenCoord, cfg: GeoRopeConfig) -> np.ndarray:
    """Phase vector of length head_dim/2: frame, latitude, then longitude parts."""
    d_t, d_h, d_w = cfg.axis_split
    parts = []
    for value, d_axis in ((coord.t_index, d_t), (coord.p_lat, d_h), (coord.p_lon, d_w)):
        if d_axis:
            parts.append(value * cfg.axis_frequencies(d_axis))
    return np.concatenate(parts) if parts else np.zeros(0)


def rope_phase_table(
    t_index: np.ndarray, p_lat: np.ndarray, p_lon: np.ndarray, cfg: GeoRopeConfig
) -> np.ndarray:
    """Vectorized ``rope_phases`` for n tokens -> ``[n, head_dim/2]``."""
    t_index = np.asarray(t_index, dtype=np.float64)
    p_lat = np.asarray(p_lat, dtype=np.float64)
    p_lon = np.asarray(p_lon, dtype=np.float64)
    if not (t_index.shape == p_lat.shape == p_lon.shape):
        raise ValidationError("coordinate arrays must share a shape")
    d_t, d_h, d_w = cfg.axis_split
    parts = []
    for value, d_axis in ((t_index, d_t), (p_lat, d_h), (p_lon, d_w)):
        if d_axis:
            parts.append(value[:, None] * cfg.axis_frequencies(d_axis)[None, :])
    return np.concatenate(parts, axis=1) if parts else np.zeros((t_index.shape[0], 0))


def apply_rotation(vec: np.ndarray, phases: np.ndarray) -> np.ndarray:
    """Rotate consecutive pairs (v[2j], v[2j+1]) by phases[j]; norm-preserving."""
    vec = np.asarray(vec, dtype=np.float64)
    phases = np.asarray(phases, dtype=np.float64)
    if vec.shape[-1] != 2 * phases.shape[-1]:
        raise ValidationError(f"vector length {vec.shape[-1]} != 2 * {phases.shape[-1]} phases")
    even = vec[..., 0::2]
    odd = vec[..., 1::2]
    cos = np.cos(phases)
    sin = np.sin(phases)
    out = np.empty_like(vec)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def year_embedding(clock: YearClock | float, dim: int, base: float = YEAR_EMBED_BASE) -> np.ndarray:
    """Periodic embedding of the elapsed-year phase.

    With K = dim/2, component pairs are (alpha_k sin(k*psi), alpha_k cos(k*psi))
    for k = 1..K, with amplitudes alpha_k = exp(-(ln(base)/K) * (k-1)) so
    alpha_1 = 1. Integer harmonics keep the embedding continuous across the
    year boundary.
    """
    if dim % 2 or dim < 2:
        raise ValidationError("year embedding dim must be a positive even count")
    psi = clock.phase if isinstance(clock, YearClock) else float(clock)
    k = np.arange(1, dim // 2 + 1, dtype=np.float64)
    alpha = np.exp(-(math.log(base) / (dim // 2)) * (k - 1))
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = alpha * np.sin(k * psi)
    out[1::2] = alpha * np.cos(k * psi)
    return out


def sinusoidal_embedding(value: float, dim: int, base: float = YEAR_EMBED_BASE) -> np.ndarray:
    """Plain sin/cos embedding of an unbounded scalar (noise-level conditioning)."""
    if dim % 2 or dim < 2:
        raise ValidationError("sinusoidal embedding dim must be a positive even count")
    half = dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = float(value) * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])
