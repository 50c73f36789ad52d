"""Latitude-weighted deterministic and probabilistic forecast verification."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .grid import GridSpec, Snapshot, VariableCatalog


def weighted_rmse(pred: np.ndarray, truth: np.ndarray, weights: np.ndarray) -> float:
    """Latitude-weighted root-mean-square error.

    ``pred``/``truth`` are fields with the latitude axis second-to-last;
    ``weights`` is the per-row weight vector with mean 1 (see
    ``grid.latitude_weights``). Returns sqrt(mean(w * (pred - truth)^2)).
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValidationError(f"shape mismatch {pred.shape} vs {truth.shape}")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (pred.shape[-2],):
        raise ValidationError("weights must match the latitude axis")
    err2 = (pred - truth) ** 2 * weights[:, None]
    return float(np.sqrt(err2.mean()))


def fair_crps(members: np.ndarray, truth: np.ndarray) -> np.ndarray | float:
    """Unbiased (fair) ensemble CRPS, lifted pointwise.

    ``members`` has the ensemble axis first, ``truth`` the remaining shape.
    Uses the sort-based O(M log M) evaluation of

        (1/M) sum_k |x_k - y| - (1/(2 M (M-1))) sum_k sum_k' |x_k - x_k'|

    which matches the pairwise double sum exactly (see
    ``fair_crps_pairwise`` for the O(M^2) reference).
    """
    members = np.asarray(members, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    m = members.shape[0]
    if m < 2:
        raise ValidationError("ensemble too small for unbiased estimator (need M >= 2)")
    if members.shape[1:] != truth.shape:
        raise ValidationError("member fields must match truth shape")
    accuracy = np.abs(members - truth[None]).mean(axis=0)
    srt = np.sort(members, axis=0)
    coeff = 2.0 * np.arange(m) - m + 1.0
    spread = np.tensordot(coeff, srt, axes=(0, 0)) / (m * (m - 1))
    out = accuracy - spread
    return float(out) if out.ndim == 0 else out


def fair_crps_pairwise(members: np.ndarray, truth: np.ndarray) -> np.ndarray | float:
    """O(M^2) double-sum form of the fair CRPS; the independent reference."""
    members = np.asarray(members, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    m = members.shape[0]
    if m < 2:
        raise ValidationError("ensemble too small for unbiased estimator (need M >= 2)")
    accuracy = np.abs(members - truth[None]).mean(axis=0)
    spread = np.abs(members[None, :] - members[:, None]).sum(axis=(0, 1)) / (2.0 * m * (m - 1))
    out = accuracy - spread
    return float(out) if out.ndim == 0 else out


def crps_field(members: np.ndarray, truth: np.ndarray, weights: np.ndarray) -> float:
    """Pointwise fair CRPS followed by the latitude-weighted spatial mean."""
    pointwise = fair_crps(members, truth)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (truth.shape[-2],):
        raise ValidationError("weights must match the latitude axis")
    return float((pointwise * weights[:, None]).mean())


@dataclass
class EnsembleForecast:
    """Per-member forecast trajectories at 6-hourly lead times.

    ``fields`` is ``[members, leads, channels, n_lat, n_lon]`` in physical
    units; ``lead_hours`` are strictly increasing multiples of the step.
    """

    init_time: datetime
    lead_hours: tuple[int, ...]
    fields: np.ndarray
    grid: GridSpec
    catalog: VariableCatalog
    member_seeds: tuple[int, ...]
    step_hours: int = 6

    def __post_init__(self):
        self.fields = np.asarray(self.fields, dtype=np.float32)
        m = len(self.member_seeds)
        expected = (m, len(self.lead_hours), self.catalog.n_channels, self.grid.n_lat, self.grid.n_lon)
        if m < 1:
            raise ValidationError("forecast needs at least one member")
        if self.fields.shape != expected:
            raise ValidationError(f"forecast fields shape {self.fields.shape} != {expected}")
        leads = np.asarray(self.lead_hours)
        if np.any(np.diff(leads) <= 0) or np.any(leads % self.step_hours) or np.any(leads <= 0):
            raise ValidationError(
                f"lead hours must be strictly increasing positive multiples of {self.step_hours}"
            )

    @property
    def n_members(self) -> int:
        return len(self.member_seeds)

    def valid_times(self) -> list[datetime]:
        return [self.init_time + timedelta(hours=int(h)) for h in self.lead_hours]


def ensemble_mean(forecast: EnsembleForecast) -> list[Snapshot]:
    """Pointwise arithmetic mean across members, one snapshot per lead time."""
    mean = forecast.fields.astype(np.float64).mean(axis=0)
    return [
        Snapshot(forecast.grid, t, mean[i], forecast.catalog)
        for i, t in enumerate(forecast.valid_times())
    ]


@dataclass(frozen=True)
class ScoreRow:
    variable: str
    lead_hours: int
    metric: str
    value: float
    n_samples: int
    std: float | None = None


@dataclass
class ScoreReport:
    rows: list[ScoreRow] = field(default_factory=list)

    def add(self, variable: str, lead_hours: int, metric: str, values: list[float]) -> None:
        values = [float(v) for v in values]
        mean = float(np.mean(values))
        if not np.isfinite(mean) or mean < -1e-12:
            raise ValidationError(f"score {metric} for {variable}@{lead_hours}h is not a valid score")
        std = float(np.std(values, ddof=1)) if len(values) > 1 else None
        self.rows.append(ScoreRow(variable, lead_hours, metric, mean, len(values), std))

    def sorted_rows(self) -> list[ScoreRow]:
        return sorted(self.rows, key=lambda r: (r.variable, r.lead_hours, r.metric))

    def value(self, variable: str, lead_hours: int, metric: str) -> float:
        for r in self.rows:
            if (r.variable, r.lead_hours, r.metric) == (variable, lead_hours, metric):
                return r.value
        raise KeyError((variable, lead_hours, metric))

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variable", "lead_hours", "metric", "value", "n_samples", "std"])
            for r in self.sorted_rows():
                writer.writerow(
                    [
                        r.variable,
                        r.lead_hours,
                        r.metric,
                        repr(r.value),
                        r.n_samples,
                        "" if r.std is None else repr(r.std),
                    ]
                )
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "ScoreReport":
        report = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                report.rows.append(
                    ScoreRow(
                        row["variable"],
                        int(row["lead_hours"]),
                        row["metric"],
                        float(row["value"]),
                        int(row["n_samples"]),
                        float(row["std"]) if row["std"] else None,
                    )
                )
        return report
