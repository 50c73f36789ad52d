"""Matplotlib figures rendered next to the delimited report outputs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import ScoreReport
from .tracker import StormTrack


def _ensure_parent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def loss_figure(csv_path: str | Path, out_path: str | Path) -> Path:
    steps, losses = [], []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    out_path = _ensure_parent(Path(out_path))
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def score_figures(report: ScoreReport, out_dir: str | Path) -> list[Path]:
    """One figure per metric: value vs. lead time, one line per variable."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = sorted({r.metric for r in report.rows})
    paths = []
    for metric in metrics:
        fig, ax = plt.subplots(figsize=(6, 4))
        variables = sorted({r.variable for r in report.rows if r.metric == metric})
        for var in variables:
            rows = sorted(
                (r for r in report.rows if r.metric == metric and r.variable == var),
                key=lambda r: r.lead_hours,
            )
            leads = [r.lead_hours for r in rows]
            vals = [r.value for r in rows]
            ax.plot(leads, vals, marker="o", ms=3, label=var)
            stds = [r.std for r in rows]
            if all(s is not None for s in stds):
                lo = [v - s for v, s in zip(vals, stds)]
                hi = [v + s for v, s in zip(vals, stds)]
                ax.fill_between(leads, lo, hi, alpha=0.15)
        ax.set_xlabel("lead time (hours)")
        ax.set_ylabel(metric)
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / f"{metric}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def track_figure(tracks: dict[int, StormTrack], mean: StormTrack, out_path: str | Path) -> Path:
    """Member storm tracks (thin) with the ensemble-mean track (bold)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for m in sorted(tracks):
        pos = tracks[m].positions()
        ax.plot(pos[:, 1], pos[:, 0], color="steelblue", alpha=0.5, lw=0.8)
    pos = mean.positions()
    ax.plot(pos[:, 1], pos[:, 0], color="crimson", lw=2.0, label="ensemble mean")
    ax.plot(pos[0, 1], pos[0, 0], "k*", ms=10, label="init")
    ax.set_xlabel("longitude (deg)")
    ax.set_ylabel("latitude (deg)")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_path = _ensure_parent(Path(out_path))
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
