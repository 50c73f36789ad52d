"""End-to-end orchestration: training, autoregressive ensemble rollout,
evaluation, and storm-track extraction.

Every run writes its artifacts under an output directory together with a
RunManifest JSON recording configs, seeds, and input digests. All heavy
randomness flows through counter-based generators keyed by (seed, step) or
by member index, so reruns with identical inputs are byte-identical.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
import torch

from . import autoencoder as ae
from . import diffusion, tensorio
from .denoiser import Denoiser, DenoiserConfig, frame_token_coords
from .embeddings import YearClock
from .errors import NumericalError, ValidationError
from .grid import (
    ChannelStats,
    GridSpec,
    Snapshot,
    VariableCatalog,
    denormalize,
    fit_channel_stats,
    latitude_weights,
    preprocess,
)
from .metrics import EnsembleForecast, ScoreReport, crps_field, ensemble_mean, weighted_rmse
from .tracker import StormTrack, TrackerConfig, mean_track, track_cyclone, write_track_csv

__version__ = "0.1.0"


def configure_threads() -> int:
    """Cap worker parallelism from the LDC_THREADS environment variable."""
    value = os.environ.get("LDC_THREADS")
    if value:
        try:
            n = max(1, int(value))
        except ValueError:
            raise ValidationError(f"LDC_THREADS must be an integer, got {value!r}") from None
        torch.set_num_threads(n)
        return n
    return torch.get_num_threads()


# ---------------------------------------------------------------------------
# Run manifest.


@dataclass
class RunManifest:
    command: str
    seed: int
    config: dict
    out_dir: str
    code_version: str = __version__
    input_digests: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        body = {
            "command": self.command,
            "seed": self.seed,
            "config": self.config,
            "config_hash": tensorio.config_hash(self.config),
            "out_dir": self.out_dir,
            "code_version": self.code_version,
            "input_digests": self.input_digests,
            "timings": self.timings,
            "notes": self.notes,
        }
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# ---------------------------------------------------------------------------
# Optimizer and EMA configuration.


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    warmup_steps: int = 1000

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def lr_at(step: int, total_steps: int, cfg: OptimizerConfig) -> float:
    """Linear warmup from 0 over ``warmup_steps`` then cosine decay to 0."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    if total_steps <= cfg.warmup_steps:
        return cfg.lr
    t = (step - cfg.warmup_steps) / (total_steps - cfg.warmup_steps)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, t)))


@dataclass(frozen=True)
class EmaConfig:
    max_decay: float = 0.9999
    inv_gamma: float = 1.0
    power: float = 2.0 / 3.0
    update_after_step: int = 1000

    def state_for(self, module: torch.nn.Module) -> diffusion.EmaState:
        return diffusion.EmaState.from_module(
            module,
            max_decay=self.max_decay,
            inv_gamma=self.inv_gamma,
            power=self.power,
            update_after_step=self.update_after_step,
        )


# ---------------------------------------------------------------------------
# Dataset loading.


@dataclass
class SnapshotDataset:
    snapshots: list[Snapshot]
    stats: ChannelStats
    paths: list[Path]

    @property
    def grid(self) -> GridSpec:
        return self.snapshots[0].grid

    @property
    def catalog(self) -> VariableCatalog:
        return self.snapshots[0].catalog

    def data_array(self) -> np.ndarray:
        return np.stack([s.data for s in self.snapshots])


def load_dataset(directory: str | Path) -> SnapshotDataset:
    """Read a directory of preprocessed snapshots (sorted) plus stats.csv."""
    directory = Path(directory)
    paths = sorted(directory.glob("*" + tensorio.TENSOR_SUFFIX))
    if not paths:
        raise ValidationError(f"no {tensorio.TENSOR_SUFFIX} snapshots in {directory}")
    stats_path = directory / "stats.csv"
    if not stats_path.exists():
        raise ValidationError(f"missing stats.csv in {directory}")
    snapshots = [tensorio.read_snapshot(p) for p in paths]
    snapshots.sort(key=lambda s: s.timestamp)
    grid, catalog = snapshots[0].grid, snapshots[0].catalog
    for s in snapshots[1:]:
        if s.grid != grid or s.catalog != catalog:
            raise ValidationError("dataset mixes grids or catalogs")
    return SnapshotDataset(snapshots, tensorio.read_channel_stats(stats_path), paths)


def preprocess_dataset(input_dir: str | Path, out_dir: str | Path, stats_path: str | Path | None = None) -> Path:
    """Crop/normalize raw snapshots into ``out_dir`` and write stats.csv.

    With ``stats_path`` None the stats are fit on the (cropped) inputs.
    """
    input_dir, out_dir = Path(input_dir), Path(out_dir)
    paths = sorted(input_dir.glob("*" + tensorio.TENSOR_SUFFIX))
    if not paths:
        raise ValidationError(f"no {tensorio.TENSOR_SUFFIX} snapshots in {input_dir}")
    raws = [tensorio.read_snapshot(p) for p in paths]
    raws.sort(key=lambda s: s.timestamp)
    if stats_path is not None:
        stats = tensorio.read_channel_stats(stats_path)
    else:
        cropped = []
        for snap in raws:
            lats = snap.grid.latitudes()
            if np.any(np.isclose(lats, -90.0)):
                cropped.append(np.delete(snap.data, int(np.argmin(lats)), axis=1))
            else:
                cropped.append(snap.data)
        stats = fit_channel_stats(np.stack(cropped), raws[0].catalog.channel_names())
    out_dir.mkdir(parents=True, exist_ok=True)
    for path, snap in zip(paths, raws):
        tensorio.write_snapshot(out_dir / path.name, preprocess(snap, stats))
    tensorio.write_channel_stats(out_dir / "stats.csv", stats)
    return out_dir


# ---------------------------------------------------------------------------
# Autoencoder training.


def _save_module(out_dir: Path, module: torch.nn.Module, config: dict) -> Path:
    tensors = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    return tensorio.write_checkpoint(out_dir, tensors, config)


def _load_state(module: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    state = {k: torch.as_tensor(v) for k, v in tensors.items()}
    module.load_state_dict(state)


def _write_loss_csv(path: Path, rows: list[tuple[int, float, float]]) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,lr,loss\n")
        for step, lr, loss in rows:
            fh.write(f"{step},{lr!r},{loss!r}\n")
    return path


def train_autoencoder(
    dataset_dir: str | Path,
    out_dir: str | Path,
    model_config: ae.AutoencoderConfig,
    optimizer: OptimizerConfig,
    steps: int,
    batch_size: int = 4,
    seed: int = 0,
    ema: EmaConfig = EmaConfig(),
    augment: bool = True,
) -> Path:
    """Overfit-capable autoencoder training loop on preprocessed snapshots.

    Writes ``autoencoder/final`` and ``autoencoder/ema`` checkpoints, the
    loss curve CSV, and a loss figure; returns the run directory.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(dataset_dir)
    data = torch.as_tensor(dataset.data_array(), dtype=torch.float32)
    torch.manual_seed(seed)
    model = ae.Autoencoder(model_config)
    opt = torch.optim.AdamW(
        model.parameters(), lr=optimizer.lr, betas=optimizer.betas,
        eps=optimizer.eps, weight_decay=optimizer.weight_decay,
    )
    ema_state = ema.state_for(model)
    rows = []
    for step in range(steps):
        rng = diffusion.step_rng(seed, step)
        lr = lr_at(step, steps, optimizer)
        for group in opt.param_groups:
            group["lr"] = lr
        idx = rng.choice(data.shape[0], size=min(batch_size, data.shape[0]), replace=False)
        batches = [data[np.sort(idx)]]
        if augment:
            for _ in range(2):
                di = int(rng.integers(dataset.grid.n_lat))
                dj = int(rng.integers(dataset.grid.n_lon))
                batches.append(torch.roll(batches[0], shifts=(-di, -dj), dims=(2, 3)))
        last = None
        for batch in batches:
            opt.zero_grad()
            recon = model.decode_tensor(model.encode_tensor(batch))
            loss = torch.stack(
                [ae.relative_l2_loss(batch[i], recon[i]) for i in range(batch.shape[0])]
            ).mean()
            loss.backward()
            opt.step()
            last = float(loss.detach())
        ema_state.step = step + 1
        diffusion.ema_update(ema_state, dict(model.state_dict()))
        rows.append((step, lr, last))
    cfg_dict = model_config.to_dict()
    _save_module(out_dir / "autoencoder" / "final", model, cfg_dict)
    ema_model = ae.Autoencoder(model_config)
    ema_state.copy_to(ema_model)
    _save_module(out_dir / "autoencoder" / "ema", ema_model, cfg_dict)
    _write_loss_csv(out_dir / "ae_loss.csv", rows)
    from . import reports

    reports.loss_figure(out_dir / "ae_loss.csv", out_dir / "figures" / "ae_loss.png")
    return out_dir


def load_autoencoder(checkpoint_dir: str | Path) -> ae.Autoencoder:
    tensors, config = tensorio.read_checkpoint(checkpoint_dir)
    model = ae.Autoencoder(ae.AutoencoderConfig.from_dict(config))
    _load_state(model, tensors)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Diffusion training.


def _encode_dataset(model: ae.Autoencoder, dataset: SnapshotDataset) -> np.ndarray:
    with torch.no_grad():
        latents = [
            model.encode_tensor(torch.as_tensor(s.data, dtype=torch.float32)).numpy()
            for s in dataset.snapshots
        ]
    return np.stack(latents)


def _network_adapter(model: Denoiser, cond_coords, target_coords):
    """Wrap the torch module as network(x, cond, c_noise) over numpy or torch.

    ``cond`` is an opaque pair (conditioning latent block, year phase).
    """
    dtype = next((p.dtype for p in model.parameters()), torch.get_default_dtype())

    def network(x, cond, c_noise):
        z_cond, year_phase = cond
        torch_in = isinstance(x, torch.Tensor)
        xt = x.to(dtype) if torch_in else torch.as_tensor(np.asarray(x), dtype=dtype)
        zc = z_cond.to(dtype) if isinstance(z_cond, torch.Tensor) else torch.as_tensor(
            np.asarray(z_cond), dtype=dtype
        )
        out = model(xt, zc, float(c_noise), float(year_phase), cond_coords, target_coords)
        if torch_in:
            return out
        with torch.no_grad():
            return out.detach().double().numpy()

    return network


def train_diffusion(
    dataset_dir: str | Path,
    autoencoder_ckpt: str | Path,
    out_dir: str | Path,
    model_config: DenoiserConfig,
    sampler: diffusion.SamplerConfig,
    optimizer: OptimizerConfig,
    steps: int,
    batch_size: int = 4,
    condition_length: int = 1,
    output_length: int = 4,
    step_hours: int = 6,
    seed: int = 0,
    ema: EmaConfig = EmaConfig(),
) -> Path:
    """Train the latent denoiser on encoded sequences; writes the bundle."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(dataset_dir)
    for a, b in zip(dataset.snapshots, dataset.snapshots[1:]):
        if b.timestamp - a.timestamp != timedelta(hours=step_hours):
            raise ValidationError("dataset snapshots must be contiguous in time")
    ae_model = load_autoencoder(autoencoder_ckpt)
    raw_latents = _encode_dataset(ae_model, dataset)
    latent_stats = ae.latent_stats_fit(raw_latents)
    latents = np.stack([ae.latent_normalize(z, latent_stats) for z in raw_latents])
    factor = dataset.grid.n_lat // latents.shape[2]
    if latents.shape[2] * factor != dataset.grid.n_lat:
        raise ValidationError("latent rows do not divide the physical grid")

    n_samples = latents.shape[0] - condition_length - output_length + 1
    if n_samples < 1:
        raise ValidationError("dataset too short for the requested sequence lengths")
    lat_centers_w = latitude_weights_for_latents(dataset.grid, factor)
    cond_coords, target_coords = frame_token_coords(
        condition_length, output_length, dataset.grid, factor
    )
    torch.manual_seed(seed)
    model = Denoiser(model_config)
    network = _network_adapter(model, cond_coords, target_coords)
    opt = torch.optim.AdamW(
        model.parameters(), lr=optimizer.lr, betas=optimizer.betas,
        eps=optimizer.eps, weight_decay=optimizer.weight_decay,
    )
    ema_state = ema.state_for(model)
    rows = []
    ell, h = condition_length, output_length
    for step in range(steps):
        rng = diffusion.step_rng(seed, step)
        sigma = diffusion.sample_sigma(rng)
        lr = lr_at(step, steps, optimizer)
        for group in opt.param_groups:
            group["lr"] = lr
        idx = rng.choice(n_samples, size=min(batch_size, n_samples), replace=False)
        batch = []
        for i in np.sort(idx):
            z_cond = latents[i : i + ell]
            z_tgt = latents[i + ell : i + ell + h]
            phase = YearClock(dataset.snapshots[i + ell].timestamp).phase
            batch.append((z_tgt, (z_cond, phase)))
        opt.zero_grad()
        loss = diffusion.training_loss(
            network, batch, sigma, lat_centers_w,
            sigma_data=sampler.sigma_data, rng=rng,
            weight_variant=sampler.loss_weight_variant,
        )
        loss.backward()
        opt.step()
        ema_state.step = step + 1
        diffusion.ema_update(ema_state, dict(model.state_dict()))
        rows.append((step, lr, float(loss.detach())))

    cfg_dict = model_config.to_dict()
    _save_module(out_dir / "denoiser" / "final", model, cfg_dict)
    ema_model = Denoiser(model_config)
    ema_state.copy_to(ema_model)
    _save_module(out_dir / "denoiser" / "ema", ema_model, cfg_dict)
    tensorio.write_channel_stats(out_dir / "latent_stats.csv", latent_stats)
    tensorio.write_channel_stats(out_dir / "physical_stats.csv", dataset.stats)
    sampler.write_json(out_dir / "sampler.json")
    bundle = {
        "autoencoder_ckpt": str(Path(autoencoder_ckpt).resolve()),
        "denoiser_final": "denoiser/final",
        "denoiser_ema": "denoiser/ema",
        "latent_stats": "latent_stats.csv",
        "physical_stats": "physical_stats.csv",
        "sampler": "sampler.json",
        "grid": tensorio.grid_to_dict(dataset.grid),
        "catalog": dataset.catalog.to_dict(),
        "factor": int(factor),
        "condition_length": condition_length,
        "output_length": output_length,
        "step_hours": step_hours,
    }
    (out_dir / "bundle.json").write_text(json.dumps(bundle, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_loss_csv(out_dir / "diffusion_loss.csv", rows)
    from . import reports

    reports.loss_figure(out_dir / "diffusion_loss.csv", out_dir / "figures" / "diffusion_loss.png")
    return out_dir


def latitude_weights_for_latents(grid: GridSpec, factor: int) -> np.ndarray:
    """Latitude weights on latent rows, from the coarse cells' center latitudes."""
    lat_deg, _ = grid.block_centers(factor)
    cos = np.cos(np.deg2rad(lat_deg))
    cos[np.isclose(np.abs(lat_deg), 90.0)] = 0.0
    return cos / cos.mean()


# ---------------------------------------------------------------------------
# Model bundle and rollout.


@dataclass
class ModelBundle:
    autoencoder: ae.Autoencoder
    denoiser: Denoiser | torch.nn.Module
    latent_stats: ChannelStats
    physical_stats: ChannelStats
    sampler: diffusion.SamplerConfig
    grid: GridSpec
    catalog: VariableCatalog
    factor: int
    condition_length: int = 1
    output_length: int = 4
    step_hours: int = 6

    @classmethod
    def load(cls, bundle_json: str | Path, use_ema: bool = True) -> "ModelBundle":
        bundle_json = Path(bundle_json)
        spec = json.loads(bundle_json.read_text(encoding="utf-8"))
        root = bundle_json.parent
        den_dir = root / (spec["denoiser_ema"] if use_ema else spec["denoiser_final"])
        tensors, cfg = tensorio.read_checkpoint(den_dir)
        den = Denoiser(DenoiserConfig.from_dict(cfg))
        _load_state(den, tensors)
        den.eval()
        return cls(
            autoencoder=load_autoencoder(spec["autoencoder_ckpt"]),
            denoiser=den,
            latent_stats=tensorio.read_channel_stats(root / spec["latent_stats"]),
            physical_stats=tensorio.read_channel_stats(root / spec["physical_stats"]),
            sampler=diffusion.SamplerConfig.read_json(root / spec["sampler"]),
            grid=tensorio.grid_from_dict(spec["grid"]),
            catalog=VariableCatalog.from_dict(spec["catalog"]),
            factor=int(spec["factor"]),
            condition_length=int(spec["condition_length"]),
            output_length=int(spec["output_length"]),
            step_hours=int(spec["step_hours"]),
        )


@dataclass(frozen=True)
class RolloutConfig:
    condition_length: int = 1
    output_length: int = 4
    step_hours: int = 6
    n_rollouts: int = 15
    members: int = 1
    member_seed_base: int = 0
    perturb_initial: float = 0.0  # latent-space prior perturbation; off by default

    def __post_init__(self):
        if min(self.condition_length, self.output_length, self.n_rollouts, self.members) < 1:
            raise ValidationError("rollout lengths and member count must be positive")
        if self.step_hours <= 0:
            raise ValidationError("step_hours must be positive")
        if self.perturb_initial < 0:
            raise ValidationError("perturb_initial must be nonnegative")

    @property
    def horizon_hours(self) -> int:
        return self.n_rollouts * self.output_length * self.step_hours

    @classmethod
    def from_dict(cls, d: dict) -> "RolloutConfig":
        return cls(**d)


def rollout(
    bundle: ModelBundle,
    initial_snapshots: list[Snapshot],
    cfg: RolloutConfig,
    out_dir: str | Path | None = None,
) -> EnsembleForecast:
    """Autoregressive ensemble rollout from the trailing conditioning window.

    Per member m the noise prior is seeded by ``member_seed_base + m``; each
    rollout block samples ``output_length`` latent frames conditioned on the
    trailing ``condition_length`` frames and the year phase of the block's
    first target frame, then the window slides forward. All frames are
    decoded back to physical units.
    """
    ell, h = cfg.condition_length, cfg.output_length
    if len(initial_snapshots) != ell:
        raise ValidationError(f"need exactly {ell} initial snapshots, got {len(initial_snapshots)}")
    if ell != bundle.condition_length or h != bundle.output_length:
        raise ValidationError("rollout lengths do not match the trained bundle")
    snaps = sorted(initial_snapshots, key=lambda s: s.timestamp)
    for a, b in zip(snaps, snaps[1:]):
        if b.timestamp - a.timestamp != timedelta(hours=cfg.step_hours):
            raise ValidationError("initial snapshots must be step_hours apart")
    init_time = snaps[-1].timestamp
    schedule = bundle.sampler.schedule()
    cond_coords, target_coords = frame_token_coords(ell, h, bundle.grid, bundle.factor)
    network = _network_adapter(bundle.denoiser, cond_coords, target_coords)
    sigma_data = bundle.sampler.sigma_data

    def denoiser_fn(z, z_cond, sigma):
        return diffusion.denoise(network, z, z_cond, sigma, sigma_data)

    init_latents = [
        ae.latent_normalize(ae.encode(s, bundle.autoencoder).data, bundle.latent_stats)
        for s in snaps
    ]
    lat_shape = init_latents[0].shape

    members_fields = []
    member_seeds = []
    member_latents = []
    failures = []
    for m in range(cfg.members):
        seed = cfg.member_seed_base + m
        streams = np.random.SeedSequence(seed).spawn(cfg.n_rollouts + 1)
        window = [z.copy() for z in init_latents]
        if cfg.perturb_initial > 0:
            prng = np.random.Generator(np.random.Philox(streams[-1]))
            window = [
                z + cfg.perturb_initial * prng.standard_normal(z.shape).astype(np.float32)
                for z in window
            ]
        frames: list[np.ndarray] = []
        t_cursor = init_time
        try:
            for r in range(cfg.n_rollouts):
                phase = YearClock(t_cursor + timedelta(hours=cfg.step_hours)).phase
                z_cond = np.stack(window[-ell:]).astype(np.float64)
                rng = np.random.Generator(np.random.Philox(streams[r]))
                block = diffusion.heun_sample(
                    denoiser_fn, (z_cond, phase), (h,) + lat_shape, schedule, rng
                )
                for k in range(h):
                    window.append(block[k].astype(np.float32))
                    frames.append(block[k])
                window = window[-ell:]
                t_cursor += timedelta(hours=h * cfg.step_hours)
        except NumericalError as exc:
            failures.append(f"member {m}: {exc}")
            continue
        member_latents.append(np.stack(frames))
        decoded = []
        for k, frame in enumerate(frames):
            latent = ae.LatentState(
                ae.latent_denormalize(frame, bundle.latent_stats),
                bundle.grid,
                timestamp=init_time + timedelta(hours=(k + 1) * cfg.step_hours),
            )
            snap = ae.decode(latent, bundle.autoencoder, bundle.catalog)
            decoded.append(denormalize(snap, bundle.physical_stats).data)
        members_fields.append(np.stack(decoded))
        member_seeds.append(seed)

    if not members_fields:
        raise NumericalError("all ensemble members failed: " + "; ".join(failures))
    lead_hours = tuple(
        (k + 1) * cfg.step_hours for k in range(cfg.n_rollouts * cfg.output_length)
    )
    forecast = EnsembleForecast(
        init_time=init_time,
        lead_hours=lead_hours,
        fields=np.stack(members_fields),
        grid=bundle.grid,
        catalog=bundle.catalog,
        member_seeds=tuple(member_seeds),
        step_hours=cfg.step_hours,
    )
    forecast.latent_members = np.stack(member_latents)  # type: ignore[attr-defined]
    forecast.failures = failures  # type: ignore[attr-defined]
    if out_dir is not None:
        write_forecast(out_dir, forecast)
    return forecast


def write_forecast(out_dir: str | Path, forecast: EnsembleForecast) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stamp = forecast.init_time.strftime("%Y%m%dT%H")
    paths = []
    for i, seed in enumerate(forecast.member_seeds):
        path = out_dir / f"forecast_{stamp}_m{i:03d}.ldct"
        tensorio.write_tensor(path, forecast.fields[i])
        tensorio.write_sidecar(
            path,
            {
                "kind": "forecast",
                "init_time": forecast.init_time.isoformat(),
                "lead_hours": list(forecast.lead_hours),
                "member_index": i,
                "member_seed": seed,
                "step_hours": forecast.step_hours,
                "grid": tensorio.grid_to_dict(forecast.grid),
                "channels": forecast.catalog.channel_names(),
                "catalog": forecast.catalog.to_dict(),
            },
        )
        paths.append(path)
    return paths


def read_forecasts(directory: str | Path) -> list[EnsembleForecast]:
    """Group per-member forecast files in a directory by init time."""
    directory = Path(directory)
    groups: dict[str, list[tuple[dict, np.ndarray]]] = {}
    for path in sorted(directory.glob("forecast_*" + tensorio.TENSOR_SUFFIX)):
        meta = tensorio.read_sidecar(path)
        if meta.get("kind") != "forecast":
            continue
        groups.setdefault(meta["init_time"], []).append((meta, tensorio.read_tensor(path)))
    if not groups:
        raise ValidationError(f"no forecast files in {directory}")
    forecasts = []
    for init_time in sorted(groups):
        entries = sorted(groups[init_time], key=lambda e: e[0]["member_index"])
        meta = entries[0][0]
        forecasts.append(
            EnsembleForecast(
                init_time=datetime.fromisoformat(init_time),
                lead_hours=tuple(meta["lead_hours"]),
                fields=np.stack([e[1] for e in entries]),
                grid=tensorio.grid_from_dict(meta["grid"]),
                catalog=VariableCatalog.from_dict(meta["catalog"]),
                member_seeds=tuple(e[0]["member_seed"] for e in entries),
                step_hours=meta.get("step_hours", 6),
            )
        )
    return forecasts


# ---------------------------------------------------------------------------
# Evaluation.


def evaluate(
    forecasts: list[EnsembleForecast],
    truth: list[Snapshot],
    out_dir: str | Path | None = None,
    variables: list[str] | None = None,
) -> ScoreReport:
    """Ensemble-mean weighted RMSE and fair CRPS per (variable, lead time).

    Scores are averaged over init times; the std column is the sample
    standard deviation across init times (blank for a single init).
    """
    if not forecasts:
        raise ValidationError("no forecasts to evaluate")
    catalog = forecasts[0].catalog
    grid = forecasts[0].grid
    names = catalog.channel_names()
    if variables is None:
        variables = [names[i] for i in catalog.dynamic_indices()]
    truth_by_time = {s.timestamp: s for s in truth}
    weights = latitude_weights(grid, allow_zero_weight_rows=True)
    values: dict[tuple[str, int, str], list[float]] = {}
    for fc in forecasts:
        if fc.grid != grid or fc.catalog != catalog:
            raise ValidationError("forecasts mix grids or catalogs")
        mean_snaps = ensemble_mean(fc)
        for li, valid in enumerate(fc.valid_times()):
            if valid not in truth_by_time:
                raise ValidationError(f"missing truth at {valid.isoformat()} (lead-time alignment)")
            truth_snap = truth_by_time[valid]
            lead = int(fc.lead_hours[li])
            for var in variables:
                ci = catalog.index_of(var)
                rmse = weighted_rmse(mean_snaps[li].data[ci], truth_snap.data[ci], weights)
                values.setdefault((var, lead, "rmse"), []).append(rmse)
                if fc.n_members >= 2:
                    crps = crps_field(
                        fc.fields[:, li, ci].astype(np.float64), truth_snap.data[ci], weights
                    )
                    values.setdefault((var, lead, "crps"), []).append(crps)
    report = ScoreReport()
    for (var, lead, metric), vals in values.items():
        report.add(var, lead, metric, vals)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.to_csv(out_dir / "report.csv")
        from . import reports

        reports.score_figures(report, out_dir / "figures")
    return report


# ---------------------------------------------------------------------------
# Track extraction.


def extract_tracks(
    forecast: EnsembleForecast,
    init_snapshot: Snapshot,
    init_position: tuple[float, float],
    cfg: TrackerConfig,
    out_dir: str | Path | None = None,
) -> tuple[dict[int, StormTrack], StormTrack]:
    """Per-member storm tracks plus the ensemble-mean track.

    The series seen by the tracker starts with the initial (analysis)
    snapshot at the forecast init time, then the member's decoded frames.
    """
    names = forecast.catalog.channel_names()
    if "msl" not in names:
        raise ValidationError("forecast catalog has no msl channel")
    if init_snapshot.timestamp != forecast.init_time:
        raise ValidationError("initial snapshot time does not match forecast init time")
    msl_idx = forecast.catalog.index_of("msl")
    times = [forecast.init_time] + forecast.valid_times()
    tracks: dict[int, StormTrack] = {}
    for m in range(forecast.n_members):
        fields = {
            "msl": np.concatenate(
                [init_snapshot.data[None, msl_idx], forecast.fields[m, :, msl_idx]]
            )
        }
        if cfg.use_z700_fallback:
            z_idx = forecast.catalog.index_of("z-700")
            fields["z700"] = np.concatenate(
                [init_snapshot.data[None, z_idx], forecast.fields[m, :, z_idx]]
            )
        if cfg.use_land_sea_gate:
            fields["lsm"] = init_snapshot.data[forecast.catalog.index_of("lsm")]
        tracks[m] = track_cyclone(times, fields, forecast.grid, init_position, forecast.init_time, cfg)
    mean = mean_track([tracks[m] for m in sorted(tracks)])
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for m, track in tracks.items():
            write_track_csv(out_dir / f"track_member_{m:03d}.csv", {m: track})
        write_track_csv(out_dir / "track_mean.csv", {-1: mean})
        from . import reports

        reports.track_figure(tracks, mean, out_dir / "figures" / "tracks.png")
    return tracks, mean
