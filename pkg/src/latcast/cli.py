"""Command-line entry points.

Every subcommand takes a single JSON config path plus ``--seed`` and
``--out-dir``; artifacts land under the output directory together with a
RunManifest JSON. Exit codes: 0 success, 2 validation error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import autoencoder as ae
from . import diffusion, pipeline, tensorio
from .denoiser import DenoiserConfig
from .errors import NumericalError, ValidationError
from .tracker import TrackerConfig

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _load_config(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from None


def _manifest(args, command: str, config: dict, t0: float, inputs: list[str | Path] = ()) -> None:
    manifest = pipeline.RunManifest(
        command=command,
        seed=args.seed,
        config=config,
        out_dir=str(args.out_dir),
    )
    for p in inputs:
        p = Path(p)
        if p.is_file():
            manifest.input_digests[str(p)] = tensorio.file_digest(p)
    manifest.timings["wall_seconds"] = round(time.time() - t0, 3)
    manifest.write(Path(args.out_dir) / f"manifest_{command.replace('-', '_')}.json")


def cmd_preprocess(args) -> None:
    cfg = _load_config(args.config)
    t0 = time.time()
    stats = cfg.get("stats_csv")
    pipeline.preprocess_dataset(cfg["input_dir"], args.out_dir, stats)
    _manifest(args, "preprocess", cfg, t0, [stats] if stats else [])


def cmd_train_ae(args) -> None:
    cfg = _load_config(args.config)
    t0 = time.time()
    pipeline.train_autoencoder(
        dataset_dir=cfg["dataset_dir"],
        out_dir=args.out_dir,
        model_config=ae.AutoencoderConfig.from_dict(cfg["model"]),
        optimizer=pipeline.OptimizerConfig.from_dict(cfg.get("optimizer", {})),
        steps=int(cfg["steps"]),
        batch_size=int(cfg.get("batch_size", 4)),
        seed=args.seed,
        ema=pipeline.EmaConfig(**cfg.get("ema", {})),
        augment=bool(cfg.get("augment", True)),
    )
    _manifest(args, "train-ae", cfg, t0)


def cmd_train_diffusion(args) -> None:
    cfg = _load_config(args.config)
    t0 = time.time()
    pipeline.train_diffusion(
        dataset_dir=cfg["dataset_dir"],
        autoencoder_ckpt=cfg["autoencoder_ckpt"],
        out_dir=args.out_dir,
        model_config=DenoiserConfig.from_dict(cfg["model"]),
        sampler=diffusion.SamplerConfig.from_dict(cfg.get("sampler", {})),
        optimizer=pipeline.OptimizerConfig.from_dict(cfg.get("optimizer", {})),
        steps=int(cfg["steps"]),
        batch_size=int(cfg.get("batch_size", 4)),
        condition_length=int(cfg.get("condition_length", 1)),
        output_length=int(cfg.get("output_length", 4)),
        step_hours=int(cfg.get("step_hours", 6)),
        seed=args.seed,
        ema=pipeline.EmaConfig(**cfg.get("ema", {})),
    )
    _manifest(args, "train-diffusion", cfg, t0)


def cmd_rollout(args) -> None:
    cfg = _load_config(args.config)
    t0 = time.time()
    bundle = pipeline.ModelBundle.load(cfg["bundle"], use_ema=bool(cfg.get("use_ema", True)))
    initial = [tensorio.read_snapshot(p) for p in cfg["initial_files"]]
    rollout_cfg = pipeline.RolloutConfig.from_dict(
        {
            "condition_length": bundle.condition_length,
            "output_length": bundle.output_length,
            "step_hours": bundle.step_hours,
            **cfg.get("rollout", {}),
            "member_seed_base": cfg.get("rollout", {}).get("member_seed_base", args.seed),
        }
    )
    forecast = pipeline.rollout(bundle, initial, rollout_cfg, out_dir=args.out_dir)
    if forecast.failures:
        print("warning: " + "; ".join(forecast.failures), file=sys.stderr)
    _manifest(args, "rollout", cfg, t0, cfg["initial_files"])


def cmd_evaluate(args) -> None:
    cfg = _load_config(args.config)
    t0 = time.time()
    forecasts = pipeline.read_forecasts(cfg["forecast_dir"])
    truth_dir = Path(cfg["truth_dir"])
    truth_paths = sorted(truth_dir.glob("*" + tensorio.TENSOR_SUFFIX))
    if not truth_paths:
        raise ValidationError(f"no truth snapshots in {truth_dir}")
    truth = [tensorio.read_snapshot(p) for p in truth_paths]
    if cfg.get("stats_csv"):
        from .grid import denormalize

        stats = tensorio.read_channel_stats(cfg["stats_csv"])
        truth = [denormalize(s, stats) for s in truth]
    pipeline.evaluate(forecasts, truth, out_dir=args.out_dir, variables=cfg.get("variables"))
    _manifest(args, "evaluate", cfg, t0)


def cmd_track(args) -> None:
    cfg = _load_config(args.config)
    t0 = time.time()
    forecasts = pipeline.read_forecasts(cfg["forecast_dir"])
    init_snapshot = tensorio.read_snapshot(cfg["initial_file"])
    if cfg.get("stats_csv"):
        from .grid import denormalize

        stats = tensorio.read_channel_stats(cfg["stats_csv"])
        init_snapshot = denormalize(init_snapshot, stats)
    tracker_cfg = TrackerConfig(
        **{**cfg.get("tracker", {}), "search_box_degrees": tuple(cfg.get("tracker", {}).get("search_box_degrees", (7, 4, 1)))}
    )
    lat, lon = cfg["initial_position"]
    for fc in forecasts:
        sub = Path(args.out_dir) / fc.init_time.strftime("tracks_%Y%m%dT%H")
        pipeline.extract_tracks(fc, init_snapshot, (float(lat), float(lon)), tracker_cfg, out_dir=sub)
    _manifest(args, "track", cfg, t0, [cfg["initial_file"]])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latcast",
        description="Latent-diffusion ensemble forecasting toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "preprocess": (cmd_preprocess, "Crop, normalize, and NaN-fill raw snapshots"),
        "train-ae": (cmd_train_ae, "Train the compression autoencoder"),
        "train-diffusion": (cmd_train_diffusion, "Train the latent diffusion denoiser"),
        "rollout": (cmd_rollout, "Generate an autoregressive ensemble forecast"),
        "evaluate": (cmd_evaluate, "Score forecasts against truth (RMSE / CRPS)"),
        "track": (cmd_track, "Extract storm-center tracks from forecasts"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="JSON config path")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", required=True)
        p.set_defaults(fn=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    pipeline.configure_threads()
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    try:
        args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
