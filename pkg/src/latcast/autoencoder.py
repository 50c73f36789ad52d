"""Pole-aware compression autoencoder mapping field snapshots to latents.

All convolutions pad longitude circularly; rows past a pole read the
mirrored row rolled by half the longitude count (180 degrees), matching how
a lat/lon grid continues across the poles. Encoder stages stack residual or
attention blocks with optional 2x downsampling; the decoder mirrors the
encoder stage-for-stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError
from .grid import ChannelStats, GridSpec, Snapshot, VariableCatalog


# ---------------------------------------------------------------------------
# Spherical padding and convolution.


@dataclass(frozen=True)
class SphericalKernel:
    weights: np.ndarray  # [out_ch, in_ch, K, K]
    bias: np.ndarray  # [out_ch]

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ValidationError("kernel weights must be [out, in, K, K]")
        if w.shape[2] % 2 == 0:
            raise ValidationError("kernel size K must be odd")


def spherical_pad(x: torch.Tensor, pad_h: int, pad_w: int) -> torch.Tensor:
    """Pad ``[..., H, W]``: circular in longitude, cross-pole in latitude.

    Row -k (above the top row) is row k-1 rolled by W/2 columns, and
    symmetrically past the bottom row. Requires even W whenever pad_h > 0.
    """
    h, w = x.shape[-2], x.shape[-1]
    if pad_h > h or pad_w > w:
        raise ValidationError("padding exceeds field size")
    if pad_h:
        if w % 2:
            raise ValidationError("cross-pole padding needs an even longitude count")
        top = x[..., 0:pad_h, :].flip(-2).roll(shifts=w // 2, dims=-1)
        bottom = x[..., h - pad_h : h, :].flip(-2).roll(shifts=w // 2, dims=-1)
        x = torch.cat([top, x, bottom], dim=-2)
    if pad_w:
        x = torch.cat([x[..., :, -pad_w:], x, x[..., :, :pad_w]], dim=-1)
    return x


def spherical_pad_conv(field, kernel: SphericalKernel, stride: int = 1):
    """Convolve a ``[C, H, W]`` field under the spherical padding rule.

    Accepts numpy or torch input and returns the same kind. Interior results
    are identical to a plain unpadded convolution.
    """
    is_numpy = not isinstance(field, torch.Tensor)
    x = torch.as_tensor(np.asarray(field), dtype=torch.float64) if is_numpy else field
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    weights = torch.as_tensor(np.asarray(kernel.weights), dtype=x.dtype)
    bias = torch.as_tensor(np.asarray(kernel.bias), dtype=x.dtype)
    k = weights.shape[-1]
    if k > x.shape[-2] or k > x.shape[-1]:
        raise ValidationError("kernel larger than field")
    out = F.conv2d(spherical_pad(x, k // 2, k // 2), weights, bias, stride=stride)
    if squeeze:
        out = out[0]
    return out.numpy() if is_numpy else out


class SphericalConv2d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3, stride: int = 1):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValidationError("kernel size must be odd")
        self.stride = stride
        self.pad = kernel_size // 2
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(spherical_pad(x, self.pad, self.pad))


# ---------------------------------------------------------------------------
# Blocks.


def _norm(ch: int) -> nn.Module:
    return nn.GroupNorm(math.gcd(ch, 8), ch)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = SphericalConv2d(in_ch, out_ch, kernel_size)
        self.norm2 = _norm(out_ch)
        self.conv2 = SphericalConv2d(out_ch, out_ch, kernel_size)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    """Pre-norm self-attention + feed-forward over the flattened spatial grid."""

    def __init__(self, ch: int):
        super().__init__()
        heads = max(1, ch // 64)
        while ch % heads:
            heads -= 1
        self.heads = heads
        self.norm1 = nn.LayerNorm(ch)
        self.qkv = nn.Linear(ch, 3 * ch)
        self.proj = nn.Linear(ch, ch)
        self.norm2 = nn.LayerNorm(ch)
        self.mlp = nn.Sequential(nn.Linear(ch, 4 * ch), nn.GELU(), nn.Linear(4 * ch, ch))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)  # [b, hw, c]
        y = self.norm1(tokens)
        q, k, v = self.qkv(y).view(b, h * w, 3, self.heads, c // self.heads).unbind(2)
        attn = F.scaled_dot_product_attention(q.transpose(1, 2), k.transpose(1, 2), v.transpose(1, 2))
        tokens = tokens + self.proj(attn.transpose(1, 2).reshape(b, h * w, c))
        tokens = tokens + self.mlp(self.norm2(tokens))
        return tokens.transpose(1, 2).view(b, c, h, w)


# ---------------------------------------------------------------------------
# Autoencoder.


@dataclass(frozen=True)
class StageConfig:
    kind: str  # "residual" | "attention"
    channels: int
    layers: int
    downsample: bool = True

    def __post_init__(self):
        if self.kind not in ("residual", "attention"):
            raise ValidationError(f"unknown stage kind {self.kind!r}")
        if self.channels < 1 or self.layers < 0:
            raise ValidationError("stage needs positive channels and nonnegative layers")


@dataclass(frozen=True)
class AutoencoderConfig:
    in_channels: int
    latent_channels: int
    stages: tuple[StageConfig, ...] = ()
    kernel_size: int = 3

    @property
    def spatial_factor(self) -> int:
        return 2 ** sum(1 for s in self.stages if s.downsample)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "latent_channels": self.latent_channels,
            "kernel_size": self.kernel_size,
            "stages": [
                {"kind": s.kind, "channels": s.channels, "layers": s.layers, "downsample": s.downsample}
                for s in self.stages
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AutoencoderConfig":
        return cls(
            in_channels=d["in_channels"],
            latent_channels=d["latent_channels"],
            kernel_size=d.get("kernel_size", 3),
            stages=tuple(StageConfig(**s) for s in d.get("stages", [])),
        )


def canonical_autoencoder_config(in_channels: int = 89, latent_channels: int = 84) -> AutoencoderConfig:
    """Four-stage preset: three 2x downsamples (factor 8) plus one
    resolution-preserving attention stage, latent projection to 84 channels."""
    return AutoencoderConfig(
        in_channels=in_channels,
        latent_channels=latent_channels,
        stages=(
            StageConfig("residual", 252, 4, downsample=True),
            StageConfig("residual", 504, 4, downsample=True),
            StageConfig("attention", 504, 4, downsample=True),
            StageConfig("attention", 1008, 4, downsample=False),
        ),
    )


def _make_blocks(kind: str, in_ch: int, out_ch: int, layers: int, k: int) -> list[nn.Module]:
    blocks: list[nn.Module] = []
    ch = in_ch
    for _ in range(layers):
        if kind == "residual":
            blocks.append(ResBlock(ch, out_ch, k))
        else:
            if ch != out_ch:
                blocks.append(nn.Conv2d(ch, out_ch, 1))
            blocks.append(AttentionBlock(out_ch))
        ch = out_ch
    if ch != out_ch:
        blocks.append(nn.Conv2d(ch, out_ch, 1))
    return blocks


class Encoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        k = cfg.kernel_size
        layers: list[nn.Module] = []
        ch = cfg.in_channels
        for stage in cfg.stages:
            layers.extend(_make_blocks(stage.kind, ch, stage.channels, stage.layers, k))
            ch = stage.channels
            if stage.downsample:
                layers.append(SphericalConv2d(ch, ch, k, stride=2))
        layers.append(SphericalConv2d(ch, cfg.latent_channels, k))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        k = cfg.kernel_size
        layers: list[nn.Module] = []
        ch = cfg.stages[-1].channels if cfg.stages else cfg.in_channels
        layers.append(SphericalConv2d(cfg.latent_channels, ch, k))
        for i, stage in enumerate(reversed(cfg.stages)):
            if stage.downsample:
                layers.append(nn.Upsample(scale_factor=2, mode="nearest"))
                layers.append(SphericalConv2d(ch, ch, k))
            nxt = cfg.stages[len(cfg.stages) - 2 - i].channels if i < len(cfg.stages) - 1 else stage.channels
            layers.extend(_make_blocks(stage.kind, ch, nxt, stage.layers, k))
            ch = nxt
        layers.append(SphericalConv2d(ch, cfg.in_channels, k))
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


class Autoencoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def encode_tensor(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.ndim == 3
        z = self.encoder(x[None] if squeeze else x)
        return z[0] if squeeze else z

    def decode_tensor(self, z: torch.Tensor) -> torch.Tensor:
        squeeze = z.ndim == 3
        x = self.decoder(z[None] if squeeze else z)
        return x[0] if squeeze else x


@dataclass
class LatentState:
    """Compressed representation of one snapshot."""

    data: np.ndarray  # [latent_channels, H', W']
    grid: GridSpec  # source physical grid
    stats: ChannelStats | None = None  # latent-channel stats, when normalized
    timestamp: datetime | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValidationError("latent data must be [channels, H', W']")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("latent contains non-finite values")


def encode(snapshot: Snapshot, model: Autoencoder) -> LatentState:
    """Snapshot -> LatentState; the snapshot must be preprocessed (NaN-free)."""
    if np.any(~np.isfinite(snapshot.data)):
        raise ValidationError("snapshot must be preprocessed before encoding")
    if snapshot.data.shape[0] != model.cfg.in_channels:
        raise ValidationError(
            f"snapshot has {snapshot.data.shape[0]} channels, model expects {model.cfg.in_channels}"
        )
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        z = model.encode_tensor(torch.as_tensor(snapshot.data, dtype=dtype))
    return LatentState(z.numpy(), snapshot.grid, timestamp=snapshot.timestamp)


def decode(latent: LatentState, model: Autoencoder, catalog: VariableCatalog) -> Snapshot:
    """LatentState -> Snapshot in normalized units (invert channel stats separately)."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        x = model.decode_tensor(torch.as_tensor(latent.data, dtype=dtype))
    data = x.numpy()
    if not np.all(np.isfinite(data)):
        raise ValidationError("decoded snapshot contains non-finite values")
    ts = latent.timestamp if latent.timestamp is not None else datetime(1979, 1, 1)
    return Snapshot(latent.grid, ts, data, catalog)


# ---------------------------------------------------------------------------
# Objective and first-layer static-channel identity.


def relative_l2_loss(x, x_hat):
    """||x - x_hat||_2 / ||x||_2 over the whole tensor; scale-invariant."""
    if isinstance(x, torch.Tensor) or isinstance(x_hat, torch.Tensor):
        x = torch.as_tensor(x)
        x_hat = torch.as_tensor(x_hat, dtype=x.dtype)
        ref = torch.linalg.vector_norm(x)
        if float(ref) == 0.0:
            raise ValidationError("relative L2 needs a nonzero reference")
        return torch.linalg.vector_norm(x - x_hat) / ref
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    ref = np.linalg.norm(x)
    if ref == 0.0:
        raise ValidationError("relative L2 needs a nonzero reference")
    return float(np.linalg.norm(x - x_hat) / ref)


def static_embedding_equivalence_check(
    kernel: SphericalKernel,
    static_idx: list[int],
    dynamic_idx: list[int],
    x_static: np.ndarray,
    x_var_series: Iterable[np.ndarray],
    tol: float = 1e-5,
    embedding: np.ndarray | None = None,
) -> bool:
    """First-layer identity: conv(W, [x_s; x_v^t]) == conv(W_v, x_v^t) + E.

    E = conv(W_s, x_s) + b is computed once; the check holds for every time
    step by linearity of convolution. Index lists split the kernel's input
    channels into static and dynamic parts. Passing ``embedding`` overrides
    the computed E (negative-control hook).
    """
    w = np.asarray(kernel.weights)
    if sorted(static_idx + dynamic_idx) != list(range(w.shape[1])):
        raise ValidationError("static/dynamic indices must partition the kernel input channels")
    w_s = SphericalKernel(w[:, static_idx], np.asarray(kernel.bias))
    w_v = SphericalKernel(w[:, dynamic_idx], np.zeros_like(np.asarray(kernel.bias)))
    if embedding is None:
        embedding = spherical_pad_conv(x_static, w_s)  # includes the bias; time-independent
    for x_var in x_var_series:
        x_var = np.asarray(x_var)
        stacked = np.empty((w.shape[1],) + x_static.shape[1:], dtype=np.float64)
        stacked[static_idx] = x_static
        stacked[dynamic_idx] = x_var
        lhs = spherical_pad_conv(stacked, kernel)
        rhs = spherical_pad_conv(np.asarray(x_var), w_v) + embedding
        scale = max(np.abs(lhs).max(), 1.0)
        if np.abs(lhs - rhs).max() > tol * scale:
            return False
    return True


# ---------------------------------------------------------------------------
# Latent-channel statistics.


def latent_channel_names(n_channels: int) -> tuple[str, ...]:
    return tuple(f"latent-{i:03d}" for i in range(n_channels))


def latent_stats_fit(latents: np.ndarray) -> ChannelStats:
    """Per-channel mean/std over latent samples ``[n, C', H', W']``."""
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 4 or latents.shape[0] < 2:
        raise ValidationError("need at least 2 latent samples of shape [n, C', H', W']")
    mean = latents.mean(axis=(0, 2, 3))
    std = latents.std(axis=(0, 2, 3))
    if np.any(std <= 0):
        bad = [i for i, s in enumerate(std) if s <= 0]
        raise ValidationError(f"zero variance in latent channels {bad}")
    return ChannelStats(latent_channel_names(latents.shape[1]), mean, std)


def latent_normalize(latent: np.ndarray, stats: ChannelStats) -> np.ndarray:
    latent = np.asarray(latent, dtype=np.float64)
    return ((latent - stats.mean[:, None, None]) / stats.std[:, None, None]).astype(np.float32)


def latent_denormalize(latent: np.ndarray, stats: ChannelStats) -> np.ndarray:
    latent = np.asarray(latent, dtype=np.float64)
    return (latent * stats.std[:, None, None] + stats.mean[:, None, None]).astype(np.float32)
