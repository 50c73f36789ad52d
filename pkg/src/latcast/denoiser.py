"""Conditional denoising transformer over patchified latent frames.

Latent frames are patchified per position (patch size 1) into tokens that
carry (frame index, latitude, longitude) coordinates. Conditioning tokens
pass through preprocessing blocks, then dual-stream blocks attend jointly
over conditioning and target tokens with per-stream parameters, and the
merged sequence runs through single-stream blocks. Noise level and
elapsed-year phase enter through adaptive layer-norm modulation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .embeddings import (
    GeoRopeConfig,
    lat_to_rope,
    lon_to_rope,
    rope_phase_table,
    sinusoidal_embedding,
    year_embedding,
)
from .errors import NumericalError, ValidationError
from .grid import GridSpec


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int
    model_dim: int = 2048
    ffn_dim: int = 8192
    n_heads: int = 16
    head_dim: int = 128
    preprocess_layers: int = 3
    dual_stream_layers: int = 5
    single_stream_layers: int = 10
    rope_axes: tuple[int, int, int] = (16, 56, 56)
    rope_base: float = 256.0
    noise_embed_dim: int = 256
    year_embed_dim: int = 64
    patch_size: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.n_heads * self.head_dim != self.model_dim:
            raise ValidationError("n_heads * head_dim must equal model_dim")
        if self.patch_size != (1, 1):
            raise ValidationError("patch size is fixed at (1, 1)")
        if self.noise_embed_dim % 2 or self.year_embed_dim % 2:
            raise ValidationError("embedding dims must be even")
        GeoRopeConfig(self.head_dim, self.rope_axes, self.rope_base)  # validates the split

    @property
    def rope(self) -> GeoRopeConfig:
        return GeoRopeConfig(self.head_dim, self.rope_axes, self.rope_base)

    def to_dict(self) -> dict:
        return {
            "latent_channels": self.latent_channels,
            "model_dim": self.model_dim,
            "ffn_dim": self.ffn_dim,
            "n_heads": self.n_heads,
            "head_dim": self.head_dim,
            "preprocess_layers": self.preprocess_layers,
            "dual_stream_layers": self.dual_stream_layers,
            "single_stream_layers": self.single_stream_layers,
            "rope_axes": list(self.rope_axes),
            "rope_base": self.rope_base,
            "noise_embed_dim": self.noise_embed_dim,
            "year_embed_dim": self.year_embed_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["rope_axes"] = tuple(d.get("rope_axes", (16, 56, 56)))
        d.setdefault("patch_size", (1, 1))
        d["patch_size"] = tuple(d["patch_size"])
        return cls(**d)


def parameter_count(cfg: DenoiserConfig) -> int:
    """Exact parameter count of ``Denoiser(cfg)`` from the config alone."""
    d, f, c = cfg.model_dim, cfg.ffn_dim, cfg.latent_channels
    block = 10 * d * d + 2 * d * f + 11 * d + f  # adaLN + qkv + proj + mlp
    n_blocks = cfg.preprocess_layers + cfg.single_stream_layers + 2 * cfg.dual_stream_layers
    patchify = c * d + d
    cond = (cfg.noise_embed_dim * d + d + d * d + d) + (cfg.year_embed_dim * d + d + d * d + d)
    final = (2 * d * d + 2 * d) + (d * c + c)
    return patchify + cond + n_blocks * block + final


def canonical_config_large(latent_channels: int = 84) -> DenoiserConfig:
    return DenoiserConfig(latent_channels=latent_channels)


def canonical_config_small(latent_channels: int = 84) -> DenoiserConfig:
    return DenoiserConfig(
        latent_channels=latent_channels,
        model_dim=1536,
        ffn_dim=6144,
        n_heads=12,
        head_dim=128,
        preprocess_layers=1,
        dual_stream_layers=2,
        single_stream_layers=4,
    )


# ---------------------------------------------------------------------------
# Tokens and coordinates.


@dataclass
class TokenCoords:
    """Per-token positional coordinates, frame-major then row-major."""

    t_index: np.ndarray
    p_lat: np.ndarray
    p_lon: np.ndarray

    def __len__(self) -> int:
        return self.t_index.shape[0]

    def shifted(self, dt: float = 0.0, dlat: float = 0.0, dlon: float = 0.0) -> "TokenCoords":
        return TokenCoords(self.t_index + dt, self.p_lat + dlat, self.p_lon + dlon)

    @staticmethod
    def concat(a: "TokenCoords", b: "TokenCoords") -> "TokenCoords":
        return TokenCoords(
            np.concatenate([a.t_index, b.t_index]),
            np.concatenate([a.p_lat, b.p_lat]),
            np.concatenate([a.p_lon, b.p_lon]),
        )


@dataclass
class TokenBlock:
    tokens: torch.Tensor  # [n_tokens, model_dim]
    coords: TokenCoords
    stream: str  # "conditioning" | "target"

    def __post_init__(self):
        if self.tokens.shape[0] != len(self.coords):
            raise ValidationError("token count does not match coordinate count")


def latent_token_coords(grid: GridSpec, factor: int, t_indices: list[int]) -> TokenCoords:
    """Coordinates for latent-grid tokens: cell-center angles per frame."""
    lat_deg, lon_deg = grid.block_centers(factor)
    lat = lat_to_rope(lat_deg)
    lon = lon_to_rope(lon_deg)
    hh, ww = lat.shape[0], lon.shape[0]
    lat_grid = np.repeat(lat, ww)
    lon_grid = np.tile(lon, hh)
    n = hh * ww
    return TokenCoords(
        np.concatenate([np.full(n, float(t)) for t in t_indices]),
        np.tile(lat_grid, len(t_indices)),
        np.tile(lon_grid, len(t_indices)),
    )


def frame_token_coords(cond_len: int, horizon: int, grid: GridSpec, factor: int) -> tuple[TokenCoords, TokenCoords]:
    """Conditioning frames take indices -cond_len..-1, targets 0..horizon-1."""
    cond = latent_token_coords(grid, factor, list(range(-cond_len, 0)))
    target = latent_token_coords(grid, factor, list(range(horizon)))
    return cond, target


def patchify(latent_seq: torch.Tensor, proj: nn.Linear, coords: TokenCoords, stream: str) -> TokenBlock:
    """Per-position linear projection of ``[T, C, H, W]`` to tokens."""
    if latent_seq.ndim != 4:
        raise ValidationError("latent sequence must be [T, C, H, W]")
    t, c, h, w = latent_seq.shape
    if c != proj.in_features:
        raise ValidationError(f"latent has {c} channels, projection expects {proj.in_features}")
    if t * h * w != len(coords):
        raise ValidationError("coordinate count does not match T*H*W tokens")
    tokens = proj(latent_seq.permute(0, 2, 3, 1).reshape(t * h * w, c))
    return TokenBlock(tokens, coords, stream)


def _phase_tables(coords: TokenCoords, rope: GeoRopeConfig, dtype, device):
    phases = rope_phase_table(coords.t_index, coords.p_lat, coords.p_lon, rope)
    cos = torch.as_tensor(np.cos(phases), dtype=dtype, device=device)
    sin = torch.as_tensor(np.sin(phases), dtype=dtype, device=device)
    return cos, sin


def _rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: [n, heads, head_dim]; cos/sin: [n, head_dim/2]
    even, odd = x[..., 0::2], x[..., 1::2]
    c, s = cos[:, None, :], sin[:, None, :]
    return torch.stack([even * c - odd * s, even * s + odd * c], dim=-1).flatten(-2)


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale) + shift


def _joint_attention(parts: list[tuple], n_heads: int) -> list[torch.Tensor]:
    """Attend over the concatenation of (q, k, v) token groups; returns the
    attention output split back per group."""
    q = torch.cat([p[0] for p in parts], dim=0)
    k = torch.cat([p[1] for p in parts], dim=0)
    v = torch.cat([p[2] for p in parts], dim=0)
    out = F.scaled_dot_product_attention(
        q.transpose(0, 1), k.transpose(0, 1), v.transpose(0, 1)
    ).transpose(0, 1)
    sizes = [p[0].shape[0] for p in parts]
    return list(out.flatten(1).split(sizes, dim=0))


class _StreamParams(nn.Module):
    """One stream's share of a transformer block: adaLN, attention projections,
    and feed-forward."""

    def __init__(self, dim: int, ffn_dim: int):
        super().__init__()
        self.adaln = nn.Linear(dim, 6 * dim)
        nn.init.zeros_(self.adaln.weight)
        nn.init.zeros_(self.adaln.bias)
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = nn.Sequential(nn.Linear(dim, ffn_dim), nn.GELU(approximate="tanh"), nn.Linear(ffn_dim, dim))

    def mods(self, cond_vec: torch.Tensor) -> tuple:
        return tuple(self.adaln(F.silu(cond_vec)).chunk(6))

    def qkv_heads(self, x: torch.Tensor, n_heads: int, cos, sin):
        n, d = x.shape
        q, k, v = self.qkv(x).view(n, 3, n_heads, d // n_heads).unbind(1)
        return _rotate(q, cos, sin), _rotate(k, cos, sin), v


class DiTBlock(nn.Module):
    """Single-stream adaptive layer-norm transformer block with rotary attention."""

    def __init__(self, dim: int, ffn_dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.p = _StreamParams(dim, ffn_dim)

    def forward(self, x: torch.Tensor, cond_vec: torch.Tensor, cos, sin) -> torch.Tensor:
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = self.p.mods(cond_vec)
        q, k, v = self.p.qkv_heads(_modulate(self.p.norm1(x), shift_a, scale_a), self.n_heads, cos, sin)
        (attn,) = _joint_attention([(q, k, v)], self.n_heads)
        x = x + gate_a * self.p.proj(attn)
        x = x + gate_m * self.p.mlp(_modulate(self.p.norm2(x), shift_m, scale_m))
        return x


class DualStreamBlock(nn.Module):
    """Two parameter branches (conditioning, target) attending jointly."""

    def __init__(self, dim: int, ffn_dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.cond = _StreamParams(dim, ffn_dim)
        self.target = _StreamParams(dim, ffn_dim)

    def forward(self, x_c, x_t, cond_vec, cos_c, sin_c, cos_t, sin_t):
        mc = self.cond.mods(cond_vec)
        mt = self.target.mods(cond_vec)
        qkv_c = self.cond.qkv_heads(_modulate(self.cond.norm1(x_c), mc[0], mc[1]), self.n_heads, cos_c, sin_c)
        qkv_t = self.target.qkv_heads(_modulate(self.target.norm1(x_t), mt[0], mt[1]), self.n_heads, cos_t, sin_t)
        out_c, out_t = _joint_attention([qkv_c, qkv_t], self.n_heads)
        x_c = x_c + mc[2] * self.cond.proj(out_c)
        x_t = x_t + mt[2] * self.target.proj(out_t)
        x_c = x_c + mc[5] * self.cond.mlp(_modulate(self.cond.norm2(x_c), mc[3], mc[4]))
        x_t = x_t + mt[5] * self.target.mlp(_modulate(self.target.norm2(x_t), mt[3], mt[4]))
        return x_c, x_t


class FinalLayer(nn.Module):
    def __init__(self, dim: int, out_channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False)
        self.adaln = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, out_channels)
        nn.init.zeros_(self.adaln.weight)
        nn.init.zeros_(self.adaln.bias)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, cond_vec: torch.Tensor) -> torch.Tensor:
        shift, scale = self.adaln(F.silu(cond_vec)).chunk(2)
        return self.out(_modulate(self.norm(x), shift, scale))


class Denoiser(nn.Module):
    """F(z_scaled; z_cond, c_noise, year_phase) -> prediction per target frame."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.patch_proj = nn.Linear(cfg.latent_channels, d)
        self.noise_mlp = nn.Sequential(nn.Linear(cfg.noise_embed_dim, d), nn.SiLU(), nn.Linear(d, d))
        self.year_mlp = nn.Sequential(nn.Linear(cfg.year_embed_dim, d), nn.SiLU(), nn.Linear(d, d))
        self.preprocess = nn.ModuleList(
            DiTBlock(d, cfg.ffn_dim, cfg.n_heads) for _ in range(cfg.preprocess_layers)
        )
        self.dual = nn.ModuleList(
            DualStreamBlock(d, cfg.ffn_dim, cfg.n_heads) for _ in range(cfg.dual_stream_layers)
        )
        self.single = nn.ModuleList(
            DiTBlock(d, cfg.ffn_dim, cfg.n_heads) for _ in range(cfg.single_stream_layers)
        )
        self.final = FinalLayer(d, cfg.latent_channels)

    def conditioning_vector(self, c_noise: float, year_phase: float) -> torch.Tensor:
        dtype = next(self.parameters()).dtype
        noise_emb = torch.as_tensor(
            sinusoidal_embedding(c_noise, self.cfg.noise_embed_dim), dtype=dtype
        )
        year_emb = torch.as_tensor(year_embedding(year_phase, self.cfg.year_embed_dim), dtype=dtype)
        return self.noise_mlp(noise_emb) + self.year_mlp(year_emb)

    def forward(
        self,
        z_noisy_scaled: torch.Tensor,
        z_cond: torch.Tensor,
        c_noise: float,
        year_phase: float,
        cond_coords: TokenCoords,
        target_coords: TokenCoords,
    ) -> torch.Tensor:
        if z_noisy_scaled.ndim != 4 or z_cond.ndim != 4:
            raise ValidationError("latent blocks must be [frames, channels, H, W]")
        h_frames, c_ch, hh, ww = z_noisy_scaled.shape
        if c_ch != self.cfg.latent_channels or z_cond.shape[1] != self.cfg.latent_channels:
            raise ValidationError("latent channel count does not match config")
        dtype = next(self.parameters()).dtype
        device = z_noisy_scaled.device
        rope = self.cfg.rope

        cond_vec = self.conditioning_vector(c_noise, year_phase)
        blk_c = patchify(z_cond, self.patch_proj, cond_coords, "conditioning")
        blk_t = patchify(z_noisy_scaled, self.patch_proj, target_coords, "target")
        cos_c, sin_c = _phase_tables(cond_coords, rope, dtype, device)
        cos_t, sin_t = _phase_tables(target_coords, rope, dtype, device)

        x_c, x_t = blk_c.tokens, blk_t.tokens
        for block in self.preprocess:
            x_c = block(x_c, cond_vec, cos_c, sin_c)
        for block in self.dual:
            x_c, x_t = block(x_c, x_t, cond_vec, cos_c, sin_c, cos_t, sin_t)
        x = torch.cat([x_c, x_t], dim=0)
        cos = torch.cat([cos_c, cos_t], dim=0)
        sin = torch.cat([sin_c, sin_t], dim=0)
        for block in self.single:
            x = block(x, cond_vec, cos, sin)
        out = self.final(x[x_c.shape[0] :], cond_vec)
        if not torch.isfinite(out).all():
            raise NumericalError("non-finite activations in denoiser output")
        return out.view(h_frames, hh, ww, c_ch).permute(0, 3, 1, 2)
