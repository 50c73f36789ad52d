"""EDM-style diffusion: sigma ladder, preconditioning, weighted loss, EMA,
and the second-order Heun probability-flow ODE sampler.

The probability-flow ODE is integrated in the sigma parameterization, so the
per-step slope is ``(z - D(z, sigma)) / sigma``. The sampler spends exactly
``2N - 1`` denoiser evaluations for an N-step ladder: every step takes an
Euler proposal, and every step except the final one (to sigma = 0) adds a
second-order correction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .errors import NumericalError, ValidationError

SIGMA_DATA_DEFAULT = 0.5
LOGNORMAL_P_MEAN = -1.2
LOGNORMAL_P_STD = 1.2
LOSS_WEIGHT_VARIANTS = ("edm", "ratio")


# ---------------------------------------------------------------------------
# Noise schedule.


@dataclass(frozen=True)
class NoiseSchedule:
    n_steps: int
    sigma_min: float
    sigma_max: float
    rho: float
    sigmas: np.ndarray  # length n_steps + 1, terminal entry 0

    def __iter__(self):
        return iter(self.sigmas)


def build_schedule(n_steps: int, sigma_min: float, sigma_max: float, rho: float) -> NoiseSchedule:
    """sigma_t = (smax^(1/rho) + t/(N-1) * (smin^(1/rho) - smax^(1/rho)))^rho,
    strictly decreasing from sigma_max to sigma_min, with sigma_N = 0 appended
    for the final Euler step."""
    if n_steps < 2:
        raise ValidationError("schedule needs at least 2 steps")
    if not (0 < sigma_min < sigma_max):
        raise ValidationError("need 0 < sigma_min < sigma_max")
    if rho <= 0:
        raise ValidationError("rho must be positive")
    t = np.arange(n_steps, dtype=np.float64)
    inv = 1.0 / rho
    ladder = (sigma_max**inv + t / (n_steps - 1) * (sigma_min**inv - sigma_max**inv)) ** rho
    ladder[0] = sigma_max
    ladder[-1] = sigma_min
    sigmas = np.concatenate([ladder, [0.0]])
    return NoiseSchedule(n_steps, sigma_min, sigma_max, rho, sigmas)


# ---------------------------------------------------------------------------
# Preconditioning.


@dataclass(frozen=True)
class PreconditionCoeffs:
    c_skip: float
    c_in: float
    c_out: float
    c_noise: float


def precondition(sigma: float, sigma_data: float = SIGMA_DATA_DEFAULT) -> PreconditionCoeffs:
    if sigma <= 0:
        raise ValidationError("sigma must be positive")
    var = sigma * sigma + sigma_data * sigma_data
    return PreconditionCoeffs(
        c_skip=sigma_data * sigma_data / var,
        c_in=1.0 / math.sqrt(var),
        c_out=sigma * sigma_data / math.sqrt(var),
        c_noise=math.log(sigma) / 4.0,
    )


def denoise(network: Callable, z_noisy, z_cond, sigma: float, sigma_data: float = SIGMA_DATA_DEFAULT):
    """D(z) = c_skip * z + c_out * network(c_in * z; z_cond, c_noise).

    Works on numpy arrays or torch tensors; the network is called with the
    scaled state, the conditioning block, and c_noise.
    """
    c = precondition(sigma, sigma_data)
    out = network(c.c_in * z_noisy, z_cond, c.c_noise)
    finite = torch.isfinite(out).all() if isinstance(out, torch.Tensor) else np.all(np.isfinite(out))
    if not finite:
        raise NumericalError(f"network output is not finite at sigma={sigma:g}")
    return c.c_skip * z_noisy + c.c_out * out


# ---------------------------------------------------------------------------
# Sampling.


def _as_generator(rng_seed) -> np.random.Generator:
    # Philox: 64-bit counter-based and splittable, so member streams are
    # reproducible across platforms.
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.Generator(np.random.Philox(rng_seed))


def heun_sample(
    denoiser: Callable,
    z_cond,
    shape: tuple[int, ...],
    schedule: NoiseSchedule,
    rng_seed,
    second_order: bool = True,
) -> np.ndarray:
    """Integrate the probability-flow ODE from sigma_max down to 0.

    ``denoiser(z, z_cond, sigma)`` must return the denoised state. The
    initial state is ``sigma_0 * n`` with ``n`` standard normal drawn from
    ``rng_seed`` (an int or a numpy Generator). With ``second_order=False``
    the corrector is skipped and the trajectory is plain Euler.
    """
    rng = _as_generator(rng_seed)
    sigmas = schedule.sigmas
    z = sigmas[0] * rng.standard_normal(shape, dtype=np.float64)
    for i in range(len(sigmas) - 1):
        s_cur, s_next = float(sigmas[i]), float(sigmas[i + 1])
        d_cur = (z - denoiser(z, z_cond, s_cur)) / s_cur
        z_next = z + (s_next - s_cur) * d_cur
        if not np.all(np.isfinite(z_next)):
            raise NumericalError(f"non-finite state after step to sigma={s_next:g}")
        if second_order and s_next > 0:
            d_next = (z_next - denoiser(z_next, z_cond, s_next)) / s_next
            z_next = z + (s_next - s_cur) * 0.5 * (d_cur + d_next)
            if not np.all(np.isfinite(z_next)):
                raise NumericalError(f"non-finite state after step to sigma={s_next:g}")
        z = z_next
    return z


def sample_sigma(
    rng: np.random.Generator,
    p_mean: float = LOGNORMAL_P_MEAN,
    p_std: float = LOGNORMAL_P_STD,
) -> float:
    """Log-normal noise-level draw: ln(sigma) ~ N(p_mean, p_std^2)."""
    return float(np.exp(p_mean + p_std * rng.standard_normal()))


def step_rng(seed_base: int, step: int) -> np.random.Generator:
    """Per-training-step stream so every draw is reproducible by step index."""
    return np.random.Generator(np.random.Philox(key=[seed_base, step]))


# ---------------------------------------------------------------------------
# Training loss.


def loss_weight(sigma: float, sigma_data: float = SIGMA_DATA_DEFAULT, variant: str = "edm") -> float:
    """Per-sigma loss weight.

    "edm": (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2, i.e. 1/c_out^2.
    "ratio": (sigma^2 + sigma_data^2) / (sigma * sigma_data), the unsquared
    form; kept behind this switch because the two differ only by the
    denominator exponent and both appear in circulation.
    """
    if variant not in LOSS_WEIGHT_VARIANTS:
        raise ValidationError(f"loss weight variant must be one of {LOSS_WEIGHT_VARIANTS}")
    num = sigma * sigma + sigma_data * sigma_data
    if variant == "edm":
        return num / (sigma * sigma_data) ** 2
    return num / (sigma * sigma_data)


def training_loss(
    network: Callable,
    batch: list[tuple],
    sigma: float,
    lat_weights: np.ndarray,
    sigma_data: float = SIGMA_DATA_DEFAULT,
    rng: np.random.Generator | None = None,
    weight_variant: str = "edm",
) -> torch.Tensor:
    """Latitude-weighted denoising loss at one noise level.

    ``batch`` holds ``(z_target, z_cond)`` pairs with targets shaped
    ``[frames, channels, n_lat, n_lon]``. Noise is drawn from ``rng`` so a
    step-seeded generator makes the loss deterministic. Returns a torch
    scalar suitable for backprop.
    """
    if sigma <= 0:
        raise ValidationError("sigma must be positive")
    rng = rng if rng is not None else np.random.default_rng()
    w = torch.as_tensor(np.asarray(lat_weights, dtype=np.float64), dtype=torch.float64)
    lam = loss_weight(sigma, sigma_data, weight_variant)
    total = None
    for z_target, z_cond in batch:
        z0 = torch.as_tensor(np.asarray(z_target), dtype=torch.float64)
        noise = torch.as_tensor(rng.standard_normal(tuple(z0.shape)), dtype=torch.float64)
        denoised = denoise(network, z0 + sigma * noise, z_cond, sigma, sigma_data)
        if not isinstance(denoised, torch.Tensor):
            denoised = torch.as_tensor(denoised, dtype=torch.float64)
        err2 = (denoised - z0) ** 2 * w.view(*([1] * (z0.ndim - 2)), -1, 1)
        term = lam * err2.mean()
        total = term if total is None else total + term
    if total is None:
        raise ValidationError("empty batch")
    loss = total / len(batch)
    if not torch.isfinite(loss):
        raise NumericalError("training loss is not finite")
    return loss


# ---------------------------------------------------------------------------
# Exponential moving average with warmup.


def ema_decay(
    step: int,
    max_decay: float = 0.9999,
    inv_gamma: float = 1.0,
    power: float = 2.0 / 3.0,
    update_after_step: int = 1000,
) -> float:
    """Warmup-scheduled decay; 0 (no update) while step <= update_after_step."""
    s = step - update_after_step
    if s <= 0:
        return 0.0
    return min(max_decay, 1.0 - (1.0 + s / inv_gamma) ** (-power))


@dataclass
class EmaState:
    """Shadow copy of model weights updated with the warmup decay schedule."""

    shadow: dict[str, torch.Tensor]
    step: int = 0
    max_decay: float = 0.9999
    inv_gamma: float = 1.0
    power: float = 2.0 / 3.0
    update_after_step: int = 1000

    @classmethod
    def from_module(cls, module: torch.nn.Module, **kwargs) -> "EmaState":
        shadow = {k: v.detach().clone() for k, v in module.state_dict().items()}
        return cls(shadow=shadow, **kwargs)

    def decay_at(self, step: int) -> float:
        return ema_decay(step, self.max_decay, self.inv_gamma, self.power, self.update_after_step)

    def copy_to(self, module: torch.nn.Module) -> None:
        module.load_state_dict(self.shadow)


def ema_update(state: EmaState, weights: dict[str, torch.Tensor]) -> EmaState:
    """shadow <- d * shadow + (1 - d) * weights, at the caller-set step counter."""
    d = state.decay_at(state.step)
    if d == 0.0:
        return state
    with torch.no_grad():
        for name, value in weights.items():
            if name not in state.shadow:
                raise ValidationError(f"EMA shadow missing parameter {name!r}")
            if state.shadow[name].shape != value.shape:
                raise ValidationError(f"EMA shape mismatch for {name!r}")
            state.shadow[name].mul_(d).add_(value.detach(), alpha=1.0 - d)
    return state


# ---------------------------------------------------------------------------
# Sampler configuration file.


@dataclass(frozen=True)
class SamplerConfig:
    """Wire format for the sampler settings JSON."""

    N: int = 20
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    sigma_data: float = SIGMA_DATA_DEFAULT
    loss_weight_variant: str = "edm"
    member_seed_base: int = 0

    def __post_init__(self):
        if self.loss_weight_variant not in LOSS_WEIGHT_VARIANTS:
            raise ValidationError(f"loss weight variant must be one of {LOSS_WEIGHT_VARIANTS}")
        build_schedule(self.N, self.sigma_min, self.sigma_max, self.rho)

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.N, self.sigma_min, self.sigma_max, self.rho)

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "sigma_min": self.sigma_min,
            "sigma_max": self.sigma_max,
            "rho": self.rho,
            "sigma_data": self.sigma_data,
            "loss_weight_variant": self.loss_weight_variant,
            "member_seed_base": self.member_seed_base,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        return cls(**d)

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read_json(cls, path: str | Path) -> "SamplerConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
