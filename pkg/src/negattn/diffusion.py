"""Noise schedule, forward noising, the noise-prediction loss and DDIM sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import torch

from .attention import AttentionConfig
from .masks import CARRY, MaskState
from .numerics import Rng, gaussian


class ScheduleError(ValueError):
    pass


@dataclass
class NoiseSchedule:
    """Per-step ``alpha`` and cumulative ``alpha_bar`` for ``t = 1..T``.

    Index ``t - 1`` holds step ``t``; ``alpha_bar_at(0)`` is 1 (clean data).
    """
    alpha: torch.Tensor
    alpha_bar: torch.Tensor

    @property
    def T(self) -> int:
        return self.alpha.shape[0]

    @property
    def beta(self) -> torch.Tensor:
        return 1.0 - self.alpha

    @classmethod
    def from_alphas(cls, alphas, strict: bool = True) -> "NoiseSchedule":
        alpha = torch.as_tensor(alphas, dtype=torch.float64).flatten()
        if strict and not bool(((alpha > 0) & (alpha < 1)).all()):
            raise ScheduleError("every alpha must lie strictly inside (0, 1)")
        bar = torch.empty_like(alpha)
        acc = 1.0
        for i, a in enumerate(alpha.tolist()):
            acc *= a
            bar[i] = acc
        return cls(alpha, bar)

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
        return cls.from_alphas(1.0 - betas)

    def alpha_bar_at(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside 1..{self.T}")
        return float(self.alpha_bar[t - 1])

    def to_dict(self):
        return {"T": self.T, "alpha": self.alpha.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls.from_alphas(d["alpha"])


@dataclass
class GuidanceConfig:
    guidance_scale: float = 7.5
    unconditional_token: int = 0

    def __post_init__(self):
        if not self.guidance_scale >= 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.guidance_scale}")


def _coefficients(sched: NoiseSchedule, t, like: torch.Tensor):
    if torch.is_tensor(t) and t.dim() > 0:
        if int(t.min()) < 1 or int(t.max()) > sched.T:
            raise ScheduleError(f"timesteps must lie in 1..{sched.T}")
        bar = sched.alpha_bar[t - 1].to(like.dtype)
        bar = bar.reshape(-1, *([1] * (like.dim() - 1)))
        return bar.sqrt(), (1.0 - bar).sqrt()
    t = int(t)
    if not 1 <= t <= sched.T:
        raise ScheduleError(f"timestep {t} outside 1..{sched.T}")
    bar = sched.alpha_bar_at(t)
    return math.sqrt(bar), math.sqrt(1.0 - bar)


def forward_process(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule):
    """``sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps``; ``t`` scalar or per-row."""
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
    a, s = _coefficients(sched, t, z0)
    return a * z0 + s * eps


def training_loss(model: Callable, z0, t, eps, cond, sched: NoiseSchedule):
    """Mean squared error between ``eps`` and the model's prediction at ``z_t``."""
    z_t = forward_process(z0, t, eps, sched)
    return ((eps - model(z_t, t, cond)) ** 2).mean()


def ddim_step(z_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule, eta: float = 0.0,
              noise: Optional[torch.Tensor] = None, clip: Optional[float] = None):
    """One DDIM update. With ``clip`` the ``z0`` estimate is clamped to
    ``[-clip, clip]`` and the noise estimate re-derived from it."""
    if not t > t_prev >= 0:
        raise ScheduleError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    ab_t = sched.alpha_bar_at(t)
    ab_prev = sched.alpha_bar_at(t_prev)
    if ab_t <= 0.0:
        raise ScheduleError(f"alpha_bar is zero at t={t}")
    z0_hat = (z_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    if clip is not None:
        z0_hat = z0_hat.clamp(-clip, clip)
        eps_hat = (z_t - math.sqrt(ab_t) * z0_hat) / math.sqrt(1.0 - ab_t)
    sigma = 0.0
    if eta > 0.0:
        sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev))
        if noise is None:
            raise ValueError("eta > 0 needs a noise tensor")
    out = math.sqrt(ab_prev) * z0_hat + math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps_hat
    if sigma > 0.0:
        out = out + sigma * noise
    return out


def ddim_timesteps(T: int, steps: int) -> List[int]:
    """Descending timesteps ``T, ..., > 0``; sampling ends at ``t_prev = 0``."""
    if not 1 <= steps <= T:
        raise ScheduleError(f"step count {steps} outside 1..{T}")
    return [T - (i * T) // steps for i in range(steps)]


def initial_latents(seeds: Sequence[int], shape, dtype=torch.float32) -> torch.Tensor:
    """One ``z_T`` per seed, each from its own generator."""
    return torch.stack([gaussian(Rng(s), shape) for s in seeds]).to(dtype)


def guided(eps_cond, eps_uncond, scale: float):
    if scale == 1.0:
        return eps_cond
    return eps_uncond + scale * (eps_cond - eps_uncond)


@torch.no_grad()
def sample(model, prompt_cond, subject_cond, sched: NoiseSchedule, guidance: GuidanceConfig,
           attn_cfg: Optional[AttentionConfig], rng: Optional[Rng] = None, *,
           noise: Optional[torch.Tensor] = None, steps: int = 50, eta: float = 0.0,
           mask_state: Optional[MaskState] = None, mask_mode: str = CARRY,
           dump_dir: Optional[str] = None, shape=None, clip: Optional[float] = 1.0):
    """Run the reverse process from ``z_T`` to an estimate of ``z0``.

    ``model`` needs ``denoise(z_t, t, cond, subject, attn_cfg, mask_state)`` and
    ``null_conditioning(batch)``. The starting latent is ``noise`` when given,
    otherwise drawn from ``rng``. Only the conditional pass sees the subject
    branch; the unconditional pass is plain attention. ``clip`` bounds the
    ``z0`` estimate at every step (latents of real images lie in [-1, 1]).
    """
    if noise is None:
        if rng is None:
            raise ValueError("sample needs a seed: pass rng or noise")
        shape = shape or (1, *model.latent_shape)
        noise = gaussian(rng, shape).to(model.dtype)
    z = noise
    b = z.shape[0]
    plain = AttentionConfig(lam=0.0, negative_attention=False, record_maps=False)
    if mask_state is None and subject_cond is not None:
        mask_state = MaskState(
            base_resolution=model.base_resolution,
            identifier_token_index=prompt_cond.identifier_index,
            subject_identifier_index=subject_cond.identifier_index,
            batch=b, mode=mask_mode, dump_dir=dump_dir)
    uncond = model.null_conditioning(b) if guidance.guidance_scale != 1.0 else None
    ts = ddim_timesteps(sched.T, steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        if mask_state is not None:
            mask_state.begin_step(t)
        eps_c = model.denoise(z, t, prompt_cond, subject_cond, attn_cfg, mask_state)
        if mask_state is not None:
            mask_state.end_step()
        eps_u = None
        if uncond is not None:
            eps_u = model.denoise(z, t, uncond, None, plain, None)
        eps = guided(eps_c, eps_u, guidance.guidance_scale)
        step_noise = None
        if eta > 0.0:
            if rng is None:
                raise ValueError("eta > 0 needs rng")
            step_noise = gaussian(rng.child(i), z.shape).to(z.dtype)
        z = ddim_step(z, eps, t, t_prev, sched, eta, step_noise, clip)
    return z
