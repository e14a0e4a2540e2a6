"""Forward noising, the frozen-denoiser score pass, gated two-denoiser fusion and sampling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .adapter import AlignedEmbeddings
from .backbone import DTYPE, Backbone, LatentImage
from .errors import ConfigError, InputError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def T(self) -> int:
        return self.betas.numel()


@dataclass
class NoisedLatent:
    values: torch.Tensor
    noise: torch.Tensor
    lam: torch.Tensor  # (b,) long


@dataclass
class TFFOutput:
    h_sdxl: torch.Tensor
    epsilon: float


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule; alpha_bar is the running product of (1 - beta)."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0 < beta_start < beta_end < 1:
        raise ConfigError(f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})")
    betas = torch.linspace(beta_start, beta_end, T, dtype=DTYPE)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, torch.cumprod(alphas, dim=0))


def _lambda_tensor(lam, batch: int, T: int) -> torch.Tensor:
    lam = torch.as_tensor(lam, dtype=torch.long).reshape(-1)
    if lam.numel() == 1:
        lam = lam.expand(batch).clone()
    if lam.numel() != batch:
        raise InputError(f"expected {batch} timesteps, got {lam.numel()}")
    if ((lam < 0) | (lam >= T)).any():
        raise InputError(f"timestep outside [0, {T}): {lam.tolist()}")
    return lam


def f_noise(I: LatentImage | torch.Tensor, lam, rng: torch.Generator, schedule: NoiseSchedule) -> NoisedLatent:
    x0 = I.values if isinstance(I, LatentImage) else I
    if x0.dim() == 3:
        x0 = x0.unsqueeze(0)
    lam = _lambda_tensor(lam, x0.shape[0], schedule.T)
    noise = torch.randn(x0.shape, generator=rng, dtype=DTYPE)
    ab = schedule.alpha_bars[lam].view(-1, *([1] * (x0.dim() - 1)))
    return NoisedLatent(ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise, noise, lam)


def unet_score(noised: NoisedLatent, emb: AlignedEmbeddings, backbone: Backbone) -> torch.Tensor:
    """Frozen base denoiser on the noised latent; differentiable w.r.t. ``emb``."""
    return backbone.denoise_base(noised.values, emb.h_align, emb.h_palign, noised.lam)


def tff_fuse(pred_base: torch.Tensor, pred_refiner: torch.Tensor, epsilon: float) -> TFFOutput:
    if not 0.0 <= epsilon <= 1.0:
        raise InputError(f"epsilon must lie in [0, 1], got {epsilon}")
    if pred_base.shape != pred_refiner.shape:
        raise InputError(f"shape mismatch {tuple(pred_base.shape)} vs {tuple(pred_refiner.shape)}")
    # (1-e)*a + e*b keeps both endpoints bitwise exact
    return TFFOutput((1.0 - epsilon) * pred_base + epsilon * pred_refiner, epsilon)


Predictor = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def timestep_sequence(T: int, steps: int) -> list[int]:
    if not 1 <= steps <= T:
        raise InputError(f"steps must lie in [1, {T}], got {steps}")
    seq = torch.linspace(T - 1, 0, steps, dtype=DTYPE).round().long().tolist()
    return list(dict.fromkeys(seq))


def ancestral_sample(
    predict: Predictor,
    shape: tuple[int, ...],
    schedule: NoiseSchedule,
    steps: int,
    rng: torch.Generator,
) -> torch.Tensor:
    """Ancestral reverse diffusion with noise-prediction outputs and the beta ("small") variance."""
    ts = timestep_sequence(schedule.T, steps)
    x = torch.randn(shape, generator=rng, dtype=DTYPE)
    ab = schedule.alpha_bars
    for i, t in enumerate(ts):
        ab_t = ab[t]
        ab_prev = ab[ts[i + 1]] if i + 1 < len(ts) else torch.ones((), dtype=DTYPE)
        beta = 1.0 - ab_t / ab_prev
        lam = torch.full((shape[0],), t, dtype=torch.long)
        with torch.no_grad():
            eps = predict(x, lam)
        x0 = (x - (1.0 - ab_t).sqrt() * eps) / ab_t.sqrt()
        mean = (ab_prev.sqrt() * beta / (1.0 - ab_t)) * x0 + ((1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t)) * x
        if i + 1 < len(ts):
            x = mean + beta.sqrt() * torch.randn(shape, generator=rng, dtype=DTYPE)
        else:
            x = mean
    return x


def sample(
    emb_layer0: AlignedEmbeddings,
    emb_layerL: AlignedEmbeddings,
    epsilon: float,
    steps: int,
    rng: torch.Generator,
    backbone: Backbone,
    schedule: NoiseSchedule,
) -> LatentImage:
    """Generate a latent with every step's prediction fused from base (shallow) and refiner (deep) paths."""
    if not 0.0 <= epsilon <= 1.0:
        raise InputError(f"epsilon must lie in [0, 1], got {epsilon}")
    batch = emb_layer0.h_align.shape[0]

    def predict(x, lam):
        base = backbone.denoise_base(x, emb_layer0.h_align, emb_layer0.h_palign, lam)
        refined = backbone.denoise_refiner(x, emb_layerL.h_align, emb_layerL.h_palign, lam)
        return tff_fuse(base, refined, epsilon).h_sdxl

    shape = (batch, *backbone.profile.latent_shape)
    return LatentImage(ancestral_sample(predict, shape, schedule, steps, rng))
