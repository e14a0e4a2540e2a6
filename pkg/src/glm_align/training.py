"""Losses, the balance-weight schedule, the adapter-only training loop and freeze checks."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path
from typing import Callable, Sequence

import torch

from .adapter import AlignedEmbeddings, GLMAdapter, adapter_forward
from .backbone import DTYPE, Backbone, ReferenceEmbeddings
from .config import RunConfig, seeded_rng
from .diffusion import NoisedLatent, NoiseSchedule, build_schedule, f_noise, unet_score
from .errors import FreezeViolation, InputError, NumericError

log = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    l_align: float
    l_ddpm: float
    phi: float
    l_overall: float


@dataclass
class TrainState:
    adapter: GLMAdapter
    optimizer: torch.optim.Adam
    epoch: int
    step: int
    phi: float
    rng: torch.Generator  # timestep and noise draws

    def moments(self) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
        out = {}
        for name, p in self.adapter.named_parameters():
            st = self.optimizer.state.get(p, {})
            if "exp_avg" in st:
                out[name] = (st["exp_avg"], st["exp_avg_sq"])
            else:
                out[name] = (torch.zeros_like(p), torch.zeros_like(p))
        return out

    @property
    def adam_step(self) -> int:
        for st in self.optimizer.state.values():
            return int(st["step"])
        return 0


def make_optimizer(adapter: GLMAdapter, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(adapter.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8, foreach=False)


def init_state(cfg: RunConfig, adapter: GLMAdapter | None = None) -> TrainState:
    adapter = adapter or GLMAdapter.from_config(cfg)
    return TrainState(
        adapter=adapter,
        optimizer=make_optimizer(adapter, cfg.lr),
        epoch=0,
        step=0,
        phi=phi_schedule(0, cfg),
        rng=seeded_rng(cfg.seed, "train"),
    )


def build_components(cfg: RunConfig) -> tuple[Backbone, NoiseSchedule]:
    return Backbone(cfg.profile, cfg.seed, cfg.denoiser_warmup), build_schedule(cfg.profile.T, cfg.beta_start, cfg.beta_end)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_align(pred: AlignedEmbeddings, ref: ReferenceEmbeddings, literal: bool = False) -> torch.Tensor:
    """Pooled MSE plus the token-averaged sequence MSE.

    ``literal=True`` leaves the sequence term unsquared (debug only; unbounded below).
    """
    if pred.h_align.shape != ref.e_clip.shape or pred.h_palign.shape != ref.e_pclip.shape:
        raise InputError(
            f"alignment shapes differ: {tuple(pred.h_align.shape)}/{tuple(pred.h_palign.shape)} vs "
            f"{tuple(ref.e_clip.shape)}/{tuple(ref.e_pclip.shape)}"
        )
    pooled = (pred.h_palign - ref.e_pclip).pow(2).mean()
    diff = pred.h_align - ref.e_clip
    seq = diff.mean() if literal else diff.pow(2).mean()
    return pooled + seq


def loss_ddpm(noised: NoisedLatent, h_unet: torch.Tensor, mode: str = "verbatim") -> torch.Tensor:
    if mode == "verbatim":
        target = noised.values
    elif mode == "eps_pred":
        target = noised.noise
    else:
        raise InputError(f"unknown ddpm mode {mode!r}")
    if target.shape != h_unet.shape:
        raise InputError(f"shape mismatch {tuple(target.shape)} vs {tuple(h_unet.shape)}")
    return (h_unet - target).pow(2).mean()


def phi_schedule(epoch: int, cfg: RunConfig) -> float:
    """phi0 * phi_decay**epoch, evaluated in decimal so 0.1-style factors stay exact."""
    if epoch < 0:
        raise InputError(f"epoch must be >= 0, got {epoch}")
    return float(Decimal(repr(cfg.phi0)) * Decimal(repr(cfg.phi_decay)) ** epoch)


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------


def compute_losses(
    batch: Sequence[tuple[torch.Tensor, str]],
    adapter: GLMAdapter,
    cfg: RunConfig,
    backbone: Backbone,
    schedule: NoiseSchedule,
    rng: torch.Generator,
    phi: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Forward pass of one batch; returns differentiable (l_align, l_ddpm, l_overall)."""
    if not batch:
        raise InputError("empty batch")
    images = torch.stack([img.to(DTYPE) for img, _ in batch])
    captions = [cap for _, cap in batch]
    # the LM sees the caption only; t2i inference has no input image either
    f_image = backbone.encode_vision(backbone.blank_image(len(batch)))
    _, stack = backbone.mllm_forward(backbone.encode_text(captions), f_image, max_new=0)
    layer = cfg.training_layer
    emb = adapter_forward(stack[layer], adapter, layer)
    ref = backbone.sd_text_encode(captions)

    lam = torch.randint(0, schedule.T, (len(batch),), generator=rng)
    noised = f_noise(backbone.vae_encode(images), lam, rng, schedule)
    h_unet = unet_score(noised, emb, backbone)

    l_align = loss_align(emb, ref, literal=cfg.align_literal)
    l_ddpm = loss_ddpm(noised, h_unet, cfg.ddpm_mode)
    return l_align, l_ddpm, l_ddpm + phi * l_align


def train_step(
    batch: Sequence[tuple[torch.Tensor, str]],
    state: TrainState,
    cfg: RunConfig,
    backbone: Backbone,
    schedule: NoiseSchedule,
) -> tuple[TrainState, LossBreakdown]:
    adapter = state.adapter
    adapter.train()
    l_align, l_ddpm, l_overall = compute_losses(batch, adapter, cfg, backbone, schedule, state.rng, state.phi)
    for name, value in (("l_align", l_align), ("l_ddpm", l_ddpm), ("l_overall", l_overall)):
        if not torch.isfinite(value):
            raise NumericError(f"non-finite {name} at step {state.step}: {value.item()}")

    state.optimizer.zero_grad(set_to_none=True)
    l_overall.backward()
    for group in state.optimizer.param_groups:
        group["lr"] = cfg.lr
    state.optimizer.step()
    state.step += 1
    return state, LossBreakdown(l_align.item(), l_ddpm.item(), state.phi, l_overall.item())


# ---------------------------------------------------------------------------
# freeze contract
# ---------------------------------------------------------------------------


def enforce_freeze(backbone: Backbone) -> dict[str, bool]:
    """Compare every frozen component against its construction-time checksum."""
    current = backbone.checksums()
    report = {name: current[name] == ref for name, ref in backbone.reference_checksums.items()}
    bad = [name for name, ok in report.items() if not ok]
    if bad:
        raise FreezeViolation(bad)
    return report


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


def epoch_order(n: int, seed: int, epoch: int) -> list[int]:
    return torch.randperm(n, generator=seeded_rng(seed, f"data/epoch{epoch}")).tolist()


def fit(
    samples: Sequence[tuple[torch.Tensor, str]],
    cfg: RunConfig,
    backbone: Backbone,
    schedule: NoiseSchedule,
    state: TrainState | None = None,
    max_steps: int | None = None,
    metrics_path: str | Path | None = None,
    timing: bool = False,
    on_step: Callable[[TrainState, LossBreakdown], None] | None = None,
) -> tuple[TrainState, list[LossBreakdown]]:
    """Train for ``cfg.epochs`` epochs (or until global step ``max_steps``).

    Batches are drawn in a per-epoch seeded order, so resuming from a
    checkpointed state continues exactly where the uninterrupted run would be.
    """
    if not samples:
        raise InputError("no training samples")
    state = state or init_state(cfg)
    per_epoch = math.ceil(len(samples) / cfg.batch_size)
    total = cfg.epochs * per_epoch
    if max_steps is not None:
        total = min(total, max_steps)
    history = []
    out = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    try:
        while state.step < total:
            epoch, idx = divmod(state.step, per_epoch)
            state.epoch = epoch
            state.phi = phi_schedule(epoch, cfg)
            order = epoch_order(len(samples), cfg.seed, epoch)
            batch = [samples[i] for i in order[idx * cfg.batch_size : (idx + 1) * cfg.batch_size]]
            t0 = time.perf_counter()
            state, losses = train_step(batch, state, cfg, backbone, schedule)
            wall_ms = round((time.perf_counter() - t0) * 1000.0, 3) if timing else None
            history.append(losses)
            if out:
                record = {
                    "step": state.step,
                    "epoch": epoch,
                    "phi": losses.phi,
                    "l_align": losses.l_align,
                    "l_ddpm": losses.l_ddpm,
                    "l_overall": losses.l_overall,
                    "wall_ms": wall_ms,
                }
                out.write(json.dumps(record) + "\n")
                out.flush()
            if on_step:
                on_step(state, losses)
    finally:
        if out:
            out.close()
    return state, history
