"""Run configuration, scale profiles and seeded random streams.

Config files are plain ``key = value`` text, one assignment per line, ``#``
starting a comment. Profile dimensions are addressed as ``profile.<field>``
and per-task gate values as ``epsilon.<task>``. See FORMATS.md.
"""
from __future__ import annotations

import ast
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch

from .errors import ConfigError, ValidationError

DDPM_MODES = ("verbatim", "eps_pred")

DEFAULT_EPSILONS = {
    "text_to_image": 1.0,
    "edit_default": 0.8,
    "edit_layout": 0.95,
    "edit_color_texture": 0.7,
    "storytelling": 1.0,
}


@dataclass(frozen=True)
class ScaleProfile:
    d_model: int = 64
    L: int = 6
    length: int = 16
    seq_sd: int = 8
    d_sd: int = 32
    d_pool: int = 16
    latent_shape: tuple[int, int, int] = (4, 8, 8)
    T: int = 32
    vocab: int = 256
    image_size: int = 32

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            values = value if isinstance(value, tuple) else (value,)
            if not all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in values):
                raise ValidationError(f"profile.{f.name}", f"must be strictly positive integer(s), got {value!r}")
        if len(self.latent_shape) != 3:
            raise ValidationError("profile.latent_shape", "expected (channels, height, width)")
        if self.vocab < 256:
            raise ValidationError("profile.vocab", "byte-level tokenizer needs vocab >= 256")
        grid = math.isqrt(self.length)
        if grid * grid != self.length or self.image_size % grid:
            raise ValidationError("profile.length", "must be a square grid dividing image_size")
        _, h, w = self.latent_shape
        if h != w or self.image_size % h:
            raise ValidationError("profile.latent_shape", "latent must be square and divide image_size")

    @property
    def patch_grid(self) -> int:
        return math.isqrt(self.length)

    @property
    def pixel_shape(self) -> tuple[int, int, int]:
        return (3, self.image_size, self.image_size)


DESK = ScaleProfile()
PAPER = ScaleProfile(
    d_model=4096,
    L=32,
    length=256,
    seq_sd=77,
    d_sd=2048,
    d_pool=1280,
    latent_shape=(4, 128, 128),
    T=1000,
    vocab=32000,
    image_size=1024,
)
PROFILES = {"desk": DESK, "paper": PAPER}


@dataclass(frozen=True)
class RunConfig:
    profile: ScaleProfile = DESK
    seed: int = 0
    lr: float = 3e-3
    batch_size: int = 8
    epochs: int = 4
    phi0: float = 1.0
    phi_decay: float = 0.1
    ddpm_mode: str = "verbatim"
    epsilon_defaults: dict = field(default_factory=lambda: dict(DEFAULT_EPSILONS))
    # adapter
    n_adapter_layers: int = 4
    n_heads: int = 4
    adapter_dim: int = 64
    train_layer: int = -1  # -1 selects the final LM block
    # diffusion
    beta_start: float = 1e-4
    beta_end: float = 0.3
    sample_steps: int = 0  # 0 means profile.T
    denoiser_warmup: int = 150  # conditioning warm-up steps for the frozen denoisers (0 = purely random)
    # decoding
    max_new: int = 8
    max_sentences: int = 8
    # debug: unsquared sequence term of the alignment loss
    align_literal: bool = False

    def __post_init__(self):
        if not self.lr >= 0:
            # lr=0 is permitted for null-update checks
            raise ValidationError("lr", "must be >= 0")
        if self.denoiser_warmup < 0:
            raise ValidationError("denoiser_warmup", "must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size", "must be >= 1")
        if self.epochs < 1:
            raise ValidationError("epochs", "must be >= 1")
        if not 0 < self.phi_decay <= 1:
            raise ValidationError("phi_decay", "must lie in (0, 1]")
        if self.phi0 < 0:
            raise ValidationError("phi0", "must be >= 0")
        if self.ddpm_mode not in DDPM_MODES:
            raise ValidationError("ddpm_mode", f"must be one of {DDPM_MODES}")
        for task, eps in self.epsilon_defaults.items():
            if task not in DEFAULT_EPSILONS:
                raise ValidationError(f"epsilon.{task}", "unknown task")
            if not 0.0 <= eps <= 1.0:
                raise ValidationError(f"epsilon.{task}", "must lie in [0, 1]")
        if self.adapter_dim % self.n_heads:
            raise ValidationError("n_heads", "must divide adapter_dim")
        if self.n_adapter_layers < 1:
            raise ValidationError("n_adapter_layers", "must be >= 1")
        if not -1 <= self.train_layer <= self.profile.L:
            raise ValidationError("train_layer", f"must lie in [-1, {self.profile.L}]")
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValidationError("beta_start", "need 0 < beta_start < beta_end < 1")
        if not 0 <= self.sample_steps <= self.profile.T:
            raise ValidationError("sample_steps", f"must lie in [0, {self.profile.T}]")
        if self.max_new < 0:
            raise ValidationError("max_new", "must be >= 0")

    @property
    def training_layer(self) -> int:
        return self.profile.L if self.train_layer == -1 else self.train_layer

    @property
    def steps(self) -> int:
        return self.sample_steps or self.profile.T

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["profile"]["latent_shape"] = list(self.profile.latent_shape)
        return d


PRESETS = {
    "desk": {},
    "paper-recipe": {"lr": 1e-4, "batch_size": 8, "epochs": 4, "phi0": 1.0, "phi_decay": 0.1},
}


def preset(name: str, profile: str = "desk") -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; known: {sorted(PROFILES)}")
    return RunConfig(profile=PROFILES[profile], **PRESETS[name])


def _parse_value(raw: str):
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        pass
    if "," in raw:
        return tuple(_parse_value(part.strip()) for part in raw.split(","))
    lowered = raw.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    return raw


def parse_config_text(text: str, source: str = "<string>") -> RunConfig:
    top: dict[str, Any] = {}
    prof: dict[str, Any] = {}
    eps: dict[str, float] = {}
    preset_name, profile_name = "desk", "desk"
    run_fields = {f.name for f in dataclasses.fields(RunConfig)} - {"profile", "epsilon_defaults"}
    prof_fields = {f.name for f in dataclasses.fields(ScaleProfile)}

    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if not key or not raw:
            raise ConfigError(f"{source}:{lineno}: empty key or value in {line.strip()!r}")
        value = _parse_value(raw)
        if key == "preset":
            preset_name = str(value)
        elif key == "profile":
            profile_name = str(value)
        elif key.startswith("profile."):
            name = key.split(".", 1)[1]
            if name not in prof_fields:
                raise ConfigError(f"{source}:{lineno}: unknown profile field {name!r}")
            prof[name] = tuple(value) if name == "latent_shape" and isinstance(value, (list, tuple)) else value
        elif key.startswith("epsilon."):
            try:
                eps[key.split(".", 1)[1]] = float(value)
            except (TypeError, ValueError):
                raise ConfigError(f"{source}:{lineno}: epsilon value must be numeric") from None
        elif key in run_fields:
            top[key] = value
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")

    base = preset(preset_name, profile_name)
    profile = dataclasses.replace(base.profile, **prof) if prof else base.profile
    merged = dict(base.epsilon_defaults)
    merged.update(eps)
    return base.replace(profile=profile, epsilon_defaults=merged, **top)


def load_config(path: str | Path) -> RunConfig:
    """Load a config file, or return a named preset when ``path`` is a preset name."""
    if isinstance(path, str) and path in PRESETS and not Path(path).exists():
        return preset(path)
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    return parse_config_text(text, source=str(p))


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}\x00{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def seeded_rng(seed: int, stream_label: str) -> torch.Generator:
    """Independent, reproducible generator for one named stream."""
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, stream_label))
    return g
