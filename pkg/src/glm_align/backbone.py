"""Frozen stand-ins for the pretrained networks around the adapter.

Every stub is a small randomly initialised torch module whose weights are drawn
from a seeded stream and never updated: the vision encoder and prompt adapter,
a byte-level causal language model that exposes all of its hidden layers, the
diffusion-side text encoder, a patch VAE, and two conditional denoisers (base
and refiner) that accept the sequence and pooled conditioning embeddings.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import ScaleProfile, derive_seed, seeded_rng
from .errors import InputError

DTYPE = torch.float64
PAD_ID = 0
# greedy decoding is restricted to printable ASCII so decoded text stays readable
PRINTABLE = (32, 127)


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


@dataclass
class TokenSequence:
    ids: list[int]

    @property
    def text(self) -> str:
        return detokenize(self.ids)


@dataclass
class VisualFeature:
    values: torch.Tensor  # (b, length, d_model)


@dataclass
class TextEmbedding:
    values: torch.Tensor  # (b, length, d_model)
    ids: torch.Tensor  # (b, length) long, trailing PAD_ID
    n_tokens: torch.Tensor  # (b,) long


@dataclass
class HiddenStack:
    layers: list[torch.Tensor]  # L+1 entries, each (b, length, d_model)
    ids: torch.Tensor | None = None  # token window that produced the stack

    def __post_init__(self):
        shapes = {tuple(h.shape) for h in self.layers}
        if len(shapes) != 1:
            raise InputError(f"hidden layers disagree in shape: {sorted(shapes)}")

    @property
    def L(self) -> int:
        return len(self.layers) - 1

    def __getitem__(self, layer: int) -> torch.Tensor:
        if not 0 <= layer <= self.L:
            raise InputError(f"layer {layer} outside [0, {self.L}]")
        return self.layers[layer]

    def select(self, index) -> HiddenStack:
        return HiddenStack([h[index] for h in self.layers], None if self.ids is None else self.ids[index])


@dataclass
class ReferenceEmbeddings:
    e_clip: torch.Tensor  # (b, seq_sd, d_sd)
    e_pclip: torch.Tensor  # (b, 1, d_pool)


@dataclass
class LatentImage:
    values: torch.Tensor  # (b, *latent_shape)


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------


def tokenize(text: str, length: int) -> list[int]:
    """Byte-level ids, silently truncated to ``length``."""
    return [b for b in text.encode("utf-8") if b != PAD_ID][:length]


def detokenize(ids) -> str:
    return bytes(i for i in ids if i != PAD_ID).decode("utf-8", errors="replace")


def pad_ids(ids: list[int], length: int) -> list[int]:
    return list(ids[:length]) + [PAD_ID] * (length - min(len(ids), length))


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _batched(x: torch.Tensor, ndim: int, what: str, shape=None) -> torch.Tensor:
    if x.dim() == ndim - 1:
        x = x.unsqueeze(0)
    if x.dim() != ndim or (shape is not None and tuple(x.shape[1:]) != tuple(shape)):
        raise InputError(f"{what}: expected shape (b, {', '.join(map(str, shape or ()))}), got {tuple(x.shape)}")
    return x.to(DTYPE)


def _init_frozen(module: nn.Module, gen: torch.Generator, out_scale: dict[str, float] | None = None):
    """Draw all weights from ``gen`` in a fixed order and freeze the module."""
    out_scale = out_scale or {}
    with torch.no_grad():
        for name, p in module.named_parameters():
            owner = module.get_submodule(name.rsplit(".", 1)[0]) if "." in name else module
            if isinstance(owner, (nn.LayerNorm, nn.GroupNorm)):
                continue
            if p.dim() >= 2:
                fan_in = p[0].numel()
                std = out_scale.get(name, 1.0) / math.sqrt(fan_in)
            else:
                std = 0.02
            p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * std)
    module.requires_grad_(False)
    module.eval()
    return module


def timestep_embedding(lam: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=DTYPE) / half)
    args = lam.to(DTYPE)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def module_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().contiguous().cpu().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# vision side
# ---------------------------------------------------------------------------


class VisionEncoder(nn.Module):
    """Patchify + linear projection to ``(length, d_model)`` tokens, with a pooled image head."""

    def __init__(self, profile: ScaleProfile):
        super().__init__()
        self.profile = profile
        self.patch = profile.image_size // profile.patch_grid
        self.proj = nn.Linear(3 * self.patch**2, profile.d_model, dtype=DTYPE)
        self.pos = nn.Parameter(torch.zeros(profile.length, profile.d_model, dtype=DTYPE))
        # image tower head used by the CLIP-style score
        self.image_head = nn.Linear(profile.d_model, profile.d_pool, bias=False, dtype=DTYPE)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        x = F.pixel_unshuffle(pixels, self.patch)  # (b, 3p^2, g, g)
        return self.proj(x.flatten(2).transpose(1, 2)) + self.pos

    def embed_image(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.image_head(self.forward(pixels).mean(dim=1))


class PatchVAE(nn.Module):
    def __init__(self, profile: ScaleProfile):
        super().__init__()
        c, h, _ = profile.latent_shape
        self.factor = profile.image_size // h
        self.enc = nn.Conv2d(3 * self.factor**2, c, 1, dtype=DTYPE)
        self.dec = nn.Conv2d(c, 3 * self.factor**2, 1, dtype=DTYPE)

    def encode(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.enc(F.pixel_unshuffle(pixels, self.factor))

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        return torch.tanh(F.pixel_shuffle(self.dec(latent), self.factor))


# ---------------------------------------------------------------------------
# language model
# ---------------------------------------------------------------------------


class Block(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d, dtype=DTYPE)
        self.qkv = nn.Linear(d, 3 * d, dtype=DTYPE)
        self.out = nn.Linear(d, d, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(d, dtype=DTYPE)
        self.fc1 = nn.Linear(d, 4 * d, dtype=DTYPE)
        self.fc2 = nn.Linear(4 * d, d, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q, k, v = (t.view(b, n, self.n_heads, -1).transpose(1, 2) for t in (q, k, v))
        a = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        x = x + self.out(a.transpose(1, 2).reshape(b, n, d))
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class CausalLM(nn.Module):
    """Pre-LN causal transformer; the token table doubles as the LM text encoder."""

    def __init__(self, profile: ScaleProfile, n_heads: int = 4):
        super().__init__()
        d = profile.d_model
        self.embed = nn.Embedding(profile.vocab, d, dtype=DTYPE)
        self.prompt_adapter = nn.Linear(d, d, dtype=DTYPE)  # W: injects visual features
        self.blocks = nn.ModuleList(Block(d, n_heads) for _ in range(profile.L))
        self.ln_f = nn.LayerNorm(d, dtype=DTYPE)

    def stack(self, ids: torch.Tensor, f_image: torch.Tensor) -> HiddenStack:
        h = self.embed(ids) + self.prompt_adapter(f_image)
        layers = [h]
        for block in self.blocks:
            h = block(h)
            layers.append(h)
        return HiddenStack(layers)

    def logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.ln_f(hidden) @ self.embed.weight.T


# ---------------------------------------------------------------------------
# diffusion side
# ---------------------------------------------------------------------------


class SDTextEncoder(nn.Module):
    """Caption -> (sequence embedding, pooled embedding) via frozen attention pooling."""

    def __init__(self, profile: ScaleProfile):
        super().__init__()
        self.profile = profile
        self.embed = nn.Embedding(profile.vocab, profile.d_sd, dtype=DTYPE)
        self.pos = nn.Parameter(torch.zeros(profile.length, profile.d_sd, dtype=DTYPE))
        self.queries = nn.Parameter(torch.zeros(profile.seq_sd, profile.d_sd, dtype=DTYPE))
        self.mix = nn.Linear(profile.d_sd, profile.d_sd, dtype=DTYPE)
        self.pool = nn.Linear(profile.d_sd, profile.d_pool, dtype=DTYPE)

    def forward(self, ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        tok = self.embed(ids) + self.pos
        mask = ids != PAD_ID
        mask[:, 0] = True  # an empty caption still attends to its first slot
        scores = self.queries @ tok.transpose(1, 2)
        scores = scores.masked_fill(~mask[:, None, :], float("-inf"))
        rows = torch.softmax(scores, dim=-1) @ tok
        rows = rows + torch.tanh(self.mix(rows))
        e_clip = F.layer_norm(rows, (self.profile.d_sd,))
        e_pclip = F.layer_norm(self.pool(e_clip.mean(dim=1, keepdim=True)), (self.profile.d_pool,))
        return e_clip, e_pclip


class Denoiser(nn.Module):
    """Conv trunk + cross-attention on the sequence embedding; pooled embedding joins the timestep embedding."""

    def __init__(self, profile: ScaleProfile, width: int = 32):
        super().__init__()
        c = profile.latent_shape[0]
        self.T = profile.T
        self.width = width
        self.conv_in = nn.Conv2d(c, width, 3, padding=1, dtype=DTYPE)
        self.time1 = nn.Linear(width, width, dtype=DTYPE)
        self.time2 = nn.Linear(width, width, dtype=DTYPE)
        self.pool_proj = nn.Linear(profile.d_pool, width, dtype=DTYPE)
        self.norm = nn.LayerNorm(width, dtype=DTYPE)
        self.q = nn.Linear(width, width, bias=False, dtype=DTYPE)
        self.k = nn.Linear(profile.d_sd, width, bias=False, dtype=DTYPE)
        self.v = nn.Linear(profile.d_sd, width, bias=False, dtype=DTYPE)
        self.o = nn.Linear(width, width, dtype=DTYPE)
        self.conv_mid = nn.Conv2d(width, width, 3, padding=1, dtype=DTYPE)
        self.conv_out = nn.Conv2d(width, c, 3, padding=1, dtype=DTYPE)

    def forward(self, x, h_align, h_palign, lam):
        h_align = F.layer_norm(h_align, h_align.shape[-1:])
        h_palign = F.layer_norm(h_palign, h_palign.shape[-1:])
        temb = self.time2(F.silu(self.time1(timestep_embedding(lam, self.width))))
        temb = temb + self.pool_proj(h_palign[:, 0])
        h = F.silu(self.conv_in(x) + temb[:, :, None, None])
        b, w, hh, ww = h.shape
        tokens = h.flatten(2).transpose(1, 2)
        q = self.q(self.norm(tokens))
        attn = torch.softmax(q @ self.k(h_align).transpose(1, 2) / math.sqrt(w), dim=-1)
        tokens = tokens + self.o(attn @ self.v(h_align))
        h = tokens.transpose(1, 2).reshape(b, w, hh, ww)
        h = h + self.conv_mid(F.silu(h))
        return self.conv_out(F.silu(h))


# ---------------------------------------------------------------------------
# the assembled frozen backbone
# ---------------------------------------------------------------------------


# output projections of each LM block are drawn at half scale: the residual stream
# still changes materially from layer to layer, but activations stay bounded
DEEP_SCALE = 0.5


class Backbone:
    """All frozen components, built deterministically from ``(profile, seed)``."""

    COMPONENTS = ("vision", "lm", "sd_text", "vae", "base_unet", "refiner_unet")

    def __init__(self, profile: ScaleProfile, seed: int, warmup_steps: int = 0):
        self.profile = profile
        self.seed = seed
        self.warmup_steps = warmup_steps
        L = profile.L
        deep = {f"blocks.{i}.{n}": DEEP_SCALE for i in range(L) for n in ("out.weight", "fc2.weight")}
        self.vision = _init_frozen(VisionEncoder(profile), seeded_rng(seed, "backbone/vision"))
        self.lm = _init_frozen(CausalLM(profile), seeded_rng(seed, "backbone/lm"), deep)
        with torch.no_grad():
            # token table at unit scale, like a trained embedding matrix
            self.lm.embed.weight.mul_(math.sqrt(profile.d_model))
        self.sd_text = _init_frozen(SDTextEncoder(profile), seeded_rng(seed, "backbone/sd_text"), {"queries": 2.0})
        with torch.no_grad():
            self.sd_text.embed.weight.mul_(math.sqrt(profile.d_sd))
        self.vae = _init_frozen(PatchVAE(profile), seeded_rng(seed, "backbone/vae"))
        # conditioning enters the denoisers as a modest perturbation of the trunk
        cond = {"o.weight": 0.1, "pool_proj.weight": 0.1}
        self.base_unet = _init_frozen(Denoiser(profile), seeded_rng(seed, "backbone/base_unet"), cond)
        self.refiner_unet = _init_frozen(Denoiser(profile), seeded_rng(seed, "backbone/refiner_unet"), cond)
        if warmup_steps:
            self._warm_up(warmup_steps)
        self._reference = self.checksums()

    def _warm_up(self, steps: int) -> None:
        key = (self.profile, self.seed, steps)
        if key not in _WARMUP_CACHE:
            _WARMUP_CACHE[key] = warm_up_denoisers(self, steps)
        for name, state in _WARMUP_CACHE[key].items():
            getattr(self, name).load_state_dict(state)

    def components(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name) for name in self.COMPONENTS}

    def checksums(self) -> dict[str, str]:
        return {name: module_checksum(m) for name, m in self.components().items()}

    @property
    def reference_checksums(self) -> dict[str, str]:
        return dict(self._reference)

    # -- encoders ----------------------------------------------------------

    def encode_vision(self, image: torch.Tensor) -> VisualFeature:
        pixels = _batched(image, 4, "image", self.profile.pixel_shape)
        with torch.no_grad():
            return VisualFeature(self.vision(pixels))

    def blank_image(self, batch: int = 1) -> torch.Tensor:
        return torch.zeros(batch, *self.profile.pixel_shape, dtype=DTYPE)

    def embed_image(self, image: torch.Tensor) -> torch.Tensor:
        pixels = _batched(image, 4, "image", self.profile.pixel_shape)
        with torch.no_grad():
            return self.vision.embed_image(pixels)

    def ids_tensor(self, texts: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        n = self.profile.length
        toks = [tokenize(t, n) for t in texts]
        ids = torch.tensor([pad_ids(t, n) for t in toks], dtype=torch.long)
        return ids, torch.tensor([len(t) for t in toks], dtype=torch.long)

    def encode_text(self, caption: str | list[str]) -> TextEmbedding:
        texts = [caption] if isinstance(caption, str) else list(caption)
        ids, n = self.ids_tensor(texts)
        with torch.no_grad():
            return TextEmbedding(self.lm.embed(ids), ids, n)

    def sd_text_encode(self, caption: str | list[str]) -> ReferenceEmbeddings:
        texts = [caption] if isinstance(caption, str) else list(caption)
        ids, _ = self.ids_tensor(texts)
        with torch.no_grad():
            return ReferenceEmbeddings(*self.sd_text(ids))

    # -- language model ------------------------------------------------------

    def window_ids(self, seqs: list[list[int]]) -> tuple[torch.Tensor, torch.Tensor]:
        """Last ``length`` tokens of each sequence, trailing-padded, plus the index of each final token."""
        n = self.profile.length
        windows = [s[-n:] for s in seqs]
        ids = torch.tensor([pad_ids(w, n) for w in windows], dtype=torch.long)
        last = torch.tensor([max(len(w) - 1, 0) for w in windows], dtype=torch.long)
        return ids, last

    def mllm_forward(
        self, e_text: TextEmbedding, f_image: VisualFeature, max_new: int
    ) -> tuple[list[TokenSequence], HiddenStack]:
        """Greedy-decode ``max_new`` tokens after each prompt.

        Once a sequence outgrows the fixed window the window slides, keeping
        the most recent ``length`` tokens. Returns the generated tokens per
        sample and the hidden stack of the final forward pass; its ``ids``
        hold the window that pass saw.
        """
        if e_text.values.shape[0] != f_image.values.shape[0]:
            raise InputError("text and image inputs disagree in batch size")
        seqs = [e_text.ids[b, : e_text.n_tokens[b]].tolist() for b in range(e_text.ids.shape[0])]
        generated: list[list[int]] = [[] for _ in seqs]
        lo, hi = PRINTABLE
        with torch.no_grad():
            for _ in range(max_new):
                ids, last = self.window_ids(seqs)
                top = self.lm.stack(ids, f_image.values).layers[-1]
                logits = self.lm.logits(top[torch.arange(len(seqs)), last])
                nxt = (logits[:, lo:hi].argmax(dim=-1) + lo).tolist()
                for b, tok in enumerate(nxt):
                    seqs[b].append(tok)
                    generated[b].append(tok)
            ids, _ = self.window_ids(seqs)
            stack = self.lm.stack(ids, f_image.values)
        stack.ids = ids
        return [TokenSequence(g) for g in generated], stack

    def stack_at(self, seq: list[int], end: int, f_image: VisualFeature) -> HiddenStack:
        """Hidden stack of the window of ``seq`` that ends just before index ``end``."""
        ids, _ = self.window_ids([seq[:end]])
        with torch.no_grad():
            stack = self.lm.stack(ids, f_image.values)
        stack.ids = ids
        return stack

    # -- diffusion ------------------------------------------------------------

    def vae_encode(self, image: torch.Tensor) -> LatentImage:
        pixels = _batched(image, 4, "image", self.profile.pixel_shape)
        with torch.no_grad():
            return LatentImage(self.vae.encode(pixels))

    def vae_decode(self, latent: LatentImage | torch.Tensor) -> torch.Tensor:
        values = latent.values if isinstance(latent, LatentImage) else latent
        values = _batched(values, 4, "latent", self.profile.latent_shape)
        with torch.no_grad():
            return self.vae.decode(values)

    def _check_lambda(self, lam, batch: int) -> torch.Tensor:
        lam = torch.as_tensor(lam, dtype=torch.long).reshape(-1)
        if lam.numel() == 1:
            lam = lam.expand(batch)
        if lam.numel() != batch:
            raise InputError(f"expected {batch} timesteps, got {lam.numel()}")
        if ((lam < 0) | (lam >= self.profile.T)).any():
            raise InputError(f"timestep outside [0, {self.profile.T}): {lam.tolist()}")
        return lam

    def _denoise(self, net: Denoiser, x, h_align, h_palign, lam) -> torch.Tensor:
        p = self.profile
        x = _batched(x, 4, "noised latent", p.latent_shape)
        h_align = _batched(h_align, 3, "h_align", (p.seq_sd, p.d_sd))
        h_palign = _batched(h_palign, 3, "h_palign", (1, p.d_pool))
        return net(x, h_align, h_palign, self._check_lambda(lam, x.shape[0]))

    def denoise_base(self, x_noised, h_align, h_palign, lam) -> torch.Tensor:
        return self._denoise(self.base_unet, x_noised, h_align, h_palign, lam)

    def denoise_refiner(self, x_noised, h_align, h_palign, lam) -> torch.Tensor:
        return self._denoise(self.refiner_unet, x_noised, h_align, h_palign, lam)


# ---------------------------------------------------------------------------
# denoiser warm-up
# ---------------------------------------------------------------------------

WARMUP_SAMPLES = 256
WARMUP_BATCH = 32
WARMUP_LR = 2e-3
WARMUP_BETAS = (1e-4, 0.3)
_WARMUP_CACHE: dict[tuple, dict[str, dict[str, torch.Tensor]]] = {}


def warmup_corpus(profile: ScaleProfile, seed: int, n: int = WARMUP_SAMPLES) -> tuple[torch.Tensor, list[str]]:
    """In-memory shapes images (n, 3, H, W) in [-1, 1] with their captions."""
    import numpy as np

    from .data import COLORS, SHAPES, make_caption, render_shape

    rng = np.random.default_rng(derive_seed(seed, "backbone/warmup_corpus"))
    names = list(COLORS)
    images, captions = [], []
    for _ in range(n):
        color, background = rng.choice(len(names), size=2, replace=False)
        shape = SHAPES[rng.integers(len(SHAPES))]
        im = render_shape(shape, names[color], names[background], profile.image_size, rng)
        images.append(torch.from_numpy(np.asarray(im, dtype=np.float64)).permute(2, 0, 1) / 127.5 - 1.0)
        captions.append(make_caption(names[color], shape, names[background]))
    return torch.stack(images).to(DTYPE), captions


def warm_up_denoisers(backbone: Backbone, steps: int) -> dict[str, dict[str, torch.Tensor]]:
    """Fit both denoisers to predict the injected noise, conditioned on the stub text encoder.

    Deterministic in ``(profile, seed, steps)``. Returns the fitted state dicts;
    the modules are left frozen and in eval mode.
    """
    images, captions = warmup_corpus(backbone.profile, backbone.seed)
    T = backbone.profile.T
    betas = torch.linspace(*WARMUP_BETAS, T, dtype=DTYPE)
    alpha_bars = torch.cumprod(1.0 - betas, dim=0)
    latents = backbone.vae_encode(images).values
    ref = backbone.sd_text_encode(captions)
    states = {}
    for name in ("base_unet", "refiner_unet"):
        net = getattr(backbone, name)
        gen = seeded_rng(backbone.seed, f"backbone/warmup/{name}")
        net.requires_grad_(True)
        net.train()
        opt = torch.optim.Adam(net.parameters(), lr=WARMUP_LR, foreach=False)
        for _ in range(steps):
            idx = torch.randint(0, len(captions), (WARMUP_BATCH,), generator=gen)
            lam = torch.randint(0, T, (WARMUP_BATCH,), generator=gen)
            noise = torch.randn(latents[idx].shape, generator=gen, dtype=DTYPE)
            ab = alpha_bars[lam].view(-1, 1, 1, 1)
            noised = ab.sqrt() * latents[idx] + (1.0 - ab).sqrt() * noise
            loss = (net(noised, ref.e_clip[idx], ref.e_pclip[idx], lam) - noise).pow(2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        net.requires_grad_(False)
        net.eval()
        states[name] = {k: v.detach().clone() for k, v in net.state_dict().items()}
    return states
