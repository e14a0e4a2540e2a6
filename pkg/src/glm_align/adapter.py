"""The trainable adapter from LM hidden states to diffusion conditioning.

A learned bank of ``seq_sd`` queries attends over one hidden layer of the
language model through a stack of cross-attention layers. The shared trunk
output feeds two heads: an FFN producing the sequence embedding ``h_align``
and a mean-pool followed by an FFN producing the pooled embedding ``h_palign``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import DTYPE
from .config import RunConfig, ScaleProfile, seeded_rng
from .errors import InputError, NumericError

log = logging.getLogger(__name__)


@dataclass
class AlignedEmbeddings:
    h_align: torch.Tensor  # (b, seq_sd, d_sd)
    h_palign: torch.Tensor  # (b, 1, d_pool)
    source_layer: int


@dataclass
class AttentionResult:
    output: torch.Tensor  # query + W_O(pre_residual)
    pre_residual: torch.Tensor  # softmax(QK^T / sqrt(dim)) V, heads concatenated
    weights: torch.Tensor  # (b, heads, n_query, n_key)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention over the last two axes; ``dim`` is the head width."""
    weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
    return weights @ v, weights


class CrossAttentionLayer(nn.Module):
    def __init__(self, d_q: int, d_ctx: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm = nn.LayerNorm(d_q, dtype=DTYPE)
        self.W_Q = nn.Linear(d_q, d_q, bias=False, dtype=DTYPE)
        self.W_K = nn.Linear(d_ctx, d_q, bias=False, dtype=DTYPE)
        self.W_V = nn.Linear(d_ctx, d_q, bias=False, dtype=DTYPE)
        self.W_O = nn.Linear(d_q, d_q, dtype=DTYPE)
        self.ff_norm = nn.LayerNorm(d_q, dtype=DTYPE)
        self.ff1 = nn.Linear(d_q, 4 * d_q, dtype=DTYPE)
        self.ff2 = nn.Linear(4 * d_q, d_q, dtype=DTYPE)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        return x.view(b, n, self.n_heads, d // self.n_heads).transpose(1, 2)

    def attend(self, query: torch.Tensor, context: torch.Tensor) -> AttentionResult:
        q = self._heads(self.W_Q(self.norm(query)))
        k = self._heads(self.W_K(context))
        v = self._heads(self.W_V(context))
        out, weights = attention(q, k, v)
        b, _, n, _ = out.shape
        pre = out.transpose(1, 2).reshape(b, n, -1)
        return AttentionResult(query + self.W_O(pre), pre, weights)

    def forward(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        x = self.attend(query, context).output
        return x + self.ff2(F.gelu(self.ff1(self.ff_norm(x))))


class GLMAdapter(nn.Module):
    def __init__(self, profile: ScaleProfile, n_layers: int = 4, d_q: int = 64, n_heads: int = 4, seed: int = 0):
        super().__init__()
        self.profile = profile
        self.query_bank = nn.Parameter(torch.zeros(profile.seq_sd, d_q, dtype=DTYPE))
        self.layers = nn.ModuleList(CrossAttentionLayer(d_q, profile.d_model, n_heads) for _ in range(n_layers))
        self.ffn_head = nn.Sequential(
            nn.LayerNorm(d_q, dtype=DTYPE),
            nn.Linear(d_q, 2 * d_q, dtype=DTYPE),
            nn.GELU(),
            nn.Linear(2 * d_q, profile.d_sd, dtype=DTYPE),
        )
        self.pool_head = nn.Sequential(
            nn.LayerNorm(d_q, dtype=DTYPE),
            nn.Linear(d_q, 2 * d_q, dtype=DTYPE),
            nn.GELU(),
            nn.Linear(2 * d_q, profile.d_pool, dtype=DTYPE),
        )
        self.reset_parameters(seed)
        self.n_params = sum(p.numel() for p in self.parameters())
        log.info("adapter parameters: %d", self.n_params)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> GLMAdapter:
        return cls(cfg.profile, cfg.n_adapter_layers, cfg.adapter_dim, cfg.n_heads, cfg.seed)

    def reset_parameters(self, seed: int):
        g = seeded_rng(seed, "adapter/init")
        with torch.no_grad():
            self.query_bank.copy_(torch.randn(self.query_bank.shape, generator=g, dtype=DTYPE) * 0.02)
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    fan_in = module.weight.shape[1]
                    module.weight.copy_(torch.randn(module.weight.shape, generator=g, dtype=DTYPE) / math.sqrt(fan_in))
                    if module.bias is not None:
                        module.bias.zero_()

    def trunk(self, h: torch.Tensor) -> torch.Tensor:
        x = self.query_bank.expand(h.shape[0], -1, -1)
        for layer in self.layers:
            x = layer(x, h)
        return x

    def forward(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.trunk(h)
        return self.ffn_head(x), self.pool_head(x.mean(dim=1, keepdim=True))


def cross_attention_layer(
    adapter: GLMAdapter, query: torch.Tensor, context: torch.Tensor, layer_index: int
) -> AttentionResult:
    """Run attention layer ``layer_index`` of ``adapter`` (without its feed-forward sublayer)."""
    if not 0 <= layer_index < len(adapter.layers):
        raise InputError(f"layer_index {layer_index} outside [0, {len(adapter.layers)})")
    layer = adapter.layers[layer_index]
    squeeze = query.dim() == 2
    query = query.unsqueeze(0) if squeeze else query
    context = context.unsqueeze(0) if context.dim() == 2 else context
    if query.shape[-1] != layer.W_Q.in_features or context.shape[-1] != layer.W_K.in_features:
        raise InputError(
            f"query/context widths {query.shape[-1]}/{context.shape[-1]} do not match "
            f"{layer.W_Q.in_features}/{layer.W_K.in_features}"
        )
    res = layer.attend(query.to(DTYPE), context.to(DTYPE))
    if squeeze:
        return AttentionResult(res.output[0], res.pre_residual[0], res.weights[0])
    return res


def adapter_forward(h: torch.Tensor, adapter: GLMAdapter, source_layer: int = -1) -> AlignedEmbeddings:
    p = adapter.profile
    if h.dim() == 2:
        h = h.unsqueeze(0)
    if h.dim() != 3 or h.shape[-1] != p.d_model:
        raise InputError(f"hidden layer must be (b, length, {p.d_model}), got {tuple(h.shape)}")
    if not torch.isfinite(h).all():
        raise NumericError("non-finite values in adapter input")
    h_align, h_palign = adapter(h.to(DTYPE))
    return AlignedEmbeddings(h_align, h_palign, source_layer if source_layer >= 0 else p.L)


def adapter_gradients(loss: torch.Tensor, adapter: GLMAdapter, retain_graph: bool = False) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients for every adapter parameter; unused blocks get exact zeros."""
    names, params = zip(*adapter.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=retain_graph)
    return {n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, params, grads)}
