"""Stub-featured FID and CLIP-score analogues, and the hidden-layer sweep probe.

The features come from the frozen vision stub, not Inception or CLIP, so the
numbers are only meaningful relative to each other (regression checks,
before/after comparisons). They are not comparable to published FID/CLIP values.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .adapter import adapter_forward
from .errors import InputError, NumericError
from .inference import Pipeline, Round, TaskKind, select_layers
from .training import loss_align

PSD_TOL = 1e-8


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def feature_stats(features) -> FeatureStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise InputError(f"features must be a 2-D (n, dim) array, got shape {x.shape}")
    if x.shape[0] < 2:
        raise InputError(f"need at least 2 feature vectors, got {x.shape[0]}")
    return FeatureStats(x.mean(axis=0), np.cov(x, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1]), x.shape[0])


def merge_stats(a: FeatureStats, b: FeatureStats) -> FeatureStats:
    """Combine stats of two disjoint sample sets (parallel-axis / Chan update)."""
    if a.dim != b.dim:
        raise InputError(f"dimension mismatch {a.dim} vs {b.dim}")
    n = a.count + b.count
    delta = b.mean - a.mean
    mean = a.mean + delta * (b.count / n)
    scatter = (a.count - 1) * a.cov + (b.count - 1) * b.cov + np.outer(delta, delta) * (a.count * b.count / n)
    return FeatureStats(mean, scatter / (n - 1), n)


def sqrt_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric square root via eigendecomposition; small negative eigenvalues are clamped."""
    m = (m + m.T) / 2.0
    w, v = np.linalg.eigh(m)
    tol = PSD_TOL * max(1.0, float(np.abs(w).max(initial=0.0)))
    if (w < -tol).any():
        raise NumericError(f"matrix is not positive semidefinite (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    tr((S_a S_b)^(1/2)) is evaluated as tr((A S_b A)^(1/2)) with A = S_a^(1/2),
    which is similar to S_a S_b but symmetric.
    """
    if a.dim != b.dim:
        raise InputError(f"dimension mismatch {a.dim} vs {b.dim}")
    root_a = sqrt_psd(a.cov)
    cross = sqrt_psd(root_a @ b.cov @ root_a)
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))


def clip_style_score(img_feat, txt_feat) -> float:
    u = np.asarray(img_feat, dtype=np.float64).ravel()
    v = np.asarray(txt_feat, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise InputError(f"dimension mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise InputError("zero vector has no direction")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def image_features(pipeline: Pipeline, images: list[torch.Tensor]) -> np.ndarray:
    return pipeline.backbone.embed_image(torch.stack(images)).numpy()


def text_features(pipeline: Pipeline, captions: list[str]) -> np.ndarray:
    return pipeline.backbone.sd_text_encode(captions).e_pclip[:, 0].numpy()


def evaluate_sets(pipeline: Pipeline, generated, reference) -> dict:
    """``generated``/``reference``: lists of (image, caption). Returns fid_stub, clip_stub_mean, n."""
    gen_feats = image_features(pipeline, [img for img, _ in generated])
    ref_feats = image_features(pipeline, [img for img, _ in reference])
    txt = text_features(pipeline, [cap for _, cap in generated])
    fid = frechet_distance(feature_stats(gen_feats), feature_stats(ref_feats))
    clip = float(np.mean([clip_style_score(u, v) for u, v in zip(gen_feats, txt)]))
    return {"fid_stub": fid, "clip_stub_mean": clip, "n": len(generated)}


# ---------------------------------------------------------------------------
# layer sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepEntry:
    offset: int
    layer: int
    l_align: float
    latent: torch.Tensor
    pixels: torch.Tensor


@dataclass
class SweepReport:
    prompt: str
    entries: list[SweepEntry]

    def table(self) -> str:
        lines = ["offset\tlayer\tl_align"]
        lines += [f"{e.offset}\t{e.layer}\t{e.l_align!r}" for e in self.entries]
        return "\n".join(lines) + "\n"


def layer_sweep(prompt: str, offsets, pipeline: Pipeline) -> SweepReport:
    """Feed h_{L-k} to the refiner path for each offset k (gate 1), on the same path and seed as t2i."""
    offsets = list(offsets)
    L = pipeline.cfg.profile.L
    if len(set(offsets)) != len(offsets):
        raise InputError(f"offsets must be distinct: {offsets}")
    for k in offsets:
        if not 0 <= k <= L:
            raise InputError(f"offset {k} invalid for L={L} (need 0 <= k <= L)")
    result = pipeline.run_round(Round(prompt))
    ref = pipeline.backbone.sd_text_encode(result.user)
    base_layer, _ = select_layers(TaskKind.text_to_image, L)
    entries = []
    for k in offsets:
        layer = L - k
        with torch.no_grad():
            l_align = loss_align(adapter_forward(result.stack[layer], pipeline.adapter, layer), ref).item()
        latent, pixels = pipeline.render(result.stack, base_layer, layer, 1.0, pipeline.image_rng(0))
        entries.append(SweepEntry(k, layer, l_align, latent.values, pixels))
    return SweepReport(prompt, entries)
