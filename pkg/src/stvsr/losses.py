"""Training objective: latent MSE, pixel MSE, feature distance, temporal consistency."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .flow import backward_warp


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


@dataclass(frozen=True)
class LossWeights:
    gamma_consis: float = 0.1
    latent: float = 1.0
    rec: float = 1.0
    perc: float = 1.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {k} must be finite and >= 0, got {v}")


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def latent_loss(z_st, z_h):
    _check_shapes(z_st, z_h)
    return ((z_st - z_h) ** 2).mean()


class RandomFeatures(nn.Module):
    """Frozen, seeded multi-scale conv features standing in for a learned
    perceptual network. Distances use channel-normalized activations."""

    def __init__(self, channels: int = 3, widths=(8, 16, 32), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.seed = seed
        layers = []
        c_in = channels
        for w in widths:
            conv = nn.Conv2d(c_in, w, 3, padding=1)
            with torch.no_grad():
                conv.weight.normal_(0.0, math.sqrt(2.0 / (c_in * 9)), generator=gen)
                conv.bias.uniform_(-0.1, 0.1, generator=gen)
            layers.append(conv)
            c_in = w
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def features(self, frames):
        # (N, H, W, C) -> list of (N, D, h, w), channel-normalized
        x = frames.permute(0, 3, 1, 2) * 2.0 - 1.0
        feats = []
        for i, conv in enumerate(self.layers):
            if i:
                x = F.avg_pool2d(x, 2) if min(x.shape[-2:]) >= 2 else x
            x = torch.tanh(conv(x))
            feats.append(x / torch.sqrt((x ** 2).sum(dim=1, keepdim=True) + 1e-10))
        return feats

    def distance(self, a, b):
        """Per-frame distance, ``(..., H, W, C)`` pairs -> ``(...)``."""
        _check_shapes(a, b)
        lead = a.shape[:-3]
        fa = self.features(a.reshape(-1, *a.shape[-3:]))
        fb = self.features(b.reshape(-1, *b.shape[-3:]))
        per_scale = [((x - y) ** 2).sum(dim=1).mean(dim=(1, 2)) for x, y in zip(fa, fb)]
        return torch.stack(per_scale).mean(dim=0).reshape(lead)


_FEATURES: dict = {}


def feature_net(channels: int = 3, seed: int = 0, dtype=torch.float32) -> RandomFeatures:
    """Shared frozen feature network, one instance per (channels, seed, dtype)."""
    key = (channels, seed, dtype)
    if key not in _FEATURES:
        _FEATURES[key] = RandomFeatures(channels, seed=seed).to(dtype)
    return _FEATURES[key]


def pixel_losses(i_st, i_h, features: RandomFeatures | None = None):
    """(reconstruction MSE, mean feature distance)."""
    _check_shapes(i_st, i_h)
    features = features or feature_net(i_st.shape[-1], dtype=i_st.dtype)
    rec = ((i_st - i_h) ** 2).mean()
    perc = features.distance(i_st, i_h).mean()
    return rec, perc


def temporal_consistency_loss(i_st, flows_fwd, flows_bwd):
    """Bidirectional warp L1 between neighbouring frames.

    ``flows_fwd[i]`` maps frame i to i+1, so warping frame i+1 with it aligns
    to frame i; ``flows_bwd[i]`` aligns frame i onto frame i+1. Each direction
    contributes its per-element mean over all pairs.
    """
    T = i_st.shape[-4]
    if flows_fwd.shape[-4] != T - 1 or flows_bwd.shape[-4] != T - 1:
        raise ValueError(f"need {T - 1} flows per direction, got {flows_fwd.shape[-4]}, {flows_bwd.shape[-4]}")
    nxt = i_st[..., 1:, :, :, :]
    prev = i_st[..., :-1, :, :, :]
    to_prev = backward_warp(nxt, flows_fwd)
    to_next = backward_warp(prev, flows_bwd)
    return (to_prev - prev).abs().mean() + (to_next - nxt).abs().mean()


def total_loss(parts: dict, weights: LossWeights = LossWeights()):
    for name, value in parts.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
    return (weights.latent * parts["latent"] + weights.rec * parts["rec"]
            + weights.perc * parts["perc"] + weights.gamma_consis * parts["consis"])
