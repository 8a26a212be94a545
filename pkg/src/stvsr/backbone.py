"""Tiny latent backbone: conv VAE, flow-matching velocity net, one-step sampler.

Public tensors are channel-last: videos ``(B, T, H, W, C)`` and latents
``(B, T, H/r, W/r, C_z)``. Unbatched inputs (without ``B``) are accepted too.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .vrg import CrossAttention


@dataclass(frozen=True)
class NoiseSchedule:
    t_max: int = 1000

    def check(self, t) -> None:
        if not 0 <= t <= self.t_max:
            raise ValueError(f"timestep {t} outside [0, {self.t_max}]")

    def sigma(self, t) -> float:
        self.check(t)
        return t / self.t_max


def _frames(x):
    # (B, T, H, W, C) -> (B*T, C, H, W)
    B, T, H, W, C = x.shape
    return x.reshape(B * T, H, W, C).permute(0, 3, 1, 2), (B, T)


def _unframes(y, bt):
    B, T = bt
    y = y.permute(0, 2, 3, 1)
    return y.reshape(B, T, *y.shape[1:])


def _batched(fn):
    def wrapper(self, x, *args, **kwargs):
        if x.ndim == 4:
            return fn(self, x.unsqueeze(0), *args, **kwargs)[0]
        return fn(self, x, *args, **kwargs)
    wrapper.__doc__ = fn.__doc__
    wrapper.__name__ = fn.__name__
    return wrapper


class TinyVAE(nn.Module):
    """Deterministic conv autoencoder, spatial stride 4, no temporal compression.

    The first ``channels`` latent channels hold the 4x4 area average of the
    frame and the decoder adds a learned residual to their bilinear upsample,
    so an untrained decoder already reproduces a blurred frame.
    """

    stride = 4

    def __init__(self, channels: int = 3, latent: int = 8, width: int = 32):
        super().__init__()
        if latent <= channels:
            raise ValueError(f"latent channels ({latent}) must exceed image channels ({channels})")
        self.channels = channels
        self.enc = nn.Sequential(
            nn.Conv2d(channels, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, latent - channels, 3, padding=1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(latent, width, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, channels, 3, padding=1),
        )
        nn.init.zeros_(self.dec[-1].weight)
        nn.init.zeros_(self.dec[-1].bias)

    @_batched
    def encode(self, video):
        H, W = video.shape[2:4]
        if H % self.stride or W % self.stride:
            raise ValueError(f"frame size {H}x{W} not divisible by stride {self.stride}")
        x, bt = _frames(video)
        return _unframes(torch.cat([F.avg_pool2d(x, self.stride), self.enc(x)], dim=1), bt)

    @_batched
    def decode(self, z, clamp: bool = True):
        x, bt = _frames(z)
        base = F.interpolate(x[:, :self.channels], scale_factor=self.stride, mode="bilinear", align_corners=False)
        out = _unframes(base + self.dec(x), bt)
        return out.clamp(0.0, 1.0) if clamp else out


def timestep_embedding(t, dim: int, dtype=torch.float32):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = float(t) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)]).to(dtype)


class ResBlock(nn.Module):
    def __init__(self, width: int, cond_dim: int, heads: int = 4, temporal: bool = False):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.time = nn.Linear(width, width)
        self.norm = nn.LayerNorm(width)
        self.attn = CrossAttention(width, heads, kv_dim=cond_dim)
        self.temporal = nn.Conv1d(width, width, 3, padding=1) if temporal else None

    def forward(self, h, temb, c, bt):
        # h: (B*T, width, H, W)
        x = F.silu(self.conv1(h)) + self.time(temb)[None, :, None, None]
        h = h + self.conv2(x)
        B, T = bt
        N, D, H, W = h.shape
        tokens = h.reshape(B, T, D, H * W).permute(0, 1, 3, 2).reshape(B, T * H * W, D)
        tokens = tokens + self.attn(self.norm(tokens), c)
        if self.temporal is not None:
            seq = tokens.reshape(B, T, H * W, D).permute(0, 2, 3, 1).reshape(B * H * W, D, T)
            seq = seq + self.temporal(F.silu(seq))
            tokens = seq.reshape(B, H * W, D, T).permute(0, 3, 1, 2).reshape(B, T * H * W, D)
        return tokens.reshape(B, T, H * W, D).permute(0, 1, 3, 2).reshape(N, D, H, W)


class VelocityNet(nn.Module):
    """Predicts a latent velocity from ``(z, t, c)``; zero output at init."""

    def __init__(self, latent: int = 8, width: int = 64, cond_dim: int = 64, blocks: int = 4,
                 heads: int = 4, schedule: NoiseSchedule = NoiseSchedule()):
        super().__init__()
        self.schedule = schedule
        self.width = width
        self.inp = nn.Conv2d(latent, width, 3, padding=1)
        self.temb = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        self.blocks = nn.ModuleList(
            ResBlock(width, cond_dim, heads, temporal=(i == blocks // 2)) for i in range(blocks)
        )
        self.out = nn.Conv2d(width, latent, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @_batched
    def forward(self, z, t, c):
        self.schedule.check(t)
        if c.ndim == 2:
            c = c.unsqueeze(0).expand(z.shape[0], -1, -1)
        x, bt = _frames(z)
        temb = self.temb(timestep_embedding(t, self.width, z.dtype))
        h = self.inp(x)
        for block in self.blocks:
            h = block(h, temb, c, bt)
        return _unframes(self.out(F.silu(h)), bt)


def velocity_forward(params: VelocityNet, z, t, c):
    return params(z, t, c)


def one_step_sample(params, z, t, c, schedule: NoiseSchedule | None = None):
    """A single Euler step of the flow ODE: ``z - sigma(t) * V(z, t, c)``.

    ``params`` is a :class:`VelocityNet` or any callable ``(z, t, c) -> v``.
    """
    schedule = schedule or getattr(params, "schedule", NoiseSchedule())
    sigma = schedule.sigma(t)
    return z - sigma * params(z, t, c)
