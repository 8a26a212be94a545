"""Video representation guidance: a global video embedding used as the prompt."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def sample_keyframes(video, n: int) -> list[int]:
    """Uniformly spaced frame indices; ``video`` may be an array or a frame count."""
    T = video if isinstance(video, int) else len(video)
    if not 1 <= n <= T:
        raise ValueError(f"need 1 <= n <= T, got n={n}, T={T}")
    if n == 1:
        return [(T - 1) // 2]
    idx = [math.floor(i * (T - 1) / (n - 1) + 0.5) for i in range(n)]
    return sorted(set(idx))


class FrameEncoder(nn.Module):
    """Strided conv stack producing ``tokens`` embeddings of width ``dim``."""

    def __init__(self, channels: int = 3, dim: int = 64, grid: int = 4):
        super().__init__()
        self.grid = grid
        self.net = nn.Sequential(
            nn.Conv2d(channels, 32, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(64, dim, 3, padding=1),
        )

    def forward(self, frames):
        # (N, H, W, C) -> (N, grid*grid, dim)
        x = self.net(frames.permute(0, 3, 1, 2))
        x = F.adaptive_avg_pool2d(x, self.grid)
        return x.flatten(2).transpose(1, 2)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int = 4, kv_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"heads={heads} must divide dim={dim}")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, queries, context):
        # queries (B, Lq, dim), context (B, Lk, kv_dim)
        B, Lq, D = queries.shape
        h = self.heads
        q = self.q(queries).view(B, Lq, h, D // h).transpose(1, 2)
        k = self.k(context).view(B, -1, h, D // h).transpose(1, 2)
        v = self.v(context).view(B, -1, h, D // h).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(D // h), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, Lq, D)
        return self.o(out)


class VRG(nn.Module):
    def __init__(self, channels: int = 3, dim: int = 64, n_queries: int = 4, n_text: int = 4,
                 heads: int = 4, grid: int = 4, n_keyframes: int = 5):
        super().__init__()
        self.n_keyframes = n_keyframes
        self.encoder = FrameEncoder(channels, dim, grid)
        self.queries = nn.Parameter(torch.randn(n_queries, dim))
        self.attn = CrossAttention(dim, heads)
        self.text = nn.Parameter(0.02 * torch.randn(n_text, dim))
        self.proj = nn.Linear(dim, dim)
        with torch.no_grad():
            self.proj.weight.copy_(torch.eye(dim))
            self.proj.bias.zero_()

    @property
    def dim(self) -> int:
        return self.queries.shape[1]

    def encode_frame(self, frame):
        """(H, W, C) -> (P, dim), or batched (N, H, W, C) -> (N, P, dim)."""
        if frame.ndim == 3:
            return self.encoder(frame.unsqueeze(0))[0]
        return self.encoder(frame)

    def fuse_video_embedding(self, embeddings):
        """Learnable queries attend over the concatenated keyframe tokens.

        ``embeddings`` is a list of (P, dim) tensors or a (B, N, P, dim) tensor.
        """
        if isinstance(embeddings, (list, tuple)):
            widths = {e.shape[-1] for e in embeddings}
            if widths != {self.dim}:
                raise ValueError(f"embedding widths {sorted(widths)} do not match {self.dim}")
            e_all = torch.cat(list(embeddings), dim=0).unsqueeze(0)
            return self.attn(self.queries.unsqueeze(0), e_all)[0]
        if embeddings.shape[-1] != self.dim:
            raise ValueError(f"embedding width {embeddings.shape[-1]} does not match {self.dim}")
        B = embeddings.shape[0]
        e_all = embeddings.reshape(B, -1, self.dim)
        q = self.queries.unsqueeze(0).expand(B, -1, -1)
        return self.attn(q, e_all)

    def build_condition(self, e_v):
        """Concatenate with the fixed text tokens along the token axis, project per token."""
        if e_v.shape[-1] != self.text.shape[-1]:
            raise ValueError("video and text embedding widths differ")
        text = self.text if e_v.ndim == 2 else self.text.unsqueeze(0).expand(e_v.shape[0], -1, -1)
        return self.proj(torch.cat([e_v, text], dim=-2))

    def fixed_condition(self, batch: int):
        """Video-independent prompt: the text tokens alone through the projector."""
        return self.proj(self.text).unsqueeze(0).expand(batch, -1, -1)

    def forward(self, i_l):
        """(B, K, H, W, C) keyframes -> (B, L_q + L_t, dim) condition."""
        B, K = i_l.shape[:2]
        idx = sample_keyframes(K, min(self.n_keyframes, K))
        frames = i_l[:, idx]
        tokens = self.encoder(frames.reshape(-1, *frames.shape[2:]))
        tokens = tokens.reshape(B, len(idx), *tokens.shape[1:])
        return self.build_condition(self.fuse_video_embedding(tokens))
