"""Cross-frame context aggregation.

Keyframes are propagated in both temporal directions along their flows,
intermediate frames are predicted from the raw and the two propagated videos,
and a small network fuses the three candidates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .flow import backward_warp, consistency_mask
from .video import ScaleFactors, resize_bilinear

AGGREGATION_MODES = ("interp", "flow2", "flow_multi")


@dataclass
class PropagatedVideos:
    i_l: torch.Tensor  # (K, H, W, C)
    i_f: torch.Tensor
    i_b: torch.Tensor
    masks_bwd: list  # mask used when building i_b[n] from i_b[n+1]
    masks_fwd: list  # mask used when building i_f[n+1] from i_f[n]


def _tensor(x):
    return torch.from_numpy(np.ascontiguousarray(x)) if isinstance(x, np.ndarray) else x


def propagate(i_l, flows_fwd, flows_bwd, eps: float = 0.5, force_mask: float | None = None) -> PropagatedVideos:
    """Backward and forward fused videos.

    ``flows_fwd[n]`` maps keyframe n to n+1 and ``flows_bwd[n]`` maps n+1 to n.
    ``force_mask`` replaces every validity mask with a constant (ablations).
    """
    i_l = _tensor(i_l)
    flows_fwd, flows_bwd = _tensor(flows_fwd), _tensor(flows_bwd)
    K = i_l.shape[0]
    if len(flows_fwd) != K - 1 or len(flows_bwd) != K - 1:
        raise ValueError(f"need {K - 1} flows per direction for {K} keyframes, got "
                         f"{len(flows_fwd)} and {len(flows_bwd)}")

    def mask(a, b):
        if force_mask is not None:
            return torch.full(a.shape[:-1], float(force_mask), dtype=i_l.dtype)
        return consistency_mask(a, b, eps).to(i_l.dtype)

    back = [None] * K
    back[K - 1] = i_l[K - 1]
    masks_bwd = [None] * (K - 1)
    for n in range(K - 2, -1, -1):
        m = mask(flows_fwd[n], flows_bwd[n])
        masks_bwd[n] = m
        m = m.unsqueeze(-1)
        back[n] = backward_warp(back[n + 1], flows_fwd[n]) * m + i_l[n] * (1 - m)

    fore = [None] * K
    fore[0] = i_l[0]
    masks_fwd = [None] * (K - 1)
    for n in range(1, K):
        m = mask(flows_bwd[n - 1], flows_fwd[n - 1])
        masks_fwd[n - 1] = m
        m = m.unsqueeze(-1)
        fore[n] = backward_warp(fore[n - 1], flows_bwd[n - 1]) * m + i_l[n] * (1 - m)

    return PropagatedVideos(i_l, torch.stack(fore), torch.stack(back), masks_bwd, masks_fwd)


def intermediate_flows(flow_fwd_m, flow_bwd_m, tau: float):
    """Linear-motion flows from the intermediate frame to keyframes m and m+1."""
    to_m = tau * _tensor(flow_bwd_m)
    to_m1 = (1.0 - tau) * _tensor(flow_fwd_m)
    return to_m, to_m1


def predict_intermediate(videos: PropagatedVideos, m: int, tau: float, key_flows, sources=("l", "f", "b")) -> dict:
    """Candidate intermediate frames at fraction ``tau`` between keyframes m, m+1.

    ``key_flows`` is ``(F^{m->m+1}, F^{m+1->m})``. The fusion map is the
    constant ``1 - tau`` (weight of keyframe m).
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    K = videos.i_l.shape[0]
    if not 0 <= m < K - 1:
        raise ValueError(f"left keyframe {m} out of range for {K} keyframes")
    to_m, to_m1 = intermediate_flows(key_flows[0], key_flows[1], tau)
    s = 1.0 - tau
    out = {}
    for alpha in sources:
        video = {"l": videos.i_l, "f": videos.i_f, "b": videos.i_b}[alpha]
        out[alpha] = (1 - s) * backward_warp(video[m + 1], to_m1) + s * backward_warp(video[m], to_m)
    return out


def linear_intermediate(i_l, m: int, tau: float):
    i_l = _tensor(i_l)
    return (1.0 - tau) * i_l[m] + tau * i_l[m + 1]


class FusionNet(nn.Module):
    """Three candidates in, one frame out; residual around their mean."""

    def __init__(self, channels: int = 3, hidden: int = 16):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3 * channels, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, channels, 3, padding=1),
        )
        nn.init.zeros_(self.body[-1].weight)
        nn.init.zeros_(self.body[-1].bias)

    def forward(self, cand_l, cand_f, cand_b):
        # (..., H, W, C) channel-last in and out
        lead = cand_l.shape[:-3]
        H, W, C = cand_l.shape[-3:]
        stack = torch.cat([cand_l, cand_f, cand_b], dim=-1).reshape(-1, H, W, 3 * C)
        resid = self.body(stack.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        out = (cand_l + cand_f + cand_b) / 3.0 + resid.reshape(*lead, H, W, C)
        if not self.training:
            out = out.clamp(0.0, 1.0)
        return out


def fuse_triplet(params: FusionNet, cand_l, cand_f, cand_b):
    return params(cand_l, cand_f, cand_b)


def intermediate_schedule(K: int, phi_t: int):
    """(m, tau) for every intermediate frame, in temporal order."""
    return [(m, j / phi_t) for m in range(K - 1) for j in range(1, phi_t)]


def assemble_intermediate_video(i_l, intermediates, scales: ScaleFactors):
    """Interleave keyframes with intermediates, then upsample by phi_s."""
    i_l = _tensor(i_l)
    K = i_l.shape[0]
    need = (K - 1) * (scales.phi_t - 1)
    if len(intermediates) != need:
        raise ValueError(f"expected {need} intermediate frames, got {len(intermediates)}")
    frames = []
    it = iter(intermediates)
    for m in range(K):
        frames.append(i_l[m])
        if m < K - 1:
            frames.extend(next(it) for _ in range(scales.phi_t - 1))
    video = torch.stack(frames)
    H, W = video.shape[-3:-1]
    return resize_bilinear(video, H * scales.phi_s, W * scales.phi_s)


def aggregate(i_l, flows_fwd, flows_bwd, fusion: FusionNet | None, scales: ScaleFactors,
              mode: str = "flow_multi", eps: float = 0.5):
    """Build the upsampled intermediate video for one clip.

    ``interp`` blends neighbouring keyframes linearly, ``flow2`` warps only the
    two neighbouring input keyframes, ``flow_multi`` adds the propagated videos.
    All arms pass their candidates through the same fusion network, so they
    share its capacity. With ``fusion=None`` candidates are averaged.
    """
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    i_l = _tensor(i_l)
    flows_fwd, flows_bwd = _tensor(flows_fwd), _tensor(flows_bwd)
    K = i_l.shape[0]
    sched = intermediate_schedule(K, scales.phi_t)
    if not sched:
        return assemble_intermediate_video(i_l, [], scales)

    with torch.no_grad():
        if mode == "flow_multi":
            videos = propagate(i_l, flows_fwd, flows_bwd, eps)
        else:
            videos = PropagatedVideos(i_l, i_l, i_l, [], [])
        cands = {"l": [], "f": [], "b": []}
        for m, tau in sched:
            if mode == "interp":
                c = linear_intermediate(i_l, m, tau)
                trip = {"l": c, "f": c, "b": c}
            elif mode == "flow2":
                c = predict_intermediate(videos, m, tau, (flows_fwd[m], flows_bwd[m]), sources=("l",))["l"]
                trip = {"l": c, "f": c, "b": c}
            else:
                trip = predict_intermediate(videos, m, tau, (flows_fwd[m], flows_bwd[m]))
            for k in cands:
                cands[k].append(trip[k])
        stacked = {k: torch.stack(v) for k, v in cands.items()}
    if fusion is None:
        fused = (stacked["l"] + stacked["f"] + stacked["b"]) / 3.0
    else:
        fused = fuse_triplet(fusion, stacked["l"], stacked["f"], stacked["b"])
    return assemble_intermediate_video(i_l, list(fused.unbind(0)), scales)
