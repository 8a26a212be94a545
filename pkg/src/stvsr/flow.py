"""Optical flow: block-matching estimation, backward warping, validity masks.

A flow field is ``(..., H, W, 2)`` holding ``(dx, dy)`` pixel displacements
that map each pixel of the source frame to a position in the target frame.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import maximum_filter, uniform_filter


@dataclass(frozen=True)
class FlowEstimatorConfig:
    method: str = "block_match"  # or "injected_truth"
    block: int = 5
    search_radius: int = 2
    levels: int = 3
    refine: int = 3  # per-pixel support window of the final boundary pass; 0 disables it

    def __post_init__(self):
        if self.method not in ("block_match", "injected_truth"):
            raise ValueError(f"unknown flow method {self.method!r}")
        if self.block < 1 or self.search_radius < 0 or self.levels < 1 or self.refine < 0:
            raise ValueError("need block >= 1, search_radius >= 0, levels >= 1, refine >= 0")

    def fingerprint(self) -> str:
        if self.method == "injected_truth":
            return "flow=injected_truth"
        return (f"flow=block_match,block={self.block},radius={self.search_radius},levels={self.levels},"
                f"refine={self.refine}")


def _as_tensor(x):
    if isinstance(x, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(x)), True
    return x, False


def backward_warp(frame, flow):
    """Sample ``frame`` at ``x + flow(x)`` with bilinear weights, border clamped.

    ``frame`` is ``(..., H, W, C)`` and ``flow`` is ``(..., H, W, 2)`` with
    matching leading dims (or broadcastable ones). Works on numpy arrays and on
    torch tensors, where it is differentiable in both arguments.
    """
    f, is_np = _as_tensor(frame)
    fl, _ = _as_tensor(flow)
    if f.shape[-3:-1] != fl.shape[-3:-1] or fl.shape[-1] != 2:
        raise ValueError(f"frame {tuple(f.shape)} and flow {tuple(fl.shape)} disagree")
    H, W = f.shape[-3], f.shape[-2]
    fl = fl.to(f.dtype)
    lead = torch.broadcast_shapes(f.shape[:-3], fl.shape[:-3])
    f = f.expand(*lead, *f.shape[-3:])
    fl = fl.expand(*lead, *fl.shape[-3:])

    ys = torch.arange(H, dtype=f.dtype).view(H, 1)
    xs = torch.arange(W, dtype=f.dtype).view(1, W)
    px = (xs + fl[..., 0]).clamp(0, W - 1)
    py = (ys + fl[..., 1]).clamp(0, H - 1)
    x0 = px.detach().floor().long()
    y0 = py.detach().floor().long()
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)
    wx = (px - x0.to(f.dtype)).unsqueeze(-1)
    wy = (py - y0.to(f.dtype)).unsqueeze(-1)

    C = f.shape[-1]
    flat = f.reshape(*lead, H * W, C)

    def gather(yi, xi):
        idx = (yi * W + xi).reshape(*lead, H * W, 1).expand(*lead, H * W, C)
        return torch.gather(flat, -2, idx).reshape(*lead, H, W, C)

    top = gather(y0, x0) + wx * (gather(y0, x1) - gather(y0, x0))
    bot = gather(y1, x0) + wx * (gather(y1, x1) - gather(y1, x0))
    out = top + wy * (bot - top)
    return out.numpy() if is_np else out


def consistency_mask(f_fwd, f_bwd, eps: float = 0.5):
    """1 where ``f_fwd(x) + f_bwd(x + f_fwd(x))`` has norm <= eps, else 0."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    a, is_np = _as_tensor(f_fwd)
    b, _ = _as_tensor(f_bwd)
    if a.shape != b.shape:
        raise ValueError(f"flow shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    back = backward_warp(b, a)
    err = torch.linalg.vector_norm(a + back, dim=-1)
    mask = (err <= eps).to(a.dtype)
    return mask.numpy() if is_np else mask


def _area_down2(x: np.ndarray) -> np.ndarray:
    H, W = x.shape[:2]
    h, w = max(H // 2, 1), max(W // 2, 1)
    if H < 2 or W < 2:
        return x.copy()
    x = x[: 2 * h, : 2 * w]
    return x.reshape(h, 2, w, 2, -1).mean(axis=(1, 3))


def _candidate_offsets(radius: int) -> list[tuple[int, int]]:
    # order defines the tie-break: smallest magnitude, then (dy, dx)
    offs = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    offs.sort(key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1]))
    return offs


def _candidates(guess: np.ndarray, radius: int, max_centres: int) -> list[tuple[int, int]]:
    """Absolute (dy, dx) displacements to test at one level.

    Every pixel is tried against a window around zero and around each of the
    most frequent coarse-level guesses, so an aliased guess at one pixel is
    corrected by the motion found elsewhere. Order defines the tie-break.
    """
    vecs, counts = np.unique(guess.reshape(-1, 2), axis=0, return_counts=True)
    centres = {(0, 0)}
    for i in np.argsort(-counts, kind="stable")[:max_centres]:
        centres.add((int(vecs[i, 1]), int(vecs[i, 0])))
    cands = {(cy + dy, cx + dx) for cy, cx in centres for dy, dx in _candidate_offsets(radius)}
    return sorted(cands, key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1]))


def _match_level(a: np.ndarray, b: np.ndarray, guess: np.ndarray, block: int, radius: int,
                 max_centres: int = 8) -> np.ndarray:
    cands = _candidates(guess, radius, max_centres)
    best_cost = np.full(a.shape[:2], np.inf)
    best = np.zeros(a.shape[:2], dtype=np.int64)
    for i, (dy, dx) in enumerate(cands):
        # block sums of equal content are equal up to rounding, hence the quantized costs
        cost = _shifted_cost(a, b, dy, dx, block)
        better = cost < best_cost
        best_cost[better] = cost[better]
        best[better] = i
    arr = np.array([(dx, dy) for dy, dx in cands], dtype=np.int64)
    return arr[best]


def _shifted_cost(a, b, dy, dx, size):
    H, W = a.shape[:2]
    ys, xs = np.mgrid[0:H, 0:W]
    sad = np.abs(a - b[np.clip(ys + dy, 0, H - 1), np.clip(xs + dx, 0, W - 1)]).sum(axis=-1)
    return np.round(uniform_filter(sad, size=size, mode="nearest") * size * size, 9)


def _refine_boundaries(a, b, flow, block: int, size: int) -> np.ndarray:
    """Let each pixel adopt a vector found within one block of it if that fits strictly better.

    Block costs smear a moving object's vector over neighbouring background;
    re-scoring with a smaller window pulls those pixels back. Ties keep the
    block estimate so flat interiors are left alone.
    """
    vecs = np.unique(flow.reshape(-1, 2), axis=0)
    if len(vecs) < 2:
        return flow
    order = sorted(((int(v[1]), int(v[0])) for v in vecs), key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1]))
    costs = {d: _shifted_cost(a, b, d[0], d[1], size) for d in order}
    best_cost = np.zeros(flow.shape[:2])
    for (dy, dx), c in costs.items():
        own = (flow[..., 0] == dx) & (flow[..., 1] == dy)
        best_cost[own] = c[own]
    out = flow.copy()
    for dy, dx in order:
        near = maximum_filter(((flow[..., 0] == dx) & (flow[..., 1] == dy)).astype(np.uint8), size=block, mode="nearest")
        better = (near > 0) & (costs[(dy, dx)] < best_cost)
        best_cost[better] = costs[(dy, dx)][better]
        out[better] = (dx, dy)
    return out


def estimate_flow(a: np.ndarray, b: np.ndarray, cfg: FlowEstimatorConfig = FlowEstimatorConfig(), truth=None) -> np.ndarray:
    """Dense flow from frame ``a`` (H, W, C) to frame ``b``.

    ``block_match`` is a coarse-to-fine exhaustive SAD search giving integer
    displacements. ``injected_truth`` returns ``truth`` (a known field).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if cfg.method == "injected_truth":
        if truth is None:
            raise ValueError("injected_truth flow requested but no truth field given")
        truth = np.asarray(truth, dtype=np.float32)
        if truth.shape != a.shape[:2] + (2,):
            raise ValueError(f"truth flow shape {truth.shape} does not match frames {a.shape}")
        return truth

    pyr_a, pyr_b = [a], [b]
    for _ in range(cfg.levels - 1):
        if min(pyr_a[-1].shape[:2]) < 2 * cfg.block:
            break
        pyr_a.append(_area_down2(pyr_a[-1]))
        pyr_b.append(_area_down2(pyr_b[-1]))

    flow = np.zeros(pyr_a[-1].shape[:2] + (2,), dtype=np.int64)
    for level in range(len(pyr_a) - 1, -1, -1):
        la, lb = pyr_a[level], pyr_b[level]
        if flow.shape[:2] != la.shape[:2]:
            up = np.repeat(np.repeat(flow * 2, 2, axis=0), 2, axis=1)
            pad_h = la.shape[0] - up.shape[0]
            pad_w = la.shape[1] - up.shape[1]
            flow = np.pad(up, ((0, max(pad_h, 0)), (0, max(pad_w, 0)), (0, 0)), mode="edge")[: la.shape[0], : la.shape[1]]
        flow = _match_level(la, lb, flow, cfg.block, cfg.search_radius)
    if cfg.refine:
        flow = _refine_boundaries(a, b, flow, cfg.block, cfg.refine)
    return flow.astype(np.float32)


def estimate_video_flows(video: np.ndarray, cfg: FlowEstimatorConfig = FlowEstimatorConfig()):
    """Forward (n -> n+1) and backward (n+1 -> n) flows for every adjacent pair."""
    fwd = [estimate_flow(video[n], video[n + 1], cfg) for n in range(len(video) - 1)]
    bwd = [estimate_flow(video[n + 1], video[n], cfg) for n in range(len(video) - 1)]
    shape = (0,) + video.shape[1:3] + (2,)
    return (np.stack(fwd) if fwd else np.zeros(shape, np.float32),
            np.stack(bwd) if bwd else np.zeros(shape, np.float32))


def compose_flows(flows: np.ndarray) -> np.ndarray:
    """Chain consecutive flows ``a->a+1, ..., b-1->b`` into one ``a->b`` field."""
    total = np.zeros_like(flows[0])
    for f in flows:
        total = total + backward_warp(f, total)
    return total
