"""Synthesize low-resolution, low-frame-rate inputs from clean clips."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .video import ScaleFactors, resize_bilinear


@dataclass(frozen=True)
class DegradationConfig:
    blur_sigma_range: tuple[float, float] = (0.2, 2.0)
    noise_sigma_range: tuple[float, float] = (0.0, 10.0 / 255.0)
    downsample: str = "area"
    quantize_bits: int | None = None
    seed: int = 0
    scales: ScaleFactors = field(default_factory=ScaleFactors)

    def __post_init__(self):
        for name in ("blur_sigma_range", "noise_sigma_range"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and 0 <= lo <= hi):
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        if self.downsample not in ("area", "bilinear"):
            raise ValueError(f"unknown downsample kind {self.downsample!r}")
        if self.quantize_bits is not None and not 1 <= self.quantize_bits <= 8:
            raise ValueError("quantize_bits must be in 1..8 or None")

    @classmethod
    def null(cls, phi_s: int = 1, phi_t: int = 1, seed: int = 0) -> "DegradationConfig":
        return cls((0.0, 0.0), (0.0, 0.0), "area", None, seed, ScaleFactors(phi_s, phi_t))


def draw_sigmas(cfg: DegradationConfig) -> tuple[float, float]:
    """Per-clip blur and noise levels; the same draws spatial_degrade uses."""
    rng = np.random.default_rng(cfg.seed)
    blur = float(rng.uniform(*cfg.blur_sigma_range))
    noise = float(rng.uniform(*cfg.noise_sigma_range))
    return blur, noise


def area_downsample(video: np.ndarray, factor: int) -> np.ndarray:
    T, H, W, C = video.shape
    return video.reshape(T, H // factor, factor, W // factor, factor, C).mean(axis=(2, 4))


def spatial_degrade(video: np.ndarray, cfg: DegradationConfig) -> np.ndarray:
    """Blur, add noise, downsample by phi_s, quantize, clamp. Fixed order."""
    phi = cfg.scales.phi_s
    T, H, W, C = video.shape
    if H % phi or W % phi:
        raise ValueError(f"frame size {H}x{W} not divisible by phi_s={phi}")
    rng = np.random.default_rng(cfg.seed)
    blur = rng.uniform(*cfg.blur_sigma_range)
    noise = rng.uniform(*cfg.noise_sigma_range)
    out = np.asarray(video, dtype=np.float64)
    if blur > 0:
        out = gaussian_filter(out, sigma=(0, blur, blur, 0), mode="reflect", truncate=4.0)
    if noise > 0:
        out = out + rng.normal(0.0, noise, size=out.shape)
    if phi > 1:
        if cfg.downsample == "area":
            out = area_downsample(out, phi)
        else:
            out = resize_bilinear(out, H // phi, W // phi)
    if cfg.quantize_bits is not None:
        levels = 2 ** cfg.quantize_bits - 1
        out = np.floor(np.clip(out, 0, 1) * levels + 0.5) / levels
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def temporal_subsample(video: np.ndarray, phi_t: int) -> np.ndarray:
    T = video.shape[0]
    if phi_t < 1 or (T - 1) % phi_t:
        raise ValueError(f"T-1={T - 1} not divisible by phi_t={phi_t}")
    return video[::phi_t]


def keyframe_count(T: int, phi_t: int) -> int:
    return (T - 1) // phi_t + 1


def make_pair(hq: np.ndarray, cfg: DegradationConfig):
    """(lq, hq): lq keeps every phi_t-th degraded frame including the last."""
    T = hq.shape[0]
    if (T - 1) % cfg.scales.phi_t:
        raise ValueError(f"T-1={T - 1} not divisible by phi_t={cfg.scales.phi_t}")
    lq = temporal_subsample(spatial_degrade(hq, cfg), cfg.scales.phi_t)
    return lq, hq
