"""Synthetic moving-shape clips with exact ground-truth motion."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SHAPE_KINDS = ("rectangle", "disk")
TEXTURES = ("flat", "ramp", "checker")


@dataclass
class Shape:
    kind: str
    x: float  # top-left corner (rectangle) or center (disk) at t = 0
    y: float
    width: float  # rectangle width or disk diameter
    height: float
    velocity: tuple[float, float]  # (vx, vy) pixels per frame
    intensity: tuple[float, ...]  # one value per channel
    texture: str = "flat"
    texture_amp: float = 0.0
    texture_cell: int = 4
    texture_phase: int = 0

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}")


@dataclass
class SceneSpec:
    seed: int = 0
    n_shapes: int = 3
    T: int = 17
    H: int = 64
    W: int = 64
    C: int = 3
    background: float = 0.5
    shapes: list[Shape] | None = None  # explicit layout; sampled from seed when None
    subpixel: bool = False
    max_speed: int = 1
    textured: bool = True


@dataclass
class ClipWithTruth:
    video: np.ndarray  # (T, H, W, C)
    true_flow_fwd: np.ndarray  # (T-1, H, W, 2), frame n -> n+1
    true_flow_bwd: np.ndarray  # (T-1, H, W, 2), frame n+1 -> n
    shapes: list[Shape] = field(default_factory=list)

    def sidecar(self) -> np.ndarray:
        """Forward flows followed by backward flows, ``(2(T-1), H, W, 2)``."""
        return np.concatenate([self.true_flow_fwd, self.true_flow_bwd], axis=0)


def split_sidecar(sidecar: np.ndarray):
    if len(sidecar) % 2:
        raise ValueError("flow sidecar must hold an even number of fields")
    n = len(sidecar) // 2
    return sidecar[:n], sidecar[n:]


def sample_shapes(spec: SceneSpec) -> list[Shape]:
    rng = np.random.default_rng(spec.seed)
    shapes = []
    for _ in range(spec.n_shapes):
        kind = SHAPE_KINDS[rng.integers(len(SHAPE_KINDS))]
        size = int(rng.integers(max(2, spec.W // 8), max(3, spec.W // 3) + 1))
        size = min(size, spec.W, spec.H)
        w, h = size, size
        if kind == "rectangle":
            h = int(np.clip(size + rng.integers(-size // 3, size // 3 + 1), 2, spec.H))
        x = int(rng.integers(0, spec.W - w + 1))
        y = int(rng.integers(0, spec.H - h + 1))
        if kind == "disk":
            x, y = x + w / 2.0, y + w / 2.0
        if spec.subpixel:
            vel = tuple(float(v) for v in rng.uniform(-spec.max_speed, spec.max_speed, 2).round(3))
        else:
            vel = tuple(float(v) for v in rng.integers(-spec.max_speed, spec.max_speed + 1, 2))
        base = rng.uniform(0.2, 0.8, spec.C)
        texture, amp = "flat", 0.0
        if spec.textured:
            texture = "ramp" if spec.subpixel else TEXTURES[rng.integers(len(TEXTURES))]
            amp = float(rng.uniform(0.05, 0.15)) if texture != "flat" else 0.0
        shapes.append(Shape(kind, x, y, w, h, vel, tuple(float(b) for b in base), texture, amp,
                            texture_cell=4, texture_phase=int(rng.integers(2))))
    return shapes


def _validate(spec: SceneSpec, shapes: list[Shape]):
    if min(spec.T, spec.H, spec.W, spec.C) < 1:
        raise ValueError("T, H, W, C must be >= 1")
    if not 0.0 <= spec.background <= 1.0:
        raise ValueError("background intensity must be in [0, 1]")
    for i, s in enumerate(shapes):
        if np.hypot(*s.velocity) > spec.W / 8:
            raise ValueError(f"shape {i}: speed {np.hypot(*s.velocity):.3g} exceeds W/8")
        if len(s.intensity) != spec.C:
            raise ValueError(f"shape {i}: need {spec.C} intensity values")
        lo = min(s.intensity) - s.texture_amp
        hi = max(s.intensity) + s.texture_amp
        if lo < 0 or hi > 1:
            raise ValueError(f"shape {i}: intensity plus texture leaves [0, 1]")
        if s.kind == "rectangle":
            left, top, right, bottom = s.x, s.y, s.x + s.width, s.y + s.height
        else:
            r = s.width / 2.0
            left, top, right, bottom = s.x - r, s.y - r, s.x + r, s.y + r
        if left < 0 or top < 0 or right > spec.W or bottom > spec.H:
            raise ValueError(f"shape {i} does not fit inside the frame at t=0")


def _shape_pixels(s: Shape, t: int, H: int, W: int):
    """Coverage mask and shape-local coordinates (u, v) at frame t."""
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    ox = s.x + t * s.velocity[0]
    oy = s.y + t * s.velocity[1]
    if s.kind == "rectangle":
        u, v = xs - ox, ys - oy
        inside = (u >= 0) & (u < s.width) & (v >= 0) & (v < s.height)
    else:
        u, v = xs - ox, ys - oy
        inside = u * u + v * v <= (s.width / 2.0) ** 2
        u, v = u + s.width / 2.0, v + s.width / 2.0
    return inside, u, v


def _texture(s: Shape, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if s.texture == "flat" or s.texture_amp == 0:
        return np.zeros_like(u)
    if s.texture == "ramp":
        # linear in local coordinates, so bilinear warps reproduce it exactly
        return s.texture_amp * (u / max(s.width, 1.0) + v / max(s.height, 1.0) - 1.0)
    cells = np.floor(u / s.texture_cell) + np.floor(v / s.texture_cell) + s.texture_phase
    return s.texture_amp * np.where(cells % 2 == 0, 1.0, -1.0)


def render_frame(spec: SceneSpec, shapes: list[Shape], t: int):
    frame = np.full((spec.H, spec.W, spec.C), spec.background, dtype=np.float64)
    flow = np.zeros((spec.H, spec.W, 2), dtype=np.float64)
    for s in shapes:  # painter's order: later shapes win
        inside, u, v = _shape_pixels(s, t, spec.H, spec.W)
        tex = _texture(s, u, v)
        for c in range(spec.C):
            frame[..., c] = np.where(inside, s.intensity[c] + tex, frame[..., c])
        flow[inside] = s.velocity
    return frame, flow


def generate_clip(spec: SceneSpec) -> ClipWithTruth:
    shapes = spec.shapes if spec.shapes is not None else sample_shapes(spec)
    _validate(spec, shapes)
    frames, vel = [], []
    for t in range(spec.T):
        frame, flow = render_frame(spec, shapes, t)
        frames.append(frame)
        vel.append(flow)
    video = np.clip(np.stack(frames), 0.0, 1.0).astype(np.float32)
    vel = np.stack(vel).astype(np.float32)
    fwd = vel[:-1]
    bwd = -vel[1:]
    return ClipWithTruth(video, fwd, bwd + 0.0, list(shapes))


def corpus_spec(seed: int, T: int = 17, H: int = 64, W: int = 64, C: int = 3, max_speed: int = 1) -> SceneSpec:
    """Scene recipe used for training and held-out corpora."""
    rng = np.random.default_rng([seed, 7])
    return SceneSpec(seed=seed, n_shapes=int(rng.integers(2, 5)), T=T, H=H, W=W, C=C,
                     background=float(rng.uniform(0.1, 0.9)), max_speed=max_speed)
