"""Video arrays, the RVID container, PNG sequences and bilinear resampling.

Videos are plain ``numpy`` arrays shaped ``(T, H, W, C)`` with values in
``[0, 1]``. Flow fields use the same container with ``C == 2`` and float32
payloads.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MAGIC = b"RVID"
VERSION = 1
HEADER = struct.Struct("<4sBBH4I")
HEADER_SIZE = HEADER.size  # 24
DTYPE_CODES = {"u8": 0, "f32": 1}
_CODE_TO_DTYPE = {0: ("u8", np.dtype("u1")), 1: ("f32", np.dtype("<f4"))}


class RvidError(ValueError):
    """Malformed RVID file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class RvidHeaderError(RvidError):
    pass


class RvidTruncatedError(RvidError):
    pass


class RvidDtypeError(RvidError):
    pass


@dataclass(frozen=True)
class ScaleFactors:
    phi_s: int = 4
    phi_t: int = 4

    def __post_init__(self):
        for name in ("phi_s", "phi_t"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {v!r}")


def validate_video(video: np.ndarray, name: str = "video") -> np.ndarray:
    if video.ndim != 4:
        raise ValueError(f"{name} must be T x H x W x C, got shape {video.shape}")
    if min(video.shape) < 1:
        raise ValueError(f"{name} has an empty axis: {video.shape}")
    if not np.all(np.isfinite(video)):
        raise ValueError(f"{name} contains NaN or Inf")
    if video.size and (video.min() < 0.0 or video.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return video


def quantize_u8(video: np.ndarray) -> np.ndarray:
    # round half away from zero; inputs are non-negative
    return np.floor(np.asarray(video, dtype=np.float64) * 255.0 + 0.5).clip(0, 255).astype(np.uint8)


def write_rvid(array: np.ndarray, path, dtype: str = "f32") -> None:
    """Write any finite 4-D array. ``u8`` payloads expect values in [0, 1]."""
    if dtype not in DTYPE_CODES:
        raise ValueError(f"unsupported dtype {dtype!r}; expected one of {sorted(DTYPE_CODES)}")
    array = np.asarray(array)
    if array.ndim != 4:
        raise ValueError(f"expected a 4-D array, got shape {array.shape}")
    T, H, W, C = array.shape
    header = HEADER.pack(MAGIC, VERSION, DTYPE_CODES[dtype], 0, T, H, W, C)
    if dtype == "u8":
        payload = quantize_u8(array).tobytes(order="C")
    else:
        payload = np.ascontiguousarray(array, dtype="<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def save_rvid(video: np.ndarray, path, dtype: str = "u8") -> None:
    write_rvid(validate_video(np.asarray(video)), path, dtype)


def parse_rvid(data: bytes) -> np.ndarray:
    if len(data) < HEADER_SIZE:
        raise RvidTruncatedError(f"header needs {HEADER_SIZE} bytes, file has {len(data)}", len(data))
    magic, version, code, reserved, T, H, W, C = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise RvidHeaderError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise RvidHeaderError(f"unsupported version {version}", 4)
    if code not in _CODE_TO_DTYPE:
        raise RvidDtypeError(f"unsupported dtype code {code}", 5)
    if reserved != 0:
        raise RvidHeaderError("reserved bytes must be zero", 6)
    for i, (field, value) in enumerate(zip("THWC", (T, H, W, C))):
        if value == 0:
            raise RvidHeaderError(f"{field} must be >= 1", 8 + 4 * i)
    _, np_dtype = _CODE_TO_DTYPE[code]
    expected = T * H * W * C * np_dtype.itemsize
    available = len(data) - HEADER_SIZE
    if available < expected:
        raise RvidTruncatedError(f"payload needs {expected} bytes, found {available}", len(data))
    if available > expected:
        raise RvidHeaderError(f"{available - expected} trailing bytes after payload", HEADER_SIZE + expected)
    arr = np.frombuffer(data, dtype=np_dtype, count=T * H * W * C, offset=HEADER_SIZE)
    arr = arr.reshape(T, H, W, C)
    if code == 0:
        return arr.astype(np.float32) / np.float32(255.0)
    return arr.astype(np.float32)


def read_rvid(path) -> np.ndarray:
    """Read an RVID file without range checks (flow sidecars live here)."""
    with open(path, "rb") as fh:
        return parse_rvid(fh.read())


def load_rvid(path) -> np.ndarray:
    return validate_video(read_rvid(path), name=os.fspath(path))


def save_png_sequence(video: np.ndarray, directory, prefix: str = "frame") -> list[Path]:
    from PIL import Image

    video = validate_video(np.asarray(video))
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(quantize_u8(video)):
        p = directory / f"{prefix}_{i:05d}.png"
        if frame.shape[-1] == 1:
            Image.fromarray(frame[..., 0], mode="L").save(p)
        else:
            Image.fromarray(frame, mode="RGB").save(p)
        paths.append(p)
    return paths


def load_png(path, channels: int | None = None) -> np.ndarray:
    from PIL import Image

    img = Image.open(path)
    if channels is None:
        channels = 1 if img.mode in ("L", "I", "I;16") else 3
    img = img.convert("L" if channels == 1 else "RGB")
    arr = np.asarray(img, dtype=np.float32) / np.float32(255.0)
    return arr[..., None] if arr.ndim == 2 else arr


def load_png_sequence(directory, channels: int | None = None) -> np.ndarray:
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG frames in {directory}")
    frames = [load_png(p, channels) for p in paths]
    return np.stack(frames)


def to_gray(video: np.ndarray) -> np.ndarray:
    return video if video.shape[-1] == 1 else video.mean(axis=-1, keepdims=True)


def to_rgb(video: np.ndarray) -> np.ndarray:
    return np.repeat(video, 3, axis=-1) if video.shape[-1] == 1 else video


def _sample_positions(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (torch.arange(n_out, dtype=torch.float64) + 0.5) * scale - 0.5
    src = src.clamp(0.0, n_in - 1)
    lo = src.floor().long()
    hi = (lo + 1).clamp(max=n_in - 1)
    return lo, hi, src - lo


def _lerp_axis(x: torch.Tensor, axis: int, n_out: int) -> torch.Tensor:
    lo, hi, frac = _sample_positions(x.shape[axis], n_out)
    shape = [1] * x.ndim
    shape[axis] = n_out
    frac = frac.to(x.dtype).reshape(shape)
    a = x.index_select(axis, lo)
    b = x.index_select(axis, hi)
    return a + frac * (b - a)


def resize_bilinear(video, new_h: int, new_w: int):
    """Bilinear resampling of ``(..., H, W, C)`` with half-pixel centers.

    Accepts numpy arrays or torch tensors (differentiable). Output is clipped
    to the input's own value range so constants stay exact.
    """
    if new_h < 1 or new_w < 1:
        raise ValueError(f"target size must be >= 1, got {new_h}x{new_w}")
    is_numpy = isinstance(video, np.ndarray)
    x = torch.from_numpy(np.ascontiguousarray(video)) if is_numpy else video
    H, W = x.shape[-3], x.shape[-2]
    if (H, W) == (new_h, new_w):
        return video.copy() if is_numpy else x
    out = _lerp_axis(_lerp_axis(x, x.ndim - 3, new_h), x.ndim - 2, new_w)
    if is_numpy:
        out = np.clip(out.numpy(), video.min(), video.max())
        return out.astype(video.dtype, copy=False)
    return out
