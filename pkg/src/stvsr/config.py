"""Pipeline configuration: sectioned key = value files and seed streams."""
from __future__ import annotations

import configparser
import zlib
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .degrade import DegradationConfig
from .flow import FlowEstimatorConfig
from .losses import LossWeights
from .video import ScaleFactors


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    batch: int = 4
    iters: int = 10_000
    seed: int = 0
    crop_t: int = 17
    crop_h: int = 64
    crop_w: int = 64
    vae_steps: int = 2000
    vae_lr: float = 2e-3
    schedule: str = "constant"  # or "cosine": linear warm-up, then cosine decay to zero
    warmup: int = 0
    clip: float = 0.0  # gradient-norm clip, 0 disables
    log_every: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.iters < 0 or self.vae_steps < 0 or self.warmup < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 3
    latent: int = 8
    vae_width: int = 32
    width: int = 64
    blocks: int = 4
    heads: int = 4
    dim: int = 64
    fusion_hidden: int = 16
    n_queries: int = 4
    n_text: int = 4
    n_keyframes: int = 5
    t: int = 799
    t_max: int = 1000
    aggregation: str = "flow_multi"
    use_vrg: bool = True
    mask_eps: float = 0.5
    key_flow: str = "injected_truth"  # how keyframe flows are obtained for synthetic data

    def __post_init__(self):
        if not 0 <= self.t <= self.t_max:
            raise ValueError(f"t={self.t} outside [0, {self.t_max}]")
        if self.aggregation not in ("interp", "flow2", "flow_multi"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.key_flow not in ("injected_truth", "block_match"):
            raise ValueError(f"unknown key_flow {self.key_flow!r}")


@dataclass(frozen=True)
class PipelineConfig:
    scales: ScaleFactors = field(default_factory=ScaleFactors)
    degrade: DegradationConfig = field(default_factory=DegradationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    flow: FlowEstimatorConfig = field(default_factory=FlowEstimatorConfig)
    seed: int = 0


def seed_stream(root: int, label: str, *index: int) -> int:
    """Independent 32-bit seed for a labelled subsystem stream."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(label.encode()), *[int(i) for i in index]])
    return int(ss.generate_state(1)[0])


def _pair(text: str) -> tuple[float, float]:
    parts = [float(p) for p in text.replace(",", " ").split()]
    if len(parts) == 1:
        return parts[0], parts[0]
    if len(parts) == 2:
        return parts[0], parts[1]
    raise ConfigError(f"expected one or two numbers, got {text!r}")


def _optional_int(text: str):
    return None if text.strip().lower() in ("", "none", "off") else int(text)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


# key -> (section object, attribute, parser)
_KEYS = {
    "phi_s": ("scales", "phi_s", int),
    "phi_t": ("scales", "phi_t", int),
    "blur_sigma": ("degrade", "blur_sigma_range", _pair),
    "noise_sigma": ("degrade", "noise_sigma_range", _pair),
    "downsample": ("degrade", "downsample", str),
    "quantize_bits": ("degrade", "quantize_bits", _optional_int),
    "degrade_seed": ("degrade", "seed", int),
    "gamma_consis": ("loss", "gamma_consis", float),
    "flow_method": ("flow", "method", str),
    "flow_block": ("flow", "block", int),
    "flow_radius": ("flow", "search_radius", int),
    "flow_levels": ("flow", "levels", int),
}
for _f in fields(TrainConfig):
    _KEYS.setdefault(_f.name, ("train", _f.name, type(_f.default)))
for _f in fields(ModelConfig):
    parser = _bool if isinstance(_f.default, bool) else type(_f.default)
    _KEYS.setdefault(_f.name, ("model", _f.name, parser))


def load_config(path=None, text: str | None = None, seed: int | None = None) -> PipelineConfig:
    """Parse a config file. Section names are for readability; keys are global.

    A ``seed`` key in any section sets the root seed. Unknown keys are errors.
    """
    cp = configparser.ConfigParser(interpolation=None)
    try:
        if path is not None:
            with open(path) as fh:
                cp.read_file(fh)
        elif text is not None:
            cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e

    values: dict[str, dict] = {k: {} for k in ("scales", "degrade", "train", "loss", "model", "flow")}
    root_seed = 0
    for section in cp.sections():
        for key, raw in cp.items(section):
            if key == "seed":
                root_seed = int(raw)
                continue
            if key not in _KEYS:
                raise ConfigError(f"unknown config key {key!r} in [{section}]")
            group, attr, parse = _KEYS[key]
            try:
                values[group][attr] = parse(raw)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from e
    if seed is not None:
        root_seed = seed
    try:
        scales = ScaleFactors(**values["scales"])
        degrade = DegradationConfig(**{"seed": seed_stream(root_seed, "degrade"), **values["degrade"], "scales": scales})
        train = TrainConfig(**{"seed": root_seed, **values["train"]})
        cfg = PipelineConfig(scales, degrade, train, LossWeights(**values["loss"]),
                             ModelConfig(**values["model"]), FlowEstimatorConfig(**values["flow"]), root_seed)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return cfg


def with_seed(cfg: PipelineConfig, seed: int) -> PipelineConfig:
    return replace(cfg, seed=seed, train=replace(cfg.train, seed=seed),
                   degrade=replace(cfg.degrade, seed=seed_stream(seed, "degrade")))
