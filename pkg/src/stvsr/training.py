"""The trainable pipeline, corpora, the optimization loop and checkpoints."""
from __future__ import annotations

import copy
import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import __version__
from .backbone import NoiseSchedule, TinyVAE, VelocityNet, one_step_sample
from .cfca import FusionNet, aggregate
from .config import ModelConfig, PipelineConfig, TrainConfig, seed_stream
from .datagen import corpus_spec, generate_clip, split_sidecar
from .degrade import DegradationConfig, make_pair
from .flow import FlowEstimatorConfig, compose_flows, estimate_video_flows
from .losses import LossWeights, NonFiniteLossError, feature_net, latent_loss, pixel_losses, \
    temporal_consistency_loss, total_loss
from .video import ScaleFactors, load_rvid, read_rvid, resize_bilinear

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


class DiffSTToy(nn.Module):
    """Aggregation -> upsample -> VAE encode -> one Euler step -> decode."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), scales: ScaleFactors = ScaleFactors()):
        super().__init__()
        self.cfg = cfg
        self.scales = scales
        self.schedule = NoiseSchedule(cfg.t_max)
        self.fusion = FusionNet(cfg.channels, cfg.fusion_hidden)
        from .vrg import VRG
        self.vrg = VRG(cfg.channels, cfg.dim, cfg.n_queries, cfg.n_text, cfg.heads, n_keyframes=cfg.n_keyframes)
        self.vae = TinyVAE(cfg.channels, cfg.latent, cfg.vae_width)
        self.velocity = VelocityNet(cfg.latent, cfg.width, cfg.dim, cfg.blocks, cfg.heads, self.schedule)
        self.vae.requires_grad_(False)

    def trainable_parameters(self):
        for module in (self.fusion, self.vrg, self.velocity):
            yield from module.parameters()

    def intermediate(self, lq, key_fwd, key_bwd):
        return torch.stack([
            aggregate(lq[b], key_fwd[b], key_bwd[b], self.fusion, self.scales,
                      self.cfg.aggregation, self.cfg.mask_eps)
            for b in range(lq.shape[0])
        ])

    def condition(self, lq):
        if self.cfg.use_vrg:
            return self.vrg(lq)
        return self.vrg.fixed_condition(lq.shape[0])

    def forward(self, lq, key_fwd, key_bwd):
        i_m = self.intermediate(lq, key_fwd, key_bwd)
        c = self.condition(lq)
        z = self.vae.encode(i_m)
        z_st = one_step_sample(self.velocity, z, self.cfg.t, c, self.schedule)
        i_st = self.vae.decode(z_st, clamp=not self.training)
        return {"i_m": i_m, "c": c, "z": z, "z_st": z_st, "i_st": i_st}

    def loss_parts(self, batch: dict) -> tuple[dict, dict]:
        out = self(batch["lq"], batch["key_fwd"], batch["key_bwd"])
        with torch.no_grad():
            z_h = self.vae.encode(batch["hq"])
        rec, perc = pixel_losses(out["i_st"], batch["hq"], feature_net(self.cfg.channels, dtype=out["i_st"].dtype))
        parts = {
            "latent": latent_loss(out["z_st"], z_h),
            "rec": rec,
            "perc": perc,
            "consis": temporal_consistency_loss(out["i_st"], batch["hq_fwd"], batch["hq_bwd"]),
        }
        return parts, out


def _majority_down(flows: np.ndarray, phi_s: int) -> np.ndarray:
    """Most frequent vector in each phi_s x phi_s block, in low-resolution pixels.

    Ties go to the vector met first in raster order. Unlike an area average,
    a mixed block keeps the motion of its dominant content.
    """
    K, H, W, _ = flows.shape
    h, w = H // phi_s, W // phi_s
    blocks = flows[:, :h * phi_s, :w * phi_s].reshape(K, h, phi_s, w, phi_s, 2)
    blocks = blocks.transpose(0, 1, 3, 2, 4, 5).reshape(K, h, w, phi_s * phi_s, 2)
    same = np.all(blocks[..., :, None, :] == blocks[..., None, :, :], axis=-1)
    pick = same.sum(axis=-1).argmax(axis=-1)
    return np.take_along_axis(blocks, pick[..., None, None], axis=-2)[..., 0, :] / phi_s


def keyframe_flows(hq_fwd: np.ndarray, hq_bwd: np.ndarray, scales: ScaleFactors):
    """Keyframe-to-keyframe flows at low resolution, from per-frame flows.

    Chains phi_t consecutive flows, then takes the majority vector of each
    phi_s block and rescales it.
    """
    phi_t, phi_s = scales.phi_t, scales.phi_s
    T = hq_fwd.shape[0] + 1
    fwd, bwd = [], []
    for m in range(0, T - 1, phi_t):
        fwd.append(compose_flows(hq_fwd[m:m + phi_t]))
        bwd.append(compose_flows(hq_bwd[m:m + phi_t][::-1]))
    if not fwd:
        H, W = hq_fwd.shape[1:3]
        empty = np.zeros((0, H // phi_s, W // phi_s, 2), np.float32)
        return empty, empty.copy()
    fwd, bwd = np.stack(fwd), np.stack(bwd)
    if phi_s > 1:
        fwd, bwd = _majority_down(fwd, phi_s), _majority_down(bwd, phi_s)
    return fwd.astype(np.float32), bwd.astype(np.float32)


@dataclass
class Sample:
    clip_id: str
    hq: np.ndarray
    hq_fwd: np.ndarray
    hq_bwd: np.ndarray


class SyntheticCorpus:
    """Moving-shape clips generated on demand from labelled seeds."""

    def __init__(self, seed: int = 0, T: int = 17, H: int = 64, W: int = 64, C: int = 3, label: str = "train",
                 max_speed: int = 1):
        self.seed, self.T, self.H, self.W, self.C = seed, T, H, W, C
        self.label = label
        self.max_speed = max_speed

    def clip_seed(self, index: int) -> int:
        return seed_stream(self.seed, self.label, index)

    def sample(self, index: int) -> Sample:
        s = self.clip_seed(index)
        clip = generate_clip(corpus_spec(s, self.T, self.H, self.W, self.C, self.max_speed))
        return Sample(f"{self.label}{index:04d}", clip.video, clip.true_flow_fwd, clip.true_flow_bwd)


class DirectoryCorpus:
    """RVID clips with optional ``.flow.rvid`` sidecars, randomly cropped."""

    def __init__(self, directory, crop_t: int, crop_h: int, crop_w: int, seed: int = 0,
                 flow_cfg: FlowEstimatorConfig = FlowEstimatorConfig()):
        self.paths = sorted(p for p in Path(directory).glob("*.rvid") if not p.name.endswith(".flow.rvid"))
        if not self.paths:
            raise FileNotFoundError(f"no .rvid clips in {directory}")
        self.crop = (crop_t, crop_h, crop_w)
        self.seed = seed
        self.flow_cfg = flow_cfg
        self._cache: dict = {}

    def _load(self, path: Path):
        if path not in self._cache:
            video = load_rvid(path)
            side = path.with_name(path.stem + ".flow.rvid")
            if side.exists():
                fwd, bwd = split_sidecar(read_rvid(side))
            else:
                fwd, bwd = estimate_video_flows(video, self.flow_cfg)
            self._cache[path] = (video, fwd, bwd)
        return self._cache[path]

    def sample(self, index: int) -> Sample:
        rng = np.random.default_rng(seed_stream(self.seed, "crop", index))
        path = self.paths[rng.integers(len(self.paths))]
        video, fwd, bwd = self._load(path)
        T, H, W, _ = video.shape
        ct, ch, cw = min(self.crop[0], T), min(self.crop[1], H), min(self.crop[2], W)
        t0 = int(rng.integers(T - ct + 1))
        y0 = int(rng.integers(H - ch + 1))
        x0 = int(rng.integers(W - cw + 1))
        sl = (slice(y0, y0 + ch), slice(x0, x0 + cw))
        return Sample(f"{path.stem}@{index}", video[t0:t0 + ct, sl[0], sl[1]],
                      fwd[t0:t0 + ct - 1, sl[0], sl[1]], bwd[t0:t0 + ct - 1, sl[0], sl[1]])


def prepare_sample(sample: Sample, degrade: DegradationConfig, key_flow: str = "injected_truth",
                   flow_cfg: FlowEstimatorConfig = FlowEstimatorConfig()) -> dict:
    lq, hq = make_pair(sample.hq, degrade)
    if key_flow == "injected_truth":
        kf, kb = keyframe_flows(sample.hq_fwd, sample.hq_bwd, degrade.scales)
    else:
        kf, kb = estimate_video_flows(lq, flow_cfg)
    return {"lq": lq, "hq": hq, "key_fwd": kf, "key_bwd": kb, "hq_fwd": sample.hq_fwd, "hq_bwd": sample.hq_bwd}


def collate(items: list[dict], dtype=torch.float32) -> dict:
    return {k: torch.from_numpy(np.stack([it[k] for it in items])).to(dtype) for k in items[0]}


def degradation_for(cfg: PipelineConfig, label: str, index: int) -> DegradationConfig:
    return replace(cfg.degrade, seed=seed_stream(cfg.seed, f"degrade/{label}", index), scales=cfg.scales)


def make_batch(corpus, cfg: PipelineConfig, step: int, label: str = "train") -> dict:
    items = []
    for b in range(cfg.train.batch):
        index = step * cfg.train.batch + b
        sample = corpus.sample(index)
        items.append(prepare_sample(sample, degradation_for(cfg, label, index), cfg.model.key_flow, cfg.flow))
    return collate(items)


def _warmup_cosine(warmup: int, steps: int):
    """LR factor: linear warm-up, then cosine decay to zero at ``steps``."""
    warmup = max(1, warmup)

    def factor(i):
        return min((i + 1) / warmup, 0.5 * (1 + math.cos(math.pi * min(i, steps) / max(steps, 1))))
    return factor


def pretrain_vae(vae: TinyVAE, corpus, cfg: PipelineConfig, steps: int | None = None,
                 frames_per_step: int = 8) -> list[float]:
    """Reconstruction pretraining on clean frames and on upsampled degraded frames."""
    steps = cfg.train.vae_steps if steps is None else steps
    torch.manual_seed(seed_stream(cfg.seed, "vae"))
    vae.requires_grad_(True)
    vae.train()
    opt = torch.optim.Adam(vae.parameters(), lr=cfg.train.vae_lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _warmup_cosine(min(200, steps // 10), steps))
    rng = np.random.default_rng(seed_stream(cfg.seed, "vae-frames"))
    losses = []
    pool: list[np.ndarray] = []
    for step in range(steps):
        if step % 4 == 0:
            idx = 1_000_000 + step
            sample = corpus.sample(idx)
            deg = degradation_for(cfg, "vae", idx)
            lq, hq = make_pair(sample.hq, replace(deg, scales=ScaleFactors(cfg.scales.phi_s, 1)))
            up = resize_bilinear(lq, hq.shape[1], hq.shape[2])
            pool = [hq, up]
        picks = []
        for j in range(frames_per_step):
            video = pool[j % 2]
            picks.append(video[rng.integers(len(video))])
        x = torch.from_numpy(np.stack(picks)).unsqueeze(0)
        rec = vae.decode(vae.encode(x), clamp=False)
        loss = ((rec - x) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(vae.parameters(), 1.0)
        opt.step()
        sched.step()
        losses.append(loss.item())
    vae.requires_grad_(False)
    vae.eval()
    return losses


def _state_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def save_checkpoint(path, model: DiffSTToy, manifest: dict) -> None:
    """Zip archive of ``.npy`` arrays plus ``manifest.json``; byte-reproducible."""
    arrays = _state_arrays(model)
    manifest = dict(manifest)
    manifest.update({
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "model": asdict(model.cfg),
        "scales": asdict(model.scales),
        "schedule": {"t": model.cfg.t, "t_max": model.cfg.t_max, "kind": "linear"},
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
    })
    stamp = (1980, 1, 1, 0, 0, 0)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=stamp)
        zf.writestr(info, json.dumps(manifest, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arrays[name], allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"params/{name}.npy", date_time=stamp), buf.getvalue())


def load_checkpoint(path, expect: ModelConfig | None = None, scales: ScaleFactors | None = None):
    """Return ``(model, manifest)``; raises CheckpointError on incompatibility."""
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    with zf:
        manifest = json.loads(zf.read("manifest.json"))
        version = manifest.get("schema_version")
        if version != SCHEMA_VERSION:
            raise CheckpointError(f"checkpoint schema version {version}, expected {SCHEMA_VERSION}")
        mcfg = ModelConfig(**manifest["model"])
        sc = ScaleFactors(**manifest["scales"])
        if expect is not None and expect != mcfg:
            diff = {k: (v, getattr(expect, k)) for k, v in asdict(mcfg).items() if getattr(expect, k) != v}
            raise CheckpointError(f"checkpoint model config differs from requested: {diff}")
        if scales is not None and scales != sc:
            raise CheckpointError(f"checkpoint scales {sc} differ from requested {scales}")
        model = DiffSTToy(mcfg, sc)
        state = {}
        for name in manifest["shapes"]:
            with zf.open(f"params/{name}.npy") as fh:
                state[name] = torch.from_numpy(np.lib.format.read_array(io.BytesIO(fh.read())))
    model.load_state_dict(state)
    model.eval()
    return model, manifest


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"training aborted at step {step}: {cause}")
        self.step = step
        self.cause = cause


def build_model(cfg: PipelineConfig) -> DiffSTToy:
    torch.manual_seed(seed_stream(cfg.seed, "init"))
    return DiffSTToy(cfg.model, cfg.scales)


def train(cfg: PipelineConfig, corpus, model: DiffSTToy | None = None, out=None, log_path=None,
          pretrain: bool = True) -> tuple[DiffSTToy, list[dict]]:
    """Optimize fusion, guidance and velocity networks with the VAE frozen.

    Writes a checkpoint to ``out`` and JSON-lines metrics to ``log_path`` when
    given. On a non-finite loss the last good parameters are checkpointed and
    :class:`TrainingAborted` is raised.
    """
    torch.use_deterministic_algorithms(True)
    tc: TrainConfig = cfg.train
    if model is None:
        model = build_model(cfg)
        if pretrain and tc.vae_steps:
            pretrain_vae(model.vae, corpus, cfg)
    model.vae.requires_grad_(False)
    torch.manual_seed(seed_stream(cfg.seed, "train"))
    opt = torch.optim.AdamW(list(model.trainable_parameters()), lr=tc.lr, betas=(tc.beta1, tc.beta2),
                            weight_decay=tc.weight_decay)
    factor = _warmup_cosine(tc.warmup, tc.iters) if tc.schedule == "cosine" else (lambda i: 1.0)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, factor)
    manifest = {"train": asdict(tc), "seed": cfg.seed, "loss": asdict(cfg.loss),
                "degrade": {**asdict(cfg.degrade), "scales": asdict(cfg.degrade.scales)},
                "steps_done": 0}
    records: list[dict] = []
    log_fh = open(log_path, "w") if log_path else None
    model.train()
    try:
        for step in range(tc.iters):
            batch = make_batch(corpus, cfg, step)
            good = copy.deepcopy(model.state_dict()) if out is not None else None
            try:
                parts, _ = model.loss_parts(batch)
                loss = total_loss(parts, cfg.loss)
            except NonFiniteLossError as e:
                if out is not None:
                    model.load_state_dict(good)
                    save_checkpoint(out, model, {**manifest, "steps_done": step, "aborted": str(e)})
                raise TrainingAborted(step, e) from e
            opt.zero_grad()
            loss.backward()
            if tc.clip > 0:
                torch.nn.utils.clip_grad_norm_(list(model.trainable_parameters()), tc.clip)
            opt.step()
            sched.step()
            rec = {"step": step, **{k: v.item() for k, v in parts.items()}, "total": loss.item()}
            records.append(rec)
            if log_fh and step % tc.log_every == 0:
                log_fh.write(json.dumps(rec) + "\n")
            if step % 100 == 0:
                log.info("step %d total %.5f", step, rec["total"])
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    if out is not None:
        save_checkpoint(out, model, {**manifest, "steps_done": tc.iters})
    return model, records
