"""End-to-end restore, the interpolation baseline, held-out evaluation and ablations."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import torch

from .cfca import aggregate
from .config import PipelineConfig
from .flow import FlowEstimatorConfig, estimate_video_flows
from .metrics import MetricReport, clip_metrics, fingerprint
from .training import DiffSTToy, SyntheticCorpus, degradation_for, prepare_sample, pretrain_vae, train, build_model
from .video import ScaleFactors

log = logging.getLogger(__name__)

ABLATION_MODES = ("interp", "flow2", "flow_multi", "no_vrg", "full")


def restore(model: DiffSTToy, lq: np.ndarray, key_fwd=None, key_bwd=None,
            flow_cfg: FlowEstimatorConfig = FlowEstimatorConfig()) -> np.ndarray:
    """Restore one ``(K, h, w, C)`` clip to ``((K-1)*phi_t + 1, h*phi_s, w*phi_s, C)``.

    Keyframe flows are estimated by block matching unless supplied.
    """
    phi = model.scales.phi_s
    if lq.shape[1] * phi % model.vae.stride or lq.shape[2] * phi % model.vae.stride:
        raise ValueError(f"output size {lq.shape[1] * phi}x{lq.shape[2] * phi} not divisible by "
                         f"the latent stride {model.vae.stride}")
    if key_fwd is None or key_bwd is None:
        key_fwd, key_bwd = estimate_video_flows(lq, flow_cfg)
    model.eval()
    with torch.no_grad():
        out = model(torch.from_numpy(np.ascontiguousarray(lq, dtype=np.float32))[None],
                    torch.from_numpy(np.asarray(key_fwd, np.float32))[None],
                    torch.from_numpy(np.asarray(key_bwd, np.float32))[None])
    return out["i_st"][0].numpy()


def baseline(lq: np.ndarray, scales: ScaleFactors) -> np.ndarray:
    """Linear frame interpolation between keyframes, then bilinear upsampling."""
    K = lq.shape[0]
    dummy = np.zeros((K - 1,) + lq.shape[1:3] + (2,), np.float32)
    out = aggregate(lq, dummy, dummy, None, scales, mode="interp")
    return out.numpy()


def heldout_items(cfg: PipelineConfig, n_clips: int, seed: int | None = None):
    corpus = SyntheticCorpus(seed=cfg.seed if seed is None else seed, T=cfg.train.crop_t, H=cfg.train.crop_h,
                             W=cfg.train.crop_w, C=cfg.model.channels, label="heldout")
    items = []
    for i in range(n_clips):
        sample = corpus.sample(i)
        item = prepare_sample(sample, degradation_for(cfg, "heldout", i), cfg.model.key_flow, cfg.flow)
        items.append((sample.clip_id, item))
    return items


def evaluate_model(model: DiffSTToy | None, items, cfg: PipelineConfig,
                   metric_flow: FlowEstimatorConfig = FlowEstimatorConfig()) -> MetricReport:
    """Metrics over prepared held-out items; ``model=None`` scores the baseline."""
    rows = {}
    for cid, item in items:
        if model is None:
            out = baseline(item["lq"], cfg.scales)
        else:
            out = restore(model, item["lq"], item["key_fwd"], item["key_bwd"])
        rows[cid] = clip_metrics(np.clip(out, 0, 1), item["hq"], metric_flow)
    return MetricReport(rows, fingerprint(metric_flow))


@dataclass
class AblationArm:
    mode: str
    report: MetricReport
    final_loss: float


def arm_config(cfg: PipelineConfig, mode: str) -> PipelineConfig:
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}; choose from {ABLATION_MODES}")
    aggregation = {"interp": "interp", "flow2": "flow2"}.get(mode, "flow_multi")
    use_vrg = mode == "full"
    return replace(cfg, model=replace(cfg.model, aggregation=aggregation, use_vrg=use_vrg))


def ablate(modes, cfg: PipelineConfig, n_heldout: int = 8, vae_state=None) -> dict[str, AblationArm]:
    """Train and evaluate each arm under the same seed, budget and frozen VAE.

    ``flow_multi`` and ``no_vrg`` name the same configuration (full
    aggregation, fixed prompt); it is trained once and reported under both.
    """
    corpus = SyntheticCorpus(seed=cfg.seed, T=cfg.train.crop_t, H=cfg.train.crop_h, W=cfg.train.crop_w,
                             C=cfg.model.channels)
    if vae_state is None:
        donor = build_model(cfg)
        pretrain_vae(donor.vae, corpus, cfg)
        vae_state = donor.vae.state_dict()
    items = heldout_items(cfg, n_heldout)
    results: dict[str, AblationArm] = {}
    cache: dict = {}
    for mode in modes:
        acfg = arm_config(cfg, mode)
        key = (acfg.model.aggregation, acfg.model.use_vrg)
        if key not in cache:
            model = build_model(acfg)
            model.vae.load_state_dict(vae_state)
            model, records = train(acfg, corpus, model)
            report = evaluate_model(model, items, acfg)
            cache[key] = AblationArm(mode, report, records[-1]["total"] if records else float("nan"))
            log.info("arm %s: psnr %.3f", mode, report.means["psnr"])
        arm = cache[key]
        results[mode] = AblationArm(mode, arm.report, arm.final_loss)
    return results


def write_ablation(results: dict[str, AblationArm], path, baseline: MetricReport | None = None) -> None:
    """Tab-delimited comparison; the optional baseline row has no training loss."""
    cols = ("psnr", "ssim", "tof", "tlp")
    lines = ["# stvsr ablation report", f"n_arms\t{len(results)}", "mode\t" + "\t".join(cols) + "\tfinal_loss"]
    if baseline is not None:
        lines.append("\t".join(["baseline"] + [repr(float(baseline.means[k])) for k in cols] + ["nan"]))
    for mode, arm in results.items():
        m = arm.report.means
        lines.append("\t".join([mode] + [repr(float(m[k])) for k in cols] + [repr(float(arm.final_loss))]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
