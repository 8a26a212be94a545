"""PSNR, SSIM and the temporal metrics tOF / tLP, plus corpus reports."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from . import __version__
from .flow import FlowEstimatorConfig, backward_warp, estimate_flow
from .losses import feature_net
from .video import load_rvid

PSNR_CAP = 99.0
METRICS = ("psnr", "ssim", "tof", "tlp")


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Mean per-frame PSNR in dB for [0, 1] videos; exact matches give 99."""
    a, b = _check(a, b)
    mse = ((a - b) ** 2).reshape(len(a), -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        per_frame = np.where(mse > 0, 10.0 * np.log10(1.0 / np.maximum(mse, 1e-300)), PSNR_CAP)
    return float(np.minimum(per_frame, PSNR_CAP).mean())


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    win = sliding_window_view(x, w.shape, axis=(-2, -1))
    return np.einsum("...ij,ij->...", win, w)


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM with a Gaussian window, mean over frames and channels."""
    a, b = _check(a, b)
    if a.shape[1] < window or a.shape[2] < window:
        raise ValueError(f"frames {a.shape[1]}x{a.shape[2]} smaller than the {window}x{window} window")
    w = gaussian_window(window, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    # (T, C, H, W) so the window slides over the last two axes
    x = np.moveaxis(a, -1, 1)
    y = np.moveaxis(b, -1, 1)
    mx, my = _filter_valid(x, w), _filter_valid(y, w)
    sxx = _filter_valid(x * x, w) - mx ** 2
    syy = _filter_valid(y * y, w) - my ** 2
    sxy = _filter_valid(x * y, w) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2))
    return float(smap.mean())


def _pair_flows(video: np.ndarray, cfg: FlowEstimatorConfig, truth=None):
    if cfg.method == "injected_truth":
        if truth is None:
            raise ValueError("injected_truth tOF needs ground-truth flows")
        return np.asarray(truth)
    return np.stack([estimate_flow(video[t - 1], video[t], cfg) for t in range(1, len(video))])


def t_of(out, gt, cfg: FlowEstimatorConfig = FlowEstimatorConfig(), truth_out=None, truth_gt=None) -> float:
    """Mean per-pixel L1 distance between the two videos' frame-to-frame flows."""
    out, gt = _check(out, gt)
    if len(out) < 2:
        raise ValueError("tOF needs at least two frames")
    fo = _pair_flows(out, cfg, truth_out)
    fg = _pair_flows(gt, cfg, truth_gt)
    return float(np.abs(fg - fo).sum(axis=-1).mean())


def _lp_pairs(video: np.ndarray, seed: int) -> np.ndarray:
    net = feature_net(video.shape[-1], seed, torch.float64)
    v = torch.from_numpy(video)
    with torch.no_grad():
        return net.distance(v[:-1], v[1:]).numpy()


def t_lp(out, gt, seed: int = 0) -> float:
    """Mean |LP(gt_{t-1}, gt_t) - LP(out_{t-1}, out_t)| with the fixed feature net."""
    out, gt = _check(out, gt)
    if len(out) < 2:
        raise ValueError("tLP needs at least two frames")
    return float(np.abs(_lp_pairs(gt, seed) - _lp_pairs(out, seed)).mean())


def temporal_jitter(video, amplitude: int, seed: int = 0) -> np.ndarray:
    """Shift each frame by an independent integer offset in [-amplitude, amplitude].

    Borders are edge-clamped. Used to build increasingly unstable versions of
    a clip when sanity-checking the temporal metrics.
    """
    video = np.asarray(video, dtype=np.float64)
    rng = np.random.default_rng(seed)
    offsets = rng.integers(-amplitude, amplitude + 1, size=(len(video), 2)) if amplitude else np.zeros((len(video), 2))
    flows = np.broadcast_to(offsets[:, None, None, :].astype(np.float64), video.shape[:3] + (2,))
    return backward_warp(video, np.ascontiguousarray(flows))


@dataclass
class MetricReport:
    rows: dict[str, dict[str, float]]  # clip id -> metric -> value
    fingerprint: str
    tool_version: str = __version__
    means: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.means and self.rows:
            self.means = corpus_means(self.rows)


def corpus_means(rows: dict[str, dict[str, float]]) -> dict[str, float]:
    n = len(rows)
    return {m: sum(r[m] for r in rows.values()) / n for m in METRICS}


def clip_metrics(out, gt, flow_cfg: FlowEstimatorConfig = FlowEstimatorConfig(), lp_seed: int = 0) -> dict[str, float]:
    return {"psnr": psnr(out, gt), "ssim": ssim(out, gt), "tof": t_of(out, gt, flow_cfg), "tlp": t_lp(out, gt, lp_seed)}


def fingerprint(flow_cfg: FlowEstimatorConfig = FlowEstimatorConfig(), lp_seed: int = 0) -> str:
    return f"{flow_cfg.fingerprint()};lp=random_features,seed={lp_seed};ssim=gauss11,sigma=1.5;psnr_cap={PSNR_CAP:g}"


def _inventory(directory) -> dict[str, Path]:
    return {p.name[:-len(".rvid")]: p for p in sorted(Path(directory).glob("*.rvid"))
            if not p.name.endswith(".flow.rvid")}


class InventoryError(ValueError):
    def __init__(self, missing, extra):
        super().__init__(f"clip inventories differ; missing from restored: {sorted(missing)}, "
                         f"extra in restored: {sorted(extra)}")
        self.missing, self.extra = sorted(missing), sorted(extra)


def evaluate(restored_dir, reference_dir, out=None, flow_cfg: FlowEstimatorConfig = FlowEstimatorConfig(),
             lp_seed: int = 0) -> MetricReport:
    restored = _inventory(restored_dir)
    reference = _inventory(reference_dir)
    if not reference and not restored:
        raise ValueError("empty corpus: no .rvid clips found")
    if restored.keys() != reference.keys():
        raise InventoryError(reference.keys() - restored.keys(), restored.keys() - reference.keys())
    rows = {cid: clip_metrics(load_rvid(restored[cid]), load_rvid(reference[cid]), flow_cfg, lp_seed)
            for cid in sorted(reference)}
    report = MetricReport(rows, fingerprint(flow_cfg, lp_seed))
    if out is not None:
        write_report(report, out)
    return report


def write_report(report: MetricReport, path) -> None:
    """Tab-delimited report: header keys, one row per clip, then the means row."""
    lines = [
        "# stvsr metric report",
        f"tool_version\t{report.tool_version}",
        f"fingerprint\t{report.fingerprint}",
        f"n_clips\t{len(report.rows)}",
        "\t".join(("clip_id",) + METRICS),
    ]
    for cid, row in report.rows.items():
        lines.append("\t".join([cid] + [repr(float(row[m])) for m in METRICS]))
    lines.append("\t".join(["MEAN"] + [repr(float(report.means[m])) for m in METRICS]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path) -> MetricReport:
    lines = [l for l in Path(path).read_text().splitlines() if l and not l.startswith("#")]
    head = {}
    i = 0
    while not lines[i].startswith("clip_id\t"):
        key, value = lines[i].split("\t", 1)
        head[key] = value
        i += 1
    columns = lines[i].split("\t")[1:]
    if tuple(columns) != METRICS:
        raise ValueError(f"unexpected report columns {columns}")
    rows, means = {}, {}
    for line in lines[i + 1:]:
        cid, *vals = line.split("\t")
        parsed = {m: float(v) for m, v in zip(columns, vals)}
        if cid == "MEAN":
            means = parsed
        else:
            rows[cid] = parsed
    if int(head["n_clips"]) != len(rows):
        raise ValueError("report row count does not match its header")
    return MetricReport(rows, head["fingerprint"], head["tool_version"], means)


def is_finite_report(report: MetricReport) -> bool:
    return all(math.isfinite(v) for row in report.rows.values() for v in row.values())
