"""Figures written next to the tab-delimited reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}

# fixed metadata keeps repeated renders byte-identical
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)


def plot_report(report, path) -> None:
    """Per-clip PSNR and tLP bars with the corpus mean as a dashed line."""
    ids = list(report.rows)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(max(6.0, 0.5 * len(ids) + 3), 3.2))
        for ax, key, label in zip(axes, ("psnr", "tlp"), ("PSNR (dB)", "tLP")):
            vals = [report.rows[c][key] for c in ids]
            ax.bar(range(len(ids)), vals, color="0.6")
            ax.axhline(report.means[key], color="k", ls="--", lw=1)
            ax.set_xticks(range(len(ids)))
            ax.set_xticklabels(ids, rotation=60, ha="right", fontsize=7)
            ax.set_ylabel(label)
        _save(fig, path)


def plot_ablation(results, path, baseline=None) -> None:
    """Mean PSNR per ablation arm; an optional baseline report is drawn as a line."""
    modes = list(results)
    psnrs = [results[m].report.means["psnr"] for m in modes]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.bar(range(len(modes)), psnrs, color="0.55")
        for i, v in enumerate(psnrs):
            ax.text(i, v, f"{v:.2f}", ha="center", va="bottom", fontsize=7)
        if baseline is not None:
            ax.axhline(baseline.means["psnr"], color="k", ls=":", lw=1, label="interp + bilinear")
            ax.legend(frameon=False, fontsize=7)
        ax.set_xticks(range(len(modes)))
        ax.set_xticklabels(modes)
        lo = min(psnrs + ([baseline.means["psnr"]] if baseline is not None else []))
        ax.set_ylim(lo - 1.0, max(psnrs) + 0.5)
        ax.set_ylabel("mean PSNR (dB)")
        _save(fig, path)


def plot_training(records, path) -> None:
    """Loss terms against step on a log axis."""
    if not records:
        return
    steps = np.array([r["step"] for r in records])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        for key in ("latent", "rec", "perc", "consis", "total"):
            vals = np.array([r[key] for r in records])
            ax.plot(steps, np.maximum(vals, 1e-12), lw=1 if key != "total" else 1.6, label=key)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False, fontsize=7)
        _save(fig, path)
