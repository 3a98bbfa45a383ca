"""PNG figures for masks, localization heatmaps and evaluation summaries."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import upsample_heatmap  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def save_mask(mask, path, title: str = "separation mask") -> Path:
    """Time-frequency mask with time on x and log-frequency bin on y."""
    mask = np.asarray(mask, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(mask.T, origin="lower", aspect="auto", cmap="gray", vmin=0, vmax=1,
              interpolation="nearest")
    ax.set_xlabel("frame")
    ax.set_ylabel("log-frequency bin")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def save_heatmap_overlay(image, heatmap, path, bbox=None) -> Path:
    """Bilinearly upsampled location mask drawn over the (3, H, W) image."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[1:]
    up = upsample_heatmap(np.asarray(heatmap, dtype=np.float64), (h, w))
    fig, ax = plt.subplots(figsize=(3, 3))
    ax.imshow(np.clip(image.transpose(1, 2, 0), 0, 1))
    ax.imshow(up, cmap="jet", alpha=0.45, vmin=0, vmax=1)
    y, x = np.unravel_index(np.argmax(up), up.shape)
    ax.plot([x], [y], marker="+", color="white", markersize=12, mew=2)
    if bbox is not None:
        x0, y0, x1, y1 = bbox
        ax.add_patch(plt.Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0, y1 - y0, fill=False,
                                   edgecolor="white", linestyle="--"))
    ax.set_axis_off()
    fig.tight_layout(pad=0.1)
    return _save(fig, path)


def save_sdr_histogram(report, path) -> Path:
    sdr = np.array([r["sdr"] for r in report.rows])
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.hist(sdr, bins=30, color="tab:blue")
    ax.axvline(float(np.mean(sdr)), color="k", linestyle="--", label=f"mean {np.mean(sdr):.2f} dB")
    ax.set_xlabel("SDR (dB)")
    ax.set_ylabel("sources")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def save_ablation_chart(summary: dict, path) -> Path:
    """Grouped bars of median SDR/SIR/SAR per variant; failed variants are left empty."""
    variants = list(summary)
    metrics = ("sdr", "sir", "sar")
    x = np.arange(len(variants))
    width = 0.25
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, key in enumerate(metrics):
        vals = [summary[v][key] if summary[v].get("status") == "ok" else np.nan for v in variants]
        ax.bar(x + (i - 1) * width, vals, width, label=key.upper())
    ax.set_xticks(x, variants)
    ax.set_ylabel("median over seeds (dB)")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
