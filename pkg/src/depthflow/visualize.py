"""
PNG renderings of predictions and error maps, and training / ablation plots.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence

import cv2
import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import hsv_to_rgb  # noqa: E402

_DISP_COLORMAP = plt.get_cmap("magma", 256)
_ERROR_COLORMAP = plt.get_cmap("inferno", 256)


# ---------------------------------------------------------------------------
# Image renderings
# ---------------------------------------------------------------------------


def flow_to_color(flow: np.ndarray, max_flow: Optional[float] = None) -> np.ndarray:
    """Colour-code an ``H × W × 2`` flow: hue = direction, saturation = magnitude.

    Magnitudes are scaled by *max_flow* (the largest magnitude when omitted).
    Returns ``uint8`` RGB.
    """
    u, v = flow[..., 0], flow[..., 1]
    mag = np.sqrt(u ** 2 + v ** 2)
    scale = max_flow if max_flow else max(float(mag.max()), 1e-6)
    hsv = np.empty(flow.shape[:2] + (3,))
    hsv[..., 0] = (np.arctan2(-v, -u) / np.pi + 1.0) / 2.0
    hsv[..., 1] = np.clip(mag / scale, 0.0, 1.0)
    hsv[..., 2] = 1.0
    return (hsv_to_rgb(hsv) * 255.0).round().astype(np.uint8)


def colorize(values: np.ndarray, vmax: Optional[float] = None, cmap=_DISP_COLORMAP) -> np.ndarray:
    """Map a 2-D array to ``uint8`` RGB with *cmap*, normalised to ``[0, vmax]``."""
    values = np.asarray(values, dtype=np.float64)
    top = vmax if vmax else np.percentile(values, 95)
    normed = np.clip(values / max(top, 1e-12), 0.0, 1.0)
    return (cmap(normed)[..., :3] * 255.0).round().astype(np.uint8)


def colorize_disparity(disp: np.ndarray) -> np.ndarray:
    return colorize(disp, cmap=_DISP_COLORMAP)


def flow_error_map(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray, vmax: float = 10.0) -> np.ndarray:
    """End-point error rendered with an inferno ramp; invalid pixels black."""
    err = np.linalg.norm(pred - gt, axis=-1)
    image = colorize(err, vmax=vmax, cmap=_ERROR_COLORMAP)
    image[~np.asarray(valid, dtype=bool)] = 0
    return image


def depth_error_map(pred: np.ndarray, gt: np.ndarray, vmax: float = 0.5) -> np.ndarray:
    """Absolute relative depth error on pixels with ground truth; others black."""
    valid = gt > 0
    err = np.zeros_like(gt, dtype=np.float64)
    err[valid] = np.abs(pred[valid] - gt[valid]) / gt[valid]
    image = colorize(err, vmax=vmax, cmap=_ERROR_COLORMAP)
    image[~valid] = 0
    return image


def save_png(path: Path, rgb: np.ndarray) -> Path:
    """Write an RGB ``uint8`` image."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), np.ascontiguousarray(rgb[..., ::-1])):
        raise OSError(f"Could not write {path}")
    return path


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------


def plot_training_curves(
    records: Sequence[Dict], out_path: Path, keys: Optional[Sequence[str]] = None
) -> Path:
    """Plot loss components of a training log against the global step.

    One line per ``(stage, key)``; *keys* defaults to ``total``.
    """
    keys = list(keys or ["total"])
    fig, ax = plt.subplots(figsize=(8, 4.5))
    stages = sorted({r["stage"] for r in records})
    for stage in stages:
        rows = [r for r in records if r["stage"] == stage]
        steps = [r["global_step"] for r in rows]
        for key in keys:
            values = [r.get(key) for r in rows]
            if any(v is None for v in values):
                continue
            ax.plot(steps, values, label=f"stage {stage}: {key}")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_ablation(records: Sequence[Dict], out_path: Path, metric: str = "epe") -> Path:
    """Bar chart of *metric* per ablation model, mean ± std over seeds."""
    by_model: Dict[str, List[float]] = {}
    for r in records:
        value = r.get("flow", {}).get(metric, r.get("depth", {}).get(metric))
        if value is not None:
            by_model.setdefault(r["model_id"], []).append(float(value))
    models = sorted(by_model, key=lambda m: ["I", "II", "III", "IV", "V", "VI"].index(m))
    means = [np.mean(by_model[m]) for m in models]
    stds = [np.std(by_model[m]) for m in models]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(models, means, yerr=stds, capsize=4, color="#4c72b0")
    ax.set_xlabel("model")
    ax.set_ylabel(metric)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
