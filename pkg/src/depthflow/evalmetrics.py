"""
Depth and flow metrics, parameter counting and throughput measurement.
"""

from __future__ import annotations

import platform
import statistics
import time
from dataclasses import asdict, dataclass, fields
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from depthflow.model import TEACHER_PREFIX

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

MIN_EVAL_DEPTH = 1e-3
MAX_EVAL_DEPTH = 80.0

#: KITTI 2015 outlier thresholds: absolute pixels and fraction of |gt|.
F1_ABS_THRESHOLD = 3.0
F1_REL_THRESHOLD = 0.05


# ---------------------------------------------------------------------------
# Depth
# ---------------------------------------------------------------------------


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rms: float
    log_rms: float
    delta1: float
    delta2: float
    delta3: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def garg_crop_mask(height: int, width: int) -> np.ndarray:
    """Boolean mask of the Garg/Eigen evaluation crop."""
    mask = np.zeros((height, width), dtype=bool)
    top, bottom = int(0.40810811 * height), int(0.99189189 * height)
    left, right = int(0.03594771 * width), int(0.96405229 * width)
    mask[top:bottom, left:right] = True
    return mask


def depth_metrics(
    pred: np.ndarray,
    gt: np.ndarray,
    median_scale: bool = True,
    garg_crop: bool = False,
    min_depth: float = MIN_EVAL_DEPTH,
    max_depth: float = MAX_EVAL_DEPTH,
) -> DepthMetrics:
    """Eigen depth metrics over the pixels where ``min_depth < gt < max_depth``.

    Parameters
    ----------
    pred, gt:
        Depth maps of identical shape; *gt* may be sparse (0 = no measurement).
    median_scale:
        Rescale *pred* by ``median(gt) / median(pred)`` over the valid pixels.
    garg_crop:
        Restrict the valid pixels to the Garg/Eigen crop (KITTI only).

    Raises
    ------
    ValueError
        When the shapes differ or no valid ground-truth pixel remains.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"Prediction {pred.shape} and ground truth {gt.shape} differ in shape.")
    valid = (gt > min_depth) & (gt < max_depth)
    if garg_crop:
        valid &= garg_crop_mask(*gt.shape[-2:])
    if not valid.any():
        raise ValueError("depth_metrics: ground truth has no valid pixel.")

    pred = pred[valid]
    gt = gt[valid]
    if median_scale:
        pred = pred * (np.median(gt) / np.median(pred))
    pred = np.clip(pred, min_depth, max_depth)

    thresh = np.maximum(gt / pred, pred / gt)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(gt - pred) / gt)),
        sq_rel=float(np.mean((gt - pred) ** 2 / gt)),
        rms=float(np.sqrt(np.mean((gt - pred) ** 2))),
        log_rms=float(np.sqrt(np.mean((np.log(gt) - np.log(pred)) ** 2))),
        delta1=float((thresh < 1.25).mean()),
        delta2=float((thresh < 1.25 ** 2).mean()),
        delta3=float((thresh < 1.25 ** 3).mean()),
    )


# ---------------------------------------------------------------------------
# Flow
# ---------------------------------------------------------------------------


@dataclass
class FlowMetrics:
    epe: float
    epe_noc: float
    f1: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def flow_metrics(
    pred: np.ndarray,
    gt: np.ndarray,
    valid: np.ndarray,
    noc: Optional[np.ndarray] = None,
) -> FlowMetrics:
    """End-point error, non-occluded end-point error and KITTI F1 outlier rate.

    *pred* and *gt* are ``H × W × 2``; *valid* and *noc* are ``H × W`` masks.
    Without *noc*, ``epe_noc`` equals ``epe``.

    Raises
    ------
    ValueError
        When the shapes differ or a mask selects no pixel.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 2:
        raise ValueError(f"Flow prediction {pred.shape} and ground truth {gt.shape} must be H x W x 2.")
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != gt.shape[:-1]:
        raise ValueError(f"Validity mask {valid.shape} does not match the flow {gt.shape[:-1]}.")
    if not valid.any():
        raise ValueError("flow_metrics: no valid ground-truth pixel.")

    err = np.linalg.norm(pred - gt, axis=-1)
    mag = np.linalg.norm(gt, axis=-1)
    epe = float(err[valid].mean())
    outliers = (err > F1_ABS_THRESHOLD) & (err > F1_REL_THRESHOLD * mag)
    f1 = float(100.0 * outliers[valid].mean())

    epe_noc = epe
    if noc is not None:
        selected = valid & np.asarray(noc, dtype=bool)
        if not selected.any():
            raise ValueError("flow_metrics: the noc mask leaves no valid pixel.")
        epe_noc = float(err[selected].mean())
    return FlowMetrics(epe=epe, epe_noc=epe_noc, f1=f1)


def region_epe(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """Mean end-point error over *mask* (e.g. the rigid background)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("region_epe: empty region.")
    err = np.linalg.norm(np.asarray(pred, np.float64) - np.asarray(gt, np.float64), axis=-1)
    return float(err[mask].mean())


def average_metrics(records: Sequence) -> Dict[str, float]:
    """Field-wise mean of a list of :class:`DepthMetrics` or :class:`FlowMetrics`."""
    if not records:
        raise ValueError("Nothing to average.")
    names = [f.name for f in fields(records[0])]
    return {name: float(np.mean([getattr(r, name) for r in records])) for name in names}


# ---------------------------------------------------------------------------
# Model size and speed
# ---------------------------------------------------------------------------


def count_parameters(model: nn.Module) -> int:
    """Number of parameter scalars, leaving out the EMA teacher copy."""
    return sum(
        p.numel() for name, p in model.named_parameters() if not name.startswith(TEACHER_PREFIX)
    )


@dataclass
class FpsMeasurement:
    fps: float
    latency_ms: float
    n_runs: int
    width: int
    height: int
    hardware: str

    def to_dict(self) -> Dict:
        return asdict(self)


def describe_hardware(device: torch.device) -> str:
    if device.type == "cuda":
        return torch.cuda.get_device_name(device)
    return f"{platform.processor() or platform.machine()} (cpu, {torch.get_num_threads()} threads)"


def measure_fps(
    model: nn.Module,
    width: int,
    height: int,
    n_runs: int = 10,
    warmup: int = 2,
    device: Optional[torch.device] = None,
    forward: Optional[Callable[[torch.Tensor, torch.Tensor], object]] = None,
) -> FpsMeasurement:
    """Median single-pair throughput of a full (depth + flow) forward pass.

    *forward* defaults to ``model.predict``.  Absolute numbers depend on the
    hardware, which is recorded alongside.
    """
    if n_runs < 1:
        raise ValueError(f"n_runs must be >= 1, got {n_runs}.")
    device = device or next(model.parameters()).device
    run = forward or model.predict
    frame_t = torch.rand(1, 3, height, width, device=device)
    frame_s = torch.rand(1, 3, height, width, device=device)

    def sync() -> None:
        if device.type == "cuda":
            torch.cuda.synchronize(device)

    model.eval()
    latencies: List[float] = []
    with torch.no_grad():
        for _ in range(warmup):
            run(frame_t, frame_s)
        sync()
        for _ in range(n_runs):
            start = time.perf_counter()
            run(frame_t, frame_s)
            sync()
            latencies.append(time.perf_counter() - start)
    latency = statistics.median(latencies)
    return FpsMeasurement(
        fps=1.0 / latency,
        latency_ms=1000.0 * latency,
        n_runs=n_runs,
        width=width,
        height=height,
        hardware=describe_hardware(device),
    )


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


def format_table(rows: Sequence[Dict[str, object]], columns: Optional[Sequence[str]] = None) -> str:
    """Render *rows* as an aligned plain-text table."""
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())

    def cell(value: object) -> str:
        if isinstance(value, float):
            return f"{value:.4f}"
        return str(value)

    cells = [[cell(row.get(c, "")) for c in columns] for row in rows]
    widths = [max(len(c), *(len(r[i]) for r in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in cells)
    return "\n".join(lines)
