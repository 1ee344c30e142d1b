"""
Unsupervised objectives.

* ``depth_loss`` – minimum reprojection over the two temporal neighbours
  with auto-masking and edge-aware disparity smoothness, averaged over four
  output scales.
* ``flow_loss`` – photometric warping error plus edge-aware flow
  smoothness, weighted per flow scale.

Both return a :class:`LossReport` whose ``total`` is the sum of its
``components``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from depthflow.backbone import CameraIntrinsics, PoseEstimate
from depthflow.decoders import FlowPyramidOutput, disp_to_depth
from depthflow.tensor_core import downsample_area, pixel_grid, sample_bilinear, warp_bilinear

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

#: Weight of the SSIM term in the photometric blend.
SSIM_WEIGHT = 0.85

#: Flow-loss weights for scales i = 1 (coarsest) .. 4.
FLOW_SCALE_WEIGHTS: Tuple[float, ...] = (0.32, 0.08, 0.02, 0.01)

#: Fraction of rows/columns on each side left out of the flow photometric mean.
FLOW_BORDER = 0.05

#: Photometric value assigned to pixels whose reprojection leaves the valid frustum.
INVALID_PENALTY = 1e3

#: Points closer than this to the camera plane count as behind the camera.
MIN_PROJECTED_DEPTH = 1e-3


@dataclass
class LossReport:
    """Scalar total plus its named weighted contributions."""

    total: torch.Tensor
    components: Dict[str, torch.Tensor] = field(default_factory=dict)

    def __add__(self, other: "LossReport") -> "LossReport":
        overlap = set(self.components) & set(other.components)
        if overlap:
            raise ValueError(f"Loss components reported twice: {sorted(overlap)}")
        return LossReport(self.total + other.total, {**self.components, **other.components})

    def as_floats(self) -> Dict[str, float]:
        """Detached Python floats, ``total`` first, for logging."""
        record = {"total": float(self.total.detach())}
        record.update({k: float(v.detach()) for k, v in self.components.items()})
        return record


# ---------------------------------------------------------------------------
# Photometric terms
# ---------------------------------------------------------------------------


class SSIM(nn.Module):
    """Per-pixel ``(1 - SSIM) / 2`` over 3×3 windows, reflection padded."""

    def __init__(self):
        super().__init__()
        self.mu_x_pool = nn.AvgPool2d(3, 1)
        self.mu_y_pool = nn.AvgPool2d(3, 1)
        self.sig_x_pool = nn.AvgPool2d(3, 1)
        self.sig_y_pool = nn.AvgPool2d(3, 1)
        self.sig_xy_pool = nn.AvgPool2d(3, 1)
        self.refl = nn.ReflectionPad2d(1)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        x = self.refl(x)
        y = self.refl(y)
        mu_x = self.mu_x_pool(x)
        mu_y = self.mu_y_pool(y)
        sigma_x = self.sig_x_pool(x ** 2) - mu_x ** 2
        sigma_y = self.sig_y_pool(y ** 2) - mu_y ** 2
        sigma_xy = self.sig_xy_pool(x * y) - mu_x * mu_y
        n = (2 * mu_x * mu_y + SSIM_C1) * (2 * sigma_xy + SSIM_C2)
        d = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
        return torch.clamp((1 - n / d) / 2, 0, 1)


_ssim = SSIM()


def photometric_loss(pred: torch.Tensor, target: torch.Tensor, use_ssim: bool = True) -> torch.Tensor:
    """``0.85 · (1 - SSIM) / 2 + 0.15 · |pred - target|`` averaged over channels.

    Returns a ``[B, 1, H, W]`` map.  With *use_ssim* off only the L1 term
    remains (at full weight).

    Raises
    ------
    ValueError
        When the shapes differ.
    """
    if pred.shape != target.shape:
        raise ValueError(
            "photometric_loss needs images of identical shape:\n"
            f"  pred   : {tuple(pred.shape)}\n"
            f"  target : {tuple(target.shape)}"
        )
    l1 = (target - pred).abs().mean(1, keepdim=True)
    if not use_ssim:
        return l1
    ssim = _ssim(pred, target).mean(1, keepdim=True)
    return SSIM_WEIGHT * ssim + (1.0 - SSIM_WEIGHT) * l1


def smoothness(field_map: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Edge-aware first-order smoothness of *field_map* guided by *image*."""
    grad_x = (field_map[:, :, :, :-1] - field_map[:, :, :, 1:]).abs()
    grad_y = (field_map[:, :, :-1, :] - field_map[:, :, 1:, :]).abs()
    img_x = (image[:, :, :, :-1] - image[:, :, :, 1:]).abs().mean(1, keepdim=True)
    img_y = (image[:, :, :-1, :] - image[:, :, 1:, :]).abs().mean(1, keepdim=True)
    grad_x = grad_x * torch.exp(-img_x)
    grad_y = grad_y * torch.exp(-img_y)
    return grad_x.mean() + grad_y.mean()


# ---------------------------------------------------------------------------
# Camera geometry
# ---------------------------------------------------------------------------

CameraLike = Union[CameraIntrinsics, torch.Tensor]
PoseLike = Union[PoseEstimate, torch.Tensor]


def _camera_matrix(k: CameraLike, batch: int, like: torch.Tensor) -> torch.Tensor:
    if isinstance(k, CameraIntrinsics):
        k = k.matrix(like.dtype)
    k = k.to(dtype=like.dtype, device=like.device)
    if k.dim() == 2:
        k = k.unsqueeze(0).expand(batch, 3, 3)
    if k.shape != (batch, 3, 3):
        raise ValueError(f"Intrinsics must be [3, 3] or [{batch}, 3, 3], got {tuple(k.shape)}.")
    return k


def _pose_matrix(pose: PoseLike, like: torch.Tensor) -> torch.Tensor:
    if isinstance(pose, PoseEstimate):
        pose = pose.matrix()
    return pose.to(dtype=like.dtype, device=like.device)


def backproject(depth: torch.Tensor, k: CameraLike) -> torch.Tensor:
    """Lift a ``[B, 1, H, W]`` depth map to camera points ``[B, 3, H, W]``."""
    b, _, h, w = depth.shape
    k_inv = torch.linalg.inv(_camera_matrix(k, b, depth))
    xs, ys = pixel_grid(b, h, w, depth.dtype, depth.device)
    pix = torch.stack([xs, ys, torch.ones_like(xs)], dim=1).reshape(b, 3, -1)
    rays = k_inv @ pix
    return (rays * depth.reshape(b, 1, -1)).reshape(b, 3, h, w)


def rigid_coordinates(
    depth: torch.Tensor, pose: PoseLike, k: CameraLike
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Where each target pixel lands in the source image.

    Returns ``(x, y, valid)``: source pixel coordinates ``[B, H, W]`` and a
    ``[B, 1, H, W]`` mask of points in front of the source camera.

    Raises
    ------
    ValueError
        When *depth* contains non-finite values.
    """
    if not torch.isfinite(depth).all():
        raise ValueError("view synthesis received a non-finite depth map.")
    b, _, h, w = depth.shape
    kmat = _camera_matrix(k, b, depth)
    transform = _pose_matrix(pose, depth)
    points = backproject(depth, kmat).reshape(b, 3, -1)
    moved = transform[:, :3, :3] @ points + transform[:, :3, 3:4]
    z = moved[:, 2:3]
    valid = z > MIN_PROJECTED_DEPTH
    safe_z = torch.where(valid, z, torch.ones_like(z))
    proj = kmat @ (moved / safe_z)
    x = proj[:, 0].reshape(b, h, w)
    y = proj[:, 1].reshape(b, h, w)
    return x, y, valid.reshape(b, 1, h, w)


def rigid_flow(depth: torch.Tensor, pose: PoseLike, k: CameraLike) -> torch.Tensor:
    """Flow induced by camera motion over a static scene of the given depth."""
    b, _, h, w = depth.shape
    x, y, _ = rigid_coordinates(depth, pose, k)
    xs, ys = pixel_grid(b, h, w, depth.dtype, depth.device)
    return torch.stack([x - xs, y - ys], dim=1)


def view_synthesis(
    frame_s: torch.Tensor, depth_t: torch.Tensor, pose: PoseLike, k: CameraLike
) -> torch.Tensor:
    """Reconstruct frame t by sampling *frame_s* through depth, pose and intrinsics.

    *pose* maps frame-t camera points into the frame-s camera.  Points that
    end up behind the source camera contribute zero.
    """
    x, y, valid = rigid_coordinates(depth_t, pose, k)
    return sample_bilinear(frame_s, x, y) * valid.to(frame_s.dtype)


# ---------------------------------------------------------------------------
# Depth loss
# ---------------------------------------------------------------------------


def depth_loss(
    frames: Sequence[Optional[torch.Tensor]],
    disparities: Sequence[torch.Tensor],
    poses: Sequence[Optional[PoseLike]],
    k: CameraLike,
    disparity_smoothness: float = 1e-3,
    min_depth: float = 0.1,
    max_depth: float = 100.0,
    automask: bool = True,
    use_ssim: bool = True,
) -> LossReport:
    """Minimum-reprojection depth loss over a frame triplet.

    Parameters
    ----------
    frames:
        ``(frame_{t-1}, frame_t, frame_{t+1})`` at full resolution.
    disparities:
        Sigmoid disparities of frame t, finest scale first.
    poses:
        ``(pose t→t-1, pose t→t+1)``.
    k:
        Full-resolution intrinsics.

    Raises
    ------
    ValueError
        When a neighbour frame or pose is missing.
    """
    if len(frames) != 3 or any(f is None for f in frames):
        raise ValueError("depth_loss needs the full (t-1, t, t+1) triplet.")
    if len(poses) != 2 or any(p is None for p in poses):
        raise ValueError("depth_loss needs poses towards both neighbours (t-1 and t+1).")
    prev_frame, target, next_frame = frames
    sources = (prev_frame, next_frame)
    height, width = target.shape[-2:]
    num_scales = len(disparities)

    identity = None
    if automask:
        identity = torch.cat([photometric_loss(src, target, use_ssim) for src in sources], dim=1)

    components: Dict[str, torch.Tensor] = {}
    for scale, disp in enumerate(disparities):
        disp_full = disp
        if disp.shape[-2:] != (height, width):
            disp_full = F.interpolate(disp, (height, width), mode="bilinear", align_corners=False)
        _, depth = disp_to_depth(disp_full, min_depth, max_depth)

        reprojection = []
        for source, pose in zip(sources, poses):
            x, y, valid = rigid_coordinates(depth, pose, k)
            recon = sample_bilinear(source, x, y)
            loss = photometric_loss(recon, target, use_ssim)
            reprojection.append(torch.where(valid, loss, torch.full_like(loss, INVALID_PENALTY)))
        combined = torch.cat(reprojection, dim=1)
        if identity is not None:
            # Identity first so ties resolve towards it.
            combined = torch.cat([identity, combined], dim=1)
        to_optimise, _ = torch.min(combined, dim=1)
        usable = to_optimise < INVALID_PENALTY
        photometric = (
            to_optimise[usable].mean() if usable.any() else to_optimise.sum() * 0.0
        )

        color = downsample_area(target, *disp.shape[-2:])
        norm_disp = disp / (disp.mean(2, True).mean(3, True) + 1e-7)
        smooth = disparity_smoothness * smoothness(norm_disp, color) / (2 ** scale)

        components[f"photometric_depth/s{scale}"] = photometric / num_scales
        components[f"smooth_depth/s{scale}"] = smooth / num_scales

    total = torch.stack(list(components.values())).sum()
    return LossReport(total, components)


# ---------------------------------------------------------------------------
# Flow loss
# ---------------------------------------------------------------------------


def _border_mean(loss_map: torch.Tensor, border: float) -> torch.Tensor:
    h, w = loss_map.shape[-2:]
    bh = int(h * border)
    bw = int(w * border)
    return loss_map[:, :, bh : h - bh, bw : w - bw].mean()


def flow_loss(
    frame_t: torch.Tensor,
    frame_s: torch.Tensor,
    flows: Union[FlowPyramidOutput, Sequence[torch.Tensor]],
    scale_weights: Sequence[float] = FLOW_SCALE_WEIGHTS,
    flow_smoothness: float = 1e-2,
    border: float = FLOW_BORDER,
    use_ssim: bool = True,
) -> LossReport:
    """Photometric + edge-aware smoothness flow loss over scales i = 1..4.

    Each scale compares frame t with frame s warped by that scale's flow,
    both area-downsampled to the flow's resolution.  The smoothness weight
    halves from one scale to the next finer one.

    Raises
    ------
    ValueError
        When the number of flows differs from the number of scale weights.
    """
    pyramid = flows.flows if isinstance(flows, FlowPyramidOutput) else list(flows)
    if len(pyramid) != len(scale_weights):
        raise ValueError(
            f"flow_loss expects {len(scale_weights)} flow scales, got {len(pyramid)}."
        )
    components: Dict[str, torch.Tensor] = {}
    for i, (flow, weight) in enumerate(zip(pyramid, scale_weights), start=1):
        h, w = flow.shape[-2:]
        target = downsample_area(frame_t, h, w)
        source = downsample_area(frame_s, h, w)
        warped = warp_bilinear(source, flow)
        photo = _border_mean(photometric_loss(warped, target, use_ssim), border)
        smooth = flow_smoothness * (0.5 ** (i - 1)) * smoothness(flow, target)
        components[f"photometric_flow/i{i}"] = weight * photo
        components[f"smooth_flow/i{i}"] = weight * smooth

    total = torch.stack(list(components.values())).sum()
    return LossReport(total, components)
