"""
Shared multi-scale feature encoder, camera pose network and camera geometry
helpers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

#: Channel widths of the five strided encoder stages (1/2 … 1/32 resolution).
DEFAULT_ENCODER_WIDTHS: Tuple[int, ...] = (16, 32, 64, 96, 128)

#: Number of pyramid scales that take part in the depth/flow exchange.
EXCHANGE_SCALES = 4

#: Largest rotation angle a pose estimate may carry (radians).
MAX_ROTATION = math.pi * (1.0 - 1e-6)


# ---------------------------------------------------------------------------
# Camera intrinsics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics of an image of ``width × height`` pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}.")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"Principal point ({self.cx}, {self.cy}) lies outside the "
                f"{self.width}x{self.height} image."
            )

    def resized(self, width: int, height: int) -> "CameraIntrinsics":
        """Return the intrinsics of the same camera after resizing the image."""
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=self.cx * sx,
            cy=self.cy * sy,
            width=width,
            height=height,
        )

    def matrix(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Return the 3×3 calibration matrix K."""
        return torch.tensor(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=dtype,
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }


# ---------------------------------------------------------------------------
# Pose algebra
# ---------------------------------------------------------------------------


def rotation_from_axis_angle(axis_angle: torch.Tensor) -> torch.Tensor:
    """Rodrigues' formula: ``[..., 3]`` axis-angle → ``[..., 3, 3]`` rotation."""
    angle = axis_angle.norm(dim=-1, keepdim=True)
    small = angle < 1e-12
    safe = torch.where(small, torch.ones_like(angle), angle)
    axis = axis_angle / safe
    x, y, z = axis.unbind(-1)
    zero = torch.zeros_like(x)
    skew = torch.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], dim=-1
    ).reshape(*axis_angle.shape[:-1], 3, 3)
    eye = torch.eye(3, dtype=axis_angle.dtype, device=axis_angle.device).expand_as(skew)
    sin = torch.sin(angle).unsqueeze(-1)
    cos = torch.cos(angle).unsqueeze(-1)
    rotation = eye + sin * skew + (1.0 - cos) * (skew @ skew)
    return torch.where(small.unsqueeze(-1), eye, rotation)


@dataclass
class PoseEstimate:
    """Rigid transform taking points from the target camera into the source camera.

    ``rotation`` is an axis-angle ``[B, 3]`` in radians and ``translation`` a
    ``[B, 3]`` vector in (scale-ambiguous) scene units, so a target-camera
    point ``X`` lands at ``R·X + t`` in the source camera.
    """

    rotation: torch.Tensor
    translation: torch.Tensor

    def matrix(self) -> torch.Tensor:
        """Return the ``[B, 4, 4]`` homogeneous transform."""
        batch = self.rotation.shape[0]
        transform = torch.zeros(
            batch, 4, 4, dtype=self.rotation.dtype, device=self.rotation.device
        )
        transform[:, :3, :3] = rotation_from_axis_angle(self.rotation)
        transform[:, :3, 3] = self.translation
        transform[:, 3, 3] = 1.0
        return transform

    def vector(self) -> torch.Tensor:
        """Return the ``[B, 6]`` stacked (rotation, translation) vector."""
        return torch.cat([self.rotation, self.translation], dim=1)

    @classmethod
    def identity(cls, batch: int, dtype: torch.dtype = torch.float32) -> "PoseEstimate":
        return cls(torch.zeros(batch, 3, dtype=dtype), torch.zeros(batch, 3, dtype=dtype))


# ---------------------------------------------------------------------------
# Feature encoder
# ---------------------------------------------------------------------------


def conv(in_planes: int, out_planes: int, stride: int = 1) -> nn.Sequential:
    """3×3 convolution followed by LeakyReLU(0.1)."""
    return nn.Sequential(
        nn.Conv2d(in_planes, out_planes, kernel_size=3, stride=stride, padding=1, bias=True),
        nn.LeakyReLU(0.1),
    )


@dataclass
class FeaturePyramid:
    """Per-frame encoder features.

    ``stages[k]`` is the output of encoder stage ``k`` at ``1 / 2**(k+1)``
    input resolution.  The first :data:`EXCHANGE_SCALES` stages are the
    exchange scales; scale ``i = 1`` (coarsest) is ``stages[3]`` and
    ``i = 4`` (finest) is ``stages[0]``.
    """

    stages: List[torch.Tensor]

    def level(self, i: int) -> torch.Tensor:
        """Return the exchange-scale feature map Φ_en^i, ``i ∈ 1..4``."""
        if not 1 <= i <= EXCHANGE_SCALES:
            raise ValueError(f"Exchange scale must be in 1..{EXCHANGE_SCALES}, got {i}.")
        return self.stages[EXCHANGE_SCALES - i]

    @property
    def levels(self) -> List[torch.Tensor]:
        """Exchange-scale maps ordered i = 1 (coarsest) .. 4 (finest)."""
        return [self.level(i) for i in range(1, EXCHANGE_SCALES + 1)]

    @property
    def bottleneck(self) -> torch.Tensor:
        return self.stages[-1]


class FeatureEncoder(nn.Module):
    """Five-stage strided convolutional pyramid shared by both frames."""

    def __init__(self, widths: Sequence[int] = DEFAULT_ENCODER_WIDTHS, in_channels: int = 3):
        super().__init__()
        if len(widths) != EXCHANGE_SCALES + 1:
            raise ValueError(
                f"The encoder needs {EXCHANGE_SCALES + 1} stage widths, got {len(widths)}."
            )
        self.widths = tuple(int(w) for w in widths)
        stages = []
        prev = in_channels
        for width in self.widths:
            stages.append(
                nn.Sequential(conv(prev, width, stride=2), conv(width, width), conv(width, width))
            )
            prev = width
        self.stages = nn.ModuleList(stages)

    @property
    def divisor(self) -> int:
        return 2 ** len(self.stages)

    def forward(self, frame: torch.Tensor) -> FeaturePyramid:
        """Encode one ``[B, 3, H, W]`` frame; H and W must be divisible by 32."""
        check_divisible(frame, self.divisor)
        feats = []
        x = frame
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return FeaturePyramid(feats)


def check_divisible(frame: torch.Tensor, divisor: int) -> None:
    if frame.dim() != 4:
        raise ValueError(f"Frames must be [batch, 3, height, width], got {tuple(frame.shape)}.")
    h, w = frame.shape[-2:]
    if h % divisor or w % divisor:
        pad_h = (-h) % divisor
        pad_w = (-w) % divisor
        raise ValueError(
            f"Frame size {w}x{h} is not divisible by {divisor}.\n"
            f"  Pad by {pad_w} column(s) and {pad_h} row(s) to "
            f"{w + pad_w}x{h + pad_h}, or resize to a multiple of {divisor}."
        )


# ---------------------------------------------------------------------------
# Pose network
# ---------------------------------------------------------------------------


class PoseNet(nn.Module):
    """Small encoder on a concatenated frame pair regressing a 6-DoF pose."""

    def __init__(self, widths: Sequence[int] = (16, 32, 64, 128, 128), scale: float = 0.01):
        super().__init__()
        layers = []
        prev = 6
        for width in widths:
            layers.append(conv(prev, width, stride=2))
            prev = width
        self.features = nn.Sequential(*layers)
        self.head = nn.Conv2d(prev, 6, kernel_size=1)
        self.scale = scale

    def forward(self, frame_t: torch.Tensor, frame_s: torch.Tensor) -> PoseEstimate:
        """Estimate the transform taking frame-t camera points into the frame-s camera."""
        if frame_t.shape != frame_s.shape:
            raise ValueError(
                "Pose estimation needs frames of identical size:\n"
                f"  frame_t : {tuple(frame_t.shape)}\n"
                f"  frame_s : {tuple(frame_s.shape)}"
            )
        x = self.features(torch.cat([frame_t, frame_s], dim=1))
        raw = self.head(x).mean(dim=(2, 3)) * self.scale
        rotation = raw[:, :3]
        angle = rotation.norm(dim=1, keepdim=True)
        shrink = torch.clamp(MAX_ROTATION / angle.clamp_min(1e-12), max=1.0)
        return PoseEstimate(rotation=rotation * shrink, translation=raw[:, 3:])
