"""
Cross-task exchange blocks: depth-to-flow (D2F), flow-to-depth (F2D) and the
dual-head mask pyramid that splits fused features into rigid and non-rigid
streams.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from depthflow.tensor_core import (
    DEFAULT_RADIUS,
    cost_volume,
    normalize_01,
    upsample_bilinear2x,
    warp_bilinear,
)

# ---------------------------------------------------------------------------
# Result types
# ---------------------------------------------------------------------------


@dataclass
class DualHeadFeature:
    """Complementary split of a fused feature map: rigid + non-rigid == fused."""

    head_rigid: torch.Tensor
    head_nonrigid: torch.Tensor


@dataclass
class D2FOutput:
    """Everything a D2F block hands to the flow estimator and to the next scale."""

    cost: torch.Tensor
    mask_t: Optional[torch.Tensor]
    mask_s: Optional[torch.Tensor]
    fused_t: torch.Tensor
    fused_s: torch.Tensor

    def __iter__(self):
        # Unpacks as (cost volume, mask_t, mask_s).
        return iter((self.cost, self.mask_t, self.mask_s))


def _check_aligned(name_a: str, a: torch.Tensor, name_b: str, b: torch.Tensor) -> None:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(
            f"'{name_a}' and '{name_b}' are not at the same scale:\n"
            f"  {name_a} : {tuple(a.shape)}\n"
            f"  {name_b} : {tuple(b.shape)}"
        )


# ---------------------------------------------------------------------------
# Fusion and dual-head split
# ---------------------------------------------------------------------------


class FeatureFusion(nn.Module):
    """Φ^i = Conv1×1(Φ_en^i ⊕ Φ_depth^i)."""

    def __init__(self, enc_channels: int, depth_channels: int, out_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(enc_channels + depth_channels, out_channels, kernel_size=1)

    def forward(self, enc: torch.Tensor, depth_feat: torch.Tensor) -> torch.Tensor:
        _check_aligned("enc", enc, "depth_feat", depth_feat)
        return self.proj(torch.cat([enc, depth_feat], dim=1))


def fuse_features(fusion: FeatureFusion, enc: torch.Tensor, depth_feat: torch.Tensor) -> torch.Tensor:
    """Functional alias of :meth:`FeatureFusion.forward`."""
    return fusion(enc, depth_feat)


def dual_head_split(fused: torch.Tensor, mask: torch.Tensor) -> DualHeadFeature:
    """Gate *fused* by a single-channel *mask* into complementary heads.

    Raises
    ------
    ValueError
        When *mask* is not a single-channel map aligned with *fused*.
    """
    if mask.dim() != 4 or mask.shape[1] != 1:
        raise ValueError(f"A dual-head mask must be [batch, 1, h, w], got {tuple(mask.shape)}.")
    _check_aligned("fused", fused, "mask", mask)
    rigid = mask * fused
    return DualHeadFeature(head_rigid=rigid, head_nonrigid=fused - rigid)


class MaskUpdate(nn.Module):
    """Dual-head mask at one scale.

    ``M^1 = σ(C³(ReLU(C³(Φ_en^1))))`` and, for ``i ≥ 2``,
    ``M^i = σ(C³(ReLU(C³(Φ_en^i)) ⊕ up(M^{i-1})))``.
    """

    def __init__(self, enc_channels: int, scale_index: int, hidden: int = 32):
        super().__init__()
        self.scale_index = scale_index
        self.reduce = nn.Conv2d(enc_channels, hidden, kernel_size=3, padding=1)
        extra = 1 if scale_index >= 2 else 0
        self.predict = nn.Conv2d(hidden + extra, 1, kernel_size=3, padding=1)

    def forward(self, enc: torch.Tensor, prev_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = torch.relu(self.reduce(enc))
        if self.scale_index >= 2:
            if prev_mask is None:
                raise ValueError(
                    f"The dual-head mask at scale {self.scale_index} needs the mask "
                    f"of scale {self.scale_index - 1}."
                )
            up = upsample_bilinear2x(prev_mask)
            _check_aligned("enc", enc, "upsampled prev_mask", up)
            x = torch.cat([x, up], dim=1)
        return torch.sigmoid(self.predict(x))


def update_mask(
    updater: MaskUpdate, enc: torch.Tensor, prev_mask: Optional[torch.Tensor]
) -> torch.Tensor:
    """Functional alias of :meth:`MaskUpdate.forward`."""
    return updater(enc, prev_mask)


# ---------------------------------------------------------------------------
# D2F
# ---------------------------------------------------------------------------


class D2FBlock(nn.Module):
    """Depth-to-flow block at one scale.

    Fuses encoder and depth features of both frames, warps the frame-s side by
    the upsampled coarser flow, optionally splits both sides into dual heads
    and correlates them into a cost volume.
    """

    def __init__(
        self,
        scale_index: int,
        enc_channels: int,
        depth_channels: int,
        fusion_channels: int,
        radius: int = DEFAULT_RADIUS,
        dual_head: bool = True,
        mask_hidden: int = 32,
    ):
        super().__init__()
        self.scale_index = scale_index
        self.radius = radius
        self.dual_head = dual_head
        self.fusion = FeatureFusion(enc_channels, depth_channels, fusion_channels)
        self.mask = MaskUpdate(enc_channels, scale_index, mask_hidden) if dual_head else None

    @property
    def heads(self) -> int:
        return 2 if self.dual_head else 1

    @property
    def out_channels(self) -> int:
        return self.heads * (2 * self.radius + 1) ** 2

    def forward(
        self,
        enc_t: torch.Tensor,
        enc_s: torch.Tensor,
        depth_t: torch.Tensor,
        depth_s: torch.Tensor,
        prev_mask_t: Optional[torch.Tensor],
        prev_mask_s: Optional[torch.Tensor],
        flow_up: torch.Tensor,
    ) -> D2FOutput:
        _check_aligned("enc_t", enc_t, "enc_s", enc_s)
        _check_aligned("enc_t", enc_t, "flow_up", flow_up)
        fused_t = self.fusion(enc_t, depth_t)
        fused_s = self.fusion(enc_s, depth_s)
        warped_s = warp_bilinear(fused_s, flow_up)

        if self.mask is None:
            cost = cost_volume(fused_t, warped_s, self.radius)
            return D2FOutput(cost, None, None, fused_t, fused_s)

        mask_t = self.mask(enc_t, prev_mask_t)
        mask_s = self.mask(enc_s, prev_mask_s)
        heads_t = dual_head_split(fused_t, mask_t)
        heads_s = dual_head_split(warped_s, warp_bilinear(mask_s, flow_up))
        cost = torch.cat(
            [
                cost_volume(heads_t.head_rigid, heads_s.head_rigid, self.radius),
                cost_volume(heads_t.head_nonrigid, heads_s.head_nonrigid, self.radius),
            ],
            dim=1,
        )
        return D2FOutput(cost, mask_t, mask_s, fused_t, fused_s)


# ---------------------------------------------------------------------------
# F2D
# ---------------------------------------------------------------------------


class F2DBlock(nn.Module):
    """Flow-to-depth refinement: Φ̃ = C³(Φ_depth ⊕ C_0).

    ``C_0`` is the zero-radius correlation of the min-max normalised flow
    features of frame t and of frame s warped to t by the current flow.  The
    3×3 convolution starts as the identity on the depth channels and ignores
    ``C_0``, so inserting the block does not change an already trained depth
    branch.
    """

    def __init__(self, depth_channels: int):
        super().__init__()
        self.refine = nn.Conv2d(depth_channels + 1, depth_channels, kernel_size=3, padding=1)
        with torch.no_grad():
            self.refine.weight.zero_()
            nn.init.dirac_(self.refine.weight[:, :depth_channels])
            self.refine.bias.zero_()

    def confidence(
        self, flow_feat_t: torch.Tensor, flow_feat_s: torch.Tensor, flow: torch.Tensor
    ) -> torch.Tensor:
        """Return the single-channel matching confidence ``C_0``."""
        _check_aligned("flow_feat_t", flow_feat_t, "flow_feat_s", flow_feat_s)
        warped = warp_bilinear(flow_feat_s, flow)
        return cost_volume(normalize_01(flow_feat_t), normalize_01(warped), 0)

    def forward(
        self,
        depth_feat_t: torch.Tensor,
        flow_feat_t: torch.Tensor,
        flow_feat_s: torch.Tensor,
        flow: torch.Tensor,
    ) -> torch.Tensor:
        _check_aligned("depth_feat_t", depth_feat_t, "flow_feat_t", flow_feat_t)
        c0 = self.confidence(flow_feat_t, flow_feat_s, flow)
        return self.refine(torch.cat([depth_feat_t, c0], dim=1))
