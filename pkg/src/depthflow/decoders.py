"""
Depth decoder (skip-connected up-convolutions with optional F2D refinement)
and coarse-to-fine flow decoder (PWC-style estimators fed by D2F cost
volumes).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from depthflow.backbone import EXCHANGE_SCALES, FeaturePyramid
from depthflow.exchange import D2FBlock, F2DBlock
from depthflow.tensor_core import (
    DEFAULT_RADIUS,
    cost_volume,
    upsample_flow,
    warp_bilinear,
)

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

MIN_DEPTH = 0.1
MAX_DEPTH = 100.0

#: Depth decoder widths at 1/1, 1/2, 1/4, 1/8, 1/16 input resolution.
DEFAULT_DEPTH_WIDTHS: Tuple[int, ...] = (16, 32, 64, 96, 128)

#: Widths of the five estimator convolutions at every flow scale.
DEFAULT_ESTIMATOR_WIDTHS: Tuple[int, ...] = (128, 128, 96, 64, 32)

#: Number of output scales of the depth decoder (1, 1/2, 1/4, 1/8).
DEPTH_OUTPUT_SCALES = 4


def disp_to_depth(
    disp: torch.Tensor, min_depth: float = MIN_DEPTH, max_depth: float = MAX_DEPTH
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Map a sigmoid disparity to ``(scaled_disp, depth)`` inside ``[min_depth, max_depth]``."""
    min_disp = 1.0 / max_depth
    max_disp = 1.0 / min_depth
    scaled = min_disp + (max_disp - min_disp) * disp
    return scaled, 1.0 / scaled


# ---------------------------------------------------------------------------
# Depth decoder
# ---------------------------------------------------------------------------


@dataclass
class FlowContext:
    """Flow-branch information F2D consumes at one scale."""

    flow_feat_t: torch.Tensor
    flow_feat_s: torch.Tensor
    flow: torch.Tensor


#: Called with (scale i, pre-refinement depth feature) at each exchange scale.
FlowContextProvider = Callable[[int, torch.Tensor], Optional[FlowContext]]


@dataclass
class DepthOutput:
    """Multi-scale sigmoid disparities plus the exchange-scale depth features."""

    disparities: List[torch.Tensor]
    features: List[torch.Tensor] = field(default_factory=list)

    def depth(self, scale: int = 0, min_depth: float = MIN_DEPTH, max_depth: float = MAX_DEPTH):
        return disp_to_depth(self.disparities[scale], min_depth, max_depth)[1]


class ConvBlock(nn.Module):
    """Reflection-padded 3×3 convolution followed by ELU."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.pad = nn.ReflectionPad2d(1)
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3)
        self.act = nn.ELU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.conv(self.pad(x)))


class DepthDecoder(nn.Module):
    """Monodepth-style decoder over the five encoder stages.

    Up-convolution level ``j`` works at ``1 / 2**j`` resolution; levels
    ``j = 4..1`` coincide with exchange scales ``i = 5 - j`` and are where
    the F2D blocks sit.
    """

    def __init__(
        self,
        enc_widths: Sequence[int],
        dec_widths: Sequence[int] = DEFAULT_DEPTH_WIDTHS,
        f2d: bool = False,
    ):
        super().__init__()
        if len(dec_widths) != EXCHANGE_SCALES + 1:
            raise ValueError(
                f"The depth decoder needs {EXCHANGE_SCALES + 1} widths, got {len(dec_widths)}."
            )
        self.enc_widths = tuple(enc_widths)
        self.dec_widths = tuple(dec_widths)
        top = EXCHANGE_SCALES

        upconv_a = []
        upconv_b = []
        for j in range(top + 1):
            in_a = self.enc_widths[-1] if j == top else self.dec_widths[j + 1]
            upconv_a.append(ConvBlock(in_a, self.dec_widths[j]))
            in_b = self.dec_widths[j] + (self.enc_widths[j - 1] if j > 0 else 0)
            upconv_b.append(ConvBlock(in_b, self.dec_widths[j]))
        self.upconv_a = nn.ModuleList(upconv_a)
        self.upconv_b = nn.ModuleList(upconv_b)
        self.dispconvs = nn.ModuleList(
            nn.Sequential(nn.ReflectionPad2d(1), nn.Conv2d(self.dec_widths[s], 1, kernel_size=3))
            for s in range(DEPTH_OUTPUT_SCALES)
        )
        self.f2d = (
            nn.ModuleList(F2DBlock(self.dec_widths[top + 1 - i]) for i in range(1, top + 1))
            if f2d
            else None
        )

    def exchange_width(self, i: int) -> int:
        """Channel width of Φ_depth^i."""
        return self.dec_widths[EXCHANGE_SCALES + 1 - i]

    def forward(
        self,
        pyramid: FeaturePyramid,
        flow_ctx: Optional[FlowContextProvider] = None,
        f2d_enabled: bool = False,
    ) -> DepthOutput:
        """Decode disparities for one frame.

        Parameters
        ----------
        pyramid:
            Encoder features of the frame.
        flow_ctx:
            Optional provider called at every exchange scale with the
            pre-refinement depth feature.  Its result feeds F2D.
        f2d_enabled:
            Refine each exchange-scale depth feature with its F2D block.

        Raises
        ------
        ValueError
            When F2D is requested without F2D blocks or without *flow_ctx*.
        """
        if f2d_enabled and self.f2d is None:
            raise ValueError("F2D refinement requested but the decoder was built without F2D blocks.")
        if f2d_enabled and flow_ctx is None:
            raise ValueError("F2D refinement needs flow context (teacher flow features and flows).")

        top = EXCHANGE_SCALES
        x = pyramid.bottleneck
        disparities: List[Optional[torch.Tensor]] = [None] * DEPTH_OUTPUT_SCALES
        features: List[torch.Tensor] = []
        for j in range(top, -1, -1):
            x = self.upconv_a[j](x)
            x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
            if j > 0:
                x = torch.cat([x, pyramid.stages[j - 1]], dim=1)
            x = self.upconv_b[j](x)
            if j > 0:
                i = top + 1 - j
                features.append(x)
                ctx = flow_ctx(i, x) if flow_ctx is not None else None
                if f2d_enabled:
                    if ctx is None:
                        raise ValueError(f"Flow context missing at exchange scale {i}.")
                    x = self.f2d[i - 1](x, ctx.flow_feat_t, ctx.flow_feat_s, ctx.flow)
            if j < DEPTH_OUTPUT_SCALES:
                disparities[j] = torch.sigmoid(self.dispconvs[j](x))
        return DepthOutput(disparities=list(disparities), features=features)


def decode_depth(
    decoder: DepthDecoder,
    pyramid: FeaturePyramid,
    flow_ctx: Optional[FlowContextProvider] = None,
    f2d_enabled: bool = False,
) -> DepthOutput:
    """Functional alias of :meth:`DepthDecoder.forward`."""
    return decoder(pyramid, flow_ctx=flow_ctx, f2d_enabled=f2d_enabled)


# ---------------------------------------------------------------------------
# Flow decoder
# ---------------------------------------------------------------------------


class FlowEstimator(nn.Module):
    """Five LeakyReLU convolutions and a 2-channel residual-flow head."""

    def __init__(self, in_channels: int, widths: Sequence[int] = DEFAULT_ESTIMATOR_WIDTHS):
        super().__init__()
        layers = []
        prev = in_channels
        for width in widths:
            layers += [nn.Conv2d(prev, width, kernel_size=3, padding=1), nn.LeakyReLU(0.1)]
            prev = width
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(prev, 2, kernel_size=3, padding=1)
        with torch.no_grad():
            self.head.weight.mul_(0.1)
            self.head.bias.zero_()

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        feat = self.body(x)
        return feat, self.head(feat)


@dataclass
class FlowScaleFeatures:
    """Intermediate features of one flow scale.

    ``feat_t`` / ``feat_s`` are the fused D2F features (encoder features when
    D2F is off) of both frames; ``estimator`` is the last estimator map.
    """

    feat_t: torch.Tensor
    feat_s: torch.Tensor
    estimator: torch.Tensor


@dataclass
class FlowDecodeState:
    """Running state of a coarse-to-fine decode."""

    flows: List[torch.Tensor] = field(default_factory=list)
    features: List[FlowScaleFeatures] = field(default_factory=list)
    masks_t: List[torch.Tensor] = field(default_factory=list)
    masks_s: List[torch.Tensor] = field(default_factory=list)

    @property
    def next_scale(self) -> int:
        return len(self.flows) + 1

    def context(self, i: int) -> FlowContext:
        feats = self.features[i - 1]
        return FlowContext(feats.feat_t, feats.feat_s, self.flows[i - 1])

    def detached(self) -> "FlowDecodeState":
        return FlowDecodeState(
            flows=[f.detach() for f in self.flows],
            features=[
                FlowScaleFeatures(f.feat_t.detach(), f.feat_s.detach(), f.estimator.detach())
                for f in self.features
            ],
            masks_t=[m.detach() for m in self.masks_t],
            masks_s=[m.detach() for m in self.masks_s],
        )


@dataclass
class FlowPyramidOutput:
    """Flows at scales i = 1..4 (each in its own pixels) plus the full-resolution flow."""

    flows: List[torch.Tensor]
    full: torch.Tensor
    features: List[FlowScaleFeatures]
    masks_t: List[torch.Tensor] = field(default_factory=list)
    masks_s: List[torch.Tensor] = field(default_factory=list)


class FlowDecoder(nn.Module):
    """Coarse-to-fine flow decoder over the four exchange scales.

    With D2F on, each scale correlates fused encoder+depth features through a
    :class:`D2FBlock`; with D2F off it correlates the encoder features
    directly.  Each scale predicts a residual on top of the upsampled flow of
    the previous scale.
    """

    def __init__(
        self,
        enc_widths: Sequence[int],
        depth_widths: Sequence[int],
        d2f: bool = True,
        dual_head: bool = True,
        radius: int = DEFAULT_RADIUS,
        estimator_widths: Sequence[int] = DEFAULT_ESTIMATOR_WIDTHS,
        mask_hidden: int = 32,
    ):
        super().__init__()
        if dual_head and not d2f:
            raise ValueError("The dual-head mechanism operates inside D2F; enable d2f as well.")
        if len(depth_widths) != EXCHANGE_SCALES:
            raise ValueError(
                f"Need one depth-feature width per exchange scale ({EXCHANGE_SCALES}), "
                f"got {len(depth_widths)}."
            )
        self.d2f_enabled = d2f
        self.dual_head_enabled = dual_head
        self.radius = radius

        blocks = []
        estimators = []
        for i in range(1, EXCHANGE_SCALES + 1):
            enc_ch = enc_widths[EXCHANGE_SCALES - i]
            if d2f:
                block = D2FBlock(
                    scale_index=i,
                    enc_channels=enc_ch,
                    depth_channels=depth_widths[i - 1],
                    fusion_channels=enc_ch,
                    radius=radius,
                    dual_head=dual_head,
                    mask_hidden=mask_hidden,
                )
                blocks.append(block)
                cost_ch = block.out_channels
            else:
                cost_ch = (2 * radius + 1) ** 2
            estimators.append(FlowEstimator(cost_ch + enc_ch + 2, estimator_widths))
        self.d2f = nn.ModuleList(blocks) if d2f else None
        self.estimators = nn.ModuleList(estimators)

    def step(
        self,
        state: FlowDecodeState,
        enc_t: torch.Tensor,
        enc_s: torch.Tensor,
        depth_t: Optional[torch.Tensor] = None,
        depth_s: Optional[torch.Tensor] = None,
    ) -> FlowDecodeState:
        """Decode the next scale in place and return *state*."""
        i = state.next_scale
        if i > EXCHANGE_SCALES:
            raise ValueError("All exchange scales have already been decoded.")
        if state.flows:
            flow_up = upsample_flow(state.flows[-1])
        else:
            b, _, h, w = enc_t.shape
            flow_up = enc_t.new_zeros(b, 2, h, w)
        if flow_up.shape[2:] != enc_t.shape[2:]:
            raise ValueError(
                f"Scale {i} features {tuple(enc_t.shape)} do not match the upsampled "
                f"flow {tuple(flow_up.shape)}."
            )

        if self.d2f is not None:
            if depth_t is None or depth_s is None:
                raise ValueError("D2F is enabled but depth features were not supplied.")
            prev_t = state.masks_t[-1] if state.masks_t else None
            prev_s = state.masks_s[-1] if state.masks_s else None
            out = self.d2f[i - 1](enc_t, enc_s, depth_t, depth_s, prev_t, prev_s, flow_up)
            cost, feat_t, feat_s = out.cost, out.fused_t, out.fused_s
            if out.mask_t is not None:
                state.masks_t.append(out.mask_t)
                state.masks_s.append(out.mask_s)
        else:
            cost = cost_volume(enc_t, warp_bilinear(enc_s, flow_up), self.radius)
            feat_t, feat_s = enc_t, enc_s

        x = torch.cat([nn.functional.leaky_relu(cost, 0.1), enc_t, flow_up], dim=1)
        estimator_feat, residual = self.estimators[i - 1](x)
        state.flows.append(flow_up + residual)
        state.features.append(FlowScaleFeatures(feat_t, feat_s, estimator_feat))
        return state

    def finish(self, state: FlowDecodeState, height: int, width: int) -> FlowPyramidOutput:
        """Upsample the finest flow to ``height × width`` and package the result."""
        if len(state.flows) != EXCHANGE_SCALES:
            raise ValueError(
                f"Decoding stopped after {len(state.flows)} of {EXCHANGE_SCALES} scales."
            )
        full = state.flows[-1]
        while full.shape[-2] < height:
            full = upsample_flow(full)
        if full.shape[-2:] != (height, width):
            raise ValueError(
                f"Finest flow {tuple(state.flows[-1].shape)} cannot be doubled to {width}x{height}."
            )
        return FlowPyramidOutput(
            flows=list(state.flows),
            full=full,
            features=list(state.features),
            masks_t=list(state.masks_t),
            masks_s=list(state.masks_s),
        )

    def forward(
        self,
        pyramid_t: FeaturePyramid,
        pyramid_s: FeaturePyramid,
        depth_feats_t: Optional[Sequence[torch.Tensor]] = None,
        depth_feats_s: Optional[Sequence[torch.Tensor]] = None,
        size: Optional[Tuple[int, int]] = None,
    ) -> FlowPyramidOutput:
        """Run all four scales; *size* is the ``(height, width)`` of the input frames."""
        if self.d2f is not None and (depth_feats_t is None or depth_feats_s is None):
            raise ValueError("D2F is enabled but per-scale depth features were not supplied.")
        state = FlowDecodeState()
        for i in range(1, EXCHANGE_SCALES + 1):
            self.step(
                state,
                pyramid_t.level(i),
                pyramid_s.level(i),
                depth_feats_t[i - 1] if depth_feats_t is not None else None,
                depth_feats_s[i - 1] if depth_feats_s is not None else None,
            )
        if size is None:
            h, w = pyramid_t.level(EXCHANGE_SCALES).shape[-2:]
            size = (2 * h, 2 * w)
        return self.finish(state, *size)


def decode_flow(
    decoder: FlowDecoder,
    pyramid_t: FeaturePyramid,
    pyramid_s: FeaturePyramid,
    depth_feats_t: Optional[Sequence[torch.Tensor]] = None,
    depth_feats_s: Optional[Sequence[torch.Tensor]] = None,
    d2f_enabled: bool = True,
    dual_head_enabled: bool = True,
    size: Optional[Tuple[int, int]] = None,
) -> FlowPyramidOutput:
    """Decode flow after checking the requested flags match how *decoder* was built.

    Raises
    ------
    ValueError
        When the flags disagree with the decoder or depth features are missing.
    """
    if d2f_enabled != decoder.d2f_enabled or dual_head_enabled != decoder.dual_head_enabled:
        raise ValueError(
            "Flow decoder flags do not match its construction:\n"
            f"  requested : d2f={d2f_enabled}, dual_head={dual_head_enabled}\n"
            f"  built     : d2f={decoder.d2f_enabled}, dual_head={decoder.dual_head_enabled}"
        )
    return decoder(pyramid_t, pyramid_s, depth_feats_t, depth_feats_s, size)


def clone_decoder(student: FlowDecoder) -> FlowDecoder:
    """Deep-copy *student* into a teacher that receives no gradients."""
    teacher = copy.deepcopy(student)
    for param in teacher.parameters():
        param.requires_grad_(False)
    return teacher
