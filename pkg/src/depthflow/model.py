"""
The joint depth / flow / pose network.

:class:`MultiTaskNet` owns the shared encoder, the depth decoder (with F2D
blocks), the student flow decoder (with D2F blocks and dual-head masks), the
EMA teacher copy of the flow decoder and the pose network, and wires them
together according to a set of :class:`ExchangeFlags`.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from depthflow.backbone import (
    DEFAULT_ENCODER_WIDTHS,
    EXCHANGE_SCALES,
    FeatureEncoder,
    FeaturePyramid,
    PoseEstimate,
    PoseNet,
)
from depthflow.decoders import (
    DEFAULT_DEPTH_WIDTHS,
    DEFAULT_ESTIMATOR_WIDTHS,
    DepthDecoder,
    DepthOutput,
    FlowContext,
    FlowDecodeState,
    FlowDecoder,
    FlowPyramidOutput,
    clone_decoder,
)
from depthflow.tensor_core import DEFAULT_RADIUS

logger = logging.getLogger(__name__)

#: State-dict prefix of the EMA teacher; excluded from parameter counts.
TEACHER_PREFIX = "flow_teacher."


# ---------------------------------------------------------------------------
# Flags and ablation table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExchangeFlags:
    """Which cross-task mechanisms a model uses.

    ``separate_encoders`` gives the flow branch its own encoder (the
    single-task baseline); the other flags switch the exchange mechanisms.
    """

    separate_encoders: bool = False
    d2f: bool = True
    f2d: bool = True
    ema: bool = True
    dual_head: bool = True

    def __post_init__(self) -> None:
        if self.dual_head and not self.d2f:
            raise ValueError("dual_head requires d2f: the masks gate the D2F fused features.")
        if self.f2d and not self.d2f:
            raise ValueError("f2d requires d2f: F2D is added after the D2F stage has trained.")

    def to_dict(self) -> Dict[str, bool]:
        return asdict(self)


ABLATION_MODELS: Dict[str, ExchangeFlags] = {
    "I": ExchangeFlags(separate_encoders=True, d2f=False, f2d=False, ema=False, dual_head=False),
    "II": ExchangeFlags(d2f=True, f2d=False, ema=False, dual_head=False),
    "III": ExchangeFlags(d2f=True, f2d=True, ema=False, dual_head=False),
    "IV": ExchangeFlags(d2f=True, f2d=True, ema=True, dual_head=False),
    "V": ExchangeFlags(d2f=True, f2d=False, ema=False, dual_head=True),
    "VI": ExchangeFlags(d2f=True, f2d=True, ema=True, dual_head=True),
}


def flags_for_model(model_id: str) -> ExchangeFlags:
    """Return the exchange flags of ablation model *model_id* (``I`` … ``VI``).

    Raises
    ------
    ValueError
        When *model_id* is not one of the six ablation models.
    """
    try:
        return ABLATION_MODELS[model_id]
    except KeyError:
        raise ValueError(
            f"Unknown ablation model '{model_id}'. "
            f"Choose one of: {', '.join(ABLATION_MODELS)}."
        ) from None


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------


@dataclass
class JointOutput:
    """Everything one joint forward pass produces for a (t, s) frame pair."""

    depth: DepthOutput
    depth_s: Optional[DepthOutput] = None
    flow: Optional[FlowPyramidOutput] = None
    teacher_flow: Optional[FlowPyramidOutput] = None


@dataclass
class Prediction:
    """Full-resolution inference result."""

    disparity: torch.Tensor
    depth: torch.Tensor
    flow: torch.Tensor


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


class MultiTaskNet(nn.Module):
    """Shared-encoder depth + flow network with D2F, F2D, dual-head and EMA teacher.

    Parameters
    ----------
    flags:
        Exchange mechanisms to build.
    encoder_widths:
        Widths of the five encoder stages.
    depth_widths:
        Widths of the five depth-decoder levels (full … 1/16 resolution).
    estimator_widths:
        Widths of the five convolutions of every flow estimator.
    radius:
        Correlation window radius.
    mask_hidden:
        Hidden width of the dual-head mask convolutions.
    min_depth, max_depth:
        Range of the disparity-to-depth map.
    """

    def __init__(
        self,
        flags: ExchangeFlags = ExchangeFlags(),
        encoder_widths: Sequence[int] = DEFAULT_ENCODER_WIDTHS,
        depth_widths: Sequence[int] = DEFAULT_DEPTH_WIDTHS,
        estimator_widths: Sequence[int] = DEFAULT_ESTIMATOR_WIDTHS,
        radius: int = DEFAULT_RADIUS,
        mask_hidden: int = 32,
        min_depth: float = 0.1,
        max_depth: float = 100.0,
    ):
        super().__init__()
        self.flags = flags
        self.min_depth = min_depth
        self.max_depth = max_depth

        self.encoder = FeatureEncoder(encoder_widths)
        self.flow_encoder = FeatureEncoder(encoder_widths) if flags.separate_encoders else None
        self.depth_decoder = DepthDecoder(encoder_widths, depth_widths, f2d=flags.f2d)
        self.pose_net = PoseNet()
        self.flow_decoder = FlowDecoder(
            encoder_widths,
            [self.depth_decoder.exchange_width(i) for i in range(1, EXCHANGE_SCALES + 1)],
            d2f=flags.d2f,
            dual_head=flags.dual_head,
            radius=radius,
            estimator_widths=estimator_widths,
            mask_hidden=mask_hidden,
        )
        self.flow_teacher = clone_decoder(self.flow_decoder) if flags.ema else None

    @classmethod
    def from_config(cls, config, flags: Optional[ExchangeFlags] = None) -> "MultiTaskNet":
        """Build the network described by a :class:`~depthflow.config.TrainConfig`."""
        return cls(
            flags=flags if flags is not None else config.flags(),
            encoder_widths=config.encoder_widths,
            depth_widths=config.depth_widths,
            estimator_widths=config.estimator_widths,
            radius=config.radius,
            mask_hidden=config.mask_hidden,
            min_depth=config.min_depth,
            max_depth=config.max_depth,
        )

    # ----------------------------------------------------------------- groups

    def stage_modules(self, stage: int) -> List[nn.Module]:
        """Modules optimised in training *stage* (1, 2 or 3)."""
        depth_side: List[nn.Module] = [self.encoder, self.depth_decoder, self.pose_net]
        if stage == 1:
            return depth_side
        flow_side: List[nn.Module] = [self.flow_decoder]
        if self.flow_encoder is not None:
            flow_side.append(self.flow_encoder)
        if stage in (2, 3):
            return depth_side + flow_side
        raise ValueError(f"Training stage must be 1, 2 or 3, got {stage}.")

    def trainable_parameters(self, stage: int, freeze_depth: bool = False) -> Iterator[nn.Parameter]:
        """Parameters the optimiser of *stage* updates; never the teacher.

        Stage 1 and stage 2 leave the F2D convolutions alone; they join in
        stage 3.  With *freeze_depth* stage 2 keeps the depth decoder and the
        pose network fixed and trains the encoder with the flow side.
        """
        f2d_ids = (
            {id(p) for p in self.depth_decoder.f2d.parameters()}
            if self.depth_decoder.f2d is not None
            else set()
        )
        modules = self.stage_modules(stage)
        if stage == 2 and freeze_depth:
            modules = [self.encoder] + modules[3:]
        seen = set()
        for module in modules:
            for param in module.parameters():
                if id(param) in seen:
                    continue
                if stage < 3 and id(param) in f2d_ids:
                    continue
                seen.add(id(param))
                yield param

    def reset_teacher(self) -> None:
        """Copy the student flow decoder into the teacher (start of stage 2)."""
        if self.flow_teacher is None:
            return
        self.flow_teacher.load_state_dict(self.flow_decoder.state_dict())
        logger.info("Flow teacher re-initialised from the student decoder")

    def inference_decoder(self) -> FlowDecoder:
        """The flow decoder that serves predictions: the teacher when EMA is on."""
        return self.flow_teacher if self.flow_teacher is not None else self.flow_decoder

    # ---------------------------------------------------------------- forward

    def estimate_pose(self, frame_t: torch.Tensor, frame_s: torch.Tensor) -> PoseEstimate:
        return self.pose_net(frame_t, frame_s)

    def _flow_pyramids(
        self, frame_t: torch.Tensor, frame_s: torch.Tensor, pyr_t: FeaturePyramid, pyr_s: FeaturePyramid
    ) -> Tuple[FeaturePyramid, FeaturePyramid]:
        if self.flow_encoder is None:
            return pyr_t, pyr_s
        return self.flow_encoder(frame_t), self.flow_encoder(frame_s)

    def forward(
        self, frame_t: torch.Tensor, frame_s: torch.Tensor, stage: int = 3
    ) -> JointOutput:
        """Run the network on the pair ``(frame_t, frame_s)`` for training *stage*.

        Stage 1 decodes depth only.  From stage 2 on the student flow decoder
        runs scale by scale inside the frame-t depth decode; the teacher (when
        EMA is on) runs alongside under ``no_grad``.  From stage 3 on F2D
        refines the frame-t depth features with detached flow context.
        """
        if stage not in (1, 2, 3):
            raise ValueError(f"Training stage must be 1, 2 or 3, got {stage}.")
        pyr_t = self.encoder(frame_t)
        if stage == 1:
            return JointOutput(depth=self.depth_decoder(pyr_t))

        pyr_s = self.encoder(frame_s)
        fpyr_t, fpyr_s = self._flow_pyramids(frame_t, frame_s, pyr_t, pyr_s)
        depth_s = self.depth_decoder(pyr_s) if self.flags.d2f else None
        f2d_on = self.flags.f2d and stage >= 3

        student = FlowDecodeState()
        teacher = FlowDecodeState() if self.flow_teacher is not None else None

        def provide(i: int, depth_feat: torch.Tensor) -> Optional[FlowContext]:
            depth_feat_s = depth_s.features[i - 1] if depth_s is not None else None
            self.flow_decoder.step(
                student,
                fpyr_t.level(i),
                fpyr_s.level(i),
                depth_feat if self.flags.d2f else None,
                depth_feat_s,
            )
            if teacher is not None:
                with torch.no_grad():
                    self.flow_teacher.step(
                        teacher,
                        fpyr_t.level(i).detach(),
                        fpyr_s.level(i).detach(),
                        depth_feat.detach() if self.flags.d2f else None,
                        depth_feat_s.detach() if depth_feat_s is not None else None,
                    )
            if not f2d_on:
                return None
            ctx = (teacher if teacher is not None else student).context(i)
            return FlowContext(ctx.flow_feat_t.detach(), ctx.flow_feat_s.detach(), ctx.flow.detach())

        depth = self.depth_decoder(pyr_t, flow_ctx=provide, f2d_enabled=f2d_on)
        height, width = frame_t.shape[-2:]
        return JointOutput(
            depth=depth,
            depth_s=depth_s,
            flow=self.flow_decoder.finish(student, height, width),
            teacher_flow=(
                self.flow_teacher.finish(teacher, height, width) if teacher is not None else None
            ),
        )

    @torch.no_grad()
    def predict(self, frame_t: torch.Tensor, frame_s: torch.Tensor) -> Prediction:
        """Full-resolution depth of *frame_t* and flow from *frame_t* to *frame_s*.

        Only the inference decoder (the teacher when EMA is on) runs; the
        student flow decoder is never called.
        """
        decoder = self.inference_decoder()
        pyr_t = self.encoder(frame_t)
        pyr_s = self.encoder(frame_s)
        fpyr_t, fpyr_s = self._flow_pyramids(frame_t, frame_s, pyr_t, pyr_s)
        depth_s = self.depth_decoder(pyr_s) if self.flags.d2f else None
        state = FlowDecodeState()

        def provide(i: int, depth_feat: torch.Tensor) -> FlowContext:
            decoder.step(
                state,
                fpyr_t.level(i),
                fpyr_s.level(i),
                depth_feat if self.flags.d2f else None,
                depth_s.features[i - 1] if depth_s is not None else None,
            )
            return state.context(i)

        depth = self.depth_decoder(pyr_t, flow_ctx=provide, f2d_enabled=self.flags.f2d)
        flow = decoder.finish(state, *frame_t.shape[-2:])
        disparity, depth_map = depth.disparities[0], depth.depth(0, self.min_depth, self.max_depth)
        return Prediction(disparity=disparity, depth=depth_map, flow=flow.full)
