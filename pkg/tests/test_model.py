"""
Tests for depthflow.model: flag table, parameter groups and forward wiring.
"""

from __future__ import annotations

import pytest
import torch

from depthflow.evalmetrics import count_parameters
from depthflow.model import (
    ABLATION_MODELS,
    TEACHER_PREFIX,
    ExchangeFlags,
    MultiTaskNet,
    flags_for_model,
)
from tests.conftest import TINY_ARCH


def tiny_net(flags: ExchangeFlags = ExchangeFlags()) -> MultiTaskNet:
    return MultiTaskNet(flags=flags, **TINY_ARCH)


@pytest.fixture()
def frames():
    return torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64)


class TestFlags:
    def test_ablation_table(self):
        assert list(ABLATION_MODELS) == ["I", "II", "III", "IV", "V", "VI"]
        assert flags_for_model("I").separate_encoders
        assert flags_for_model("VI") == ExchangeFlags()

    def test_unknown_model_raises(self):
        with pytest.raises(ValueError, match="Unknown ablation model 'VII'"):
            flags_for_model("VII")

    def test_dual_head_needs_d2f(self):
        with pytest.raises(ValueError, match="dual_head requires d2f"):
            ExchangeFlags(d2f=False, f2d=False, dual_head=True)

    def test_f2d_needs_d2f(self):
        with pytest.raises(ValueError, match="f2d requires d2f"):
            ExchangeFlags(d2f=False, f2d=True, dual_head=False)


class TestParameterCounts:
    def test_separate_encoders_cost_more_than_shared_d2f(self):
        assert count_parameters(tiny_net(flags_for_model("I"))) > count_parameters(
            tiny_net(flags_for_model("II"))
        )

    def test_full_model_larger_than_dual_head_only(self):
        assert count_parameters(tiny_net(flags_for_model("VI"))) > count_parameters(
            tiny_net(flags_for_model("V"))
        )

    def test_teacher_is_not_counted(self):
        with_ema = tiny_net(ExchangeFlags())
        without = tiny_net(ExchangeFlags(ema=False))
        assert count_parameters(with_ema) == count_parameters(without)


class TestTrainableParameters:
    @pytest.mark.parametrize("stage", [1, 2, 3])
    def test_teacher_never_trainable(self, stage):
        net = tiny_net()
        teacher_ids = {id(p) for p in net.flow_teacher.parameters()}
        assert not teacher_ids & {id(p) for p in net.trainable_parameters(stage)}

    def test_stage1_excludes_flow_decoder(self):
        net = tiny_net()
        trainable = {id(p) for p in net.trainable_parameters(1)}
        assert not trainable & {id(p) for p in net.flow_decoder.parameters()}

    def test_f2d_joins_in_stage3(self):
        net = tiny_net()
        f2d = {id(p) for p in net.depth_decoder.f2d.parameters()}
        assert not f2d & {id(p) for p in net.trainable_parameters(2)}
        assert f2d <= {id(p) for p in net.trainable_parameters(3)}

    def test_freeze_depth_in_stage2(self):
        net = tiny_net()
        trainable = {id(p) for p in net.trainable_parameters(2, freeze_depth=True)}
        assert not trainable & {id(p) for p in net.depth_decoder.parameters()}
        assert {id(p) for p in net.encoder.parameters()} <= trainable

    def test_bad_stage_raises(self):
        with pytest.raises(ValueError, match="1, 2 or 3"):
            list(tiny_net().trainable_parameters(4))

    def test_teacher_prefix_in_state_dict(self):
        keys = tiny_net().state_dict().keys()
        assert any(k.startswith(TEACHER_PREFIX) for k in keys)


class TestForward:
    def test_stage1_is_depth_only(self, frames):
        out = tiny_net()(*frames, stage=1)
        assert out.flow is None and out.teacher_flow is None and out.depth_s is None
        assert out.depth.disparities[0].shape == (1, 1, 64, 64)

    def test_stage2_runs_student_and_teacher(self, frames):
        out = tiny_net()(*frames, stage=2)
        assert out.flow.full.shape == (1, 2, 64, 64)
        assert out.teacher_flow.full.shape == (1, 2, 64, 64)
        assert not out.teacher_flow.full.requires_grad

    def test_freshly_reset_teacher_matches_student(self, frames):
        net = tiny_net()
        net.reset_teacher()
        out = net(*frames, stage=2)
        assert torch.allclose(out.flow.full, out.teacher_flow.full, atol=1e-6)

    def test_stage3_with_fresh_f2d_keeps_depth(self, frames):
        net = tiny_net()
        d2 = net(*frames, stage=2).depth.disparities[0]
        d3 = net(*frames, stage=3).depth.disparities[0]
        assert torch.allclose(d2, d3, atol=1e-5)

    def test_model_without_ema_has_no_teacher_output(self, frames):
        out = tiny_net(flags_for_model("II"))(*frames, stage=2)
        assert out.teacher_flow is None

    def test_estimate_pose(self, frames):
        pose = tiny_net().estimate_pose(*frames)
        assert pose.rotation.shape == (1, 3) and pose.translation.shape == (1, 3)
        assert pose.matrix().shape == (1, 4, 4)
        assert pose.translation.requires_grad

    def test_bad_stage_raises(self, frames):
        with pytest.raises(ValueError, match="1, 2 or 3"):
            tiny_net()(*frames, stage=0)

    @pytest.mark.parametrize("model_id", list(ABLATION_MODELS))
    def test_predict_shapes(self, frames, model_id):
        pred = tiny_net(flags_for_model(model_id)).eval().predict(*frames)
        assert pred.disparity.shape == (1, 1, 64, 64)
        assert pred.depth.shape == (1, 1, 64, 64)
        assert pred.flow.shape == (1, 2, 64, 64)
        assert ((pred.depth >= 0.1 - 1e-5) & (pred.depth <= 100.0 + 1e-3)).all()

    def test_indivisible_frames_raise(self):
        with pytest.raises(ValueError, match="not divisible by 32"):
            tiny_net()(torch.rand(1, 3, 48, 64), torch.rand(1, 3, 48, 64), stage=1)


class TestGradientRouting:
    def _flow_backward(self, net: MultiTaskNet, frames) -> None:
        out = net(*frames, stage=2)
        out.flow.full.abs().mean().backward()

    def test_flow_loss_stays_out_of_depth_without_exchange(self, frames):
        net = tiny_net(flags_for_model("I"))
        self._flow_backward(net, frames)
        for param in net.depth_decoder.parameters():
            assert param.grad is None or torch.count_nonzero(param.grad) == 0

    def test_d2f_carries_flow_loss_into_depth(self, frames):
        net = tiny_net(flags_for_model("II"))
        self._flow_backward(net, frames)
        total = sum(p.grad.abs().sum().item() for p in net.depth_decoder.parameters() if p.grad is not None)
        assert total > 0

    def test_teacher_receives_no_gradient(self, frames):
        net = tiny_net(flags_for_model("VI"))
        self._flow_backward(net, frames)
        assert all(p.grad is None for p in net.flow_teacher.parameters())


class TestPredictRouting:
    @staticmethod
    def _count_calls(module: torch.nn.Module) -> list:
        calls = []
        for sub in module.modules():
            sub.register_forward_hook(lambda *_: calls.append(1))
        return calls

    def test_ema_model_predicts_with_the_teacher_only(self, frames):
        net = tiny_net(flags_for_model("VI")).eval()
        student_calls = self._count_calls(net.flow_decoder)
        teacher_calls = self._count_calls(net.flow_teacher)
        net.predict(*frames)
        assert student_calls == []
        assert len(teacher_calls) > 0

    def test_model_without_ema_predicts_with_the_student(self, frames):
        net = tiny_net(flags_for_model("II")).eval()
        student_calls = self._count_calls(net.flow_decoder)
        net.predict(*frames)
        assert len(student_calls) > 0
