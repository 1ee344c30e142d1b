"""
Tests for depthflow.backbone: encoder pyramid, pose network and camera helpers.
"""

from __future__ import annotations

import math

import pytest
import torch

from depthflow.backbone import (
    CameraIntrinsics,
    FeatureEncoder,
    PoseEstimate,
    PoseNet,
    rotation_from_axis_angle,
)


class TestCameraIntrinsics:
    def test_resized_scales_focal_and_centre(self):
        k = CameraIntrinsics(fx=100.0, fy=80.0, cx=50.0, cy=40.0, width=100, height=80)
        half = k.resized(50, 40)
        assert (half.fx, half.fy, half.cx, half.cy) == (50.0, 40.0, 25.0, 20.0)
        assert (half.width, half.height) == (50, 40)

    def test_matrix_layout(self):
        k = CameraIntrinsics(fx=2.0, fy=3.0, cx=1.0, cy=0.5, width=4, height=4)
        expected = torch.tensor([[2.0, 0.0, 1.0], [0.0, 3.0, 0.5], [0.0, 0.0, 1.0]])
        assert torch.equal(k.matrix(), expected)

    def test_non_positive_focal_raises(self):
        with pytest.raises(ValueError, match="Focal lengths"):
            CameraIntrinsics(fx=0.0, fy=1.0, cx=1.0, cy=1.0, width=4, height=4)

    def test_principal_point_outside_raises(self):
        with pytest.raises(ValueError, match="outside"):
            CameraIntrinsics(fx=1.0, fy=1.0, cx=9.0, cy=1.0, width=4, height=4)


class TestRotation:
    def test_zero_vector_is_identity(self):
        r = rotation_from_axis_angle(torch.zeros(2, 3, dtype=torch.float64))
        assert torch.equal(r, torch.eye(3, dtype=torch.float64).expand(2, 3, 3))

    def test_quarter_turn_about_z(self):
        r = rotation_from_axis_angle(torch.tensor([[0.0, 0.0, math.pi / 2]], dtype=torch.float64))[0]
        x_axis = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
        assert torch.allclose(r @ x_axis, torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64), atol=1e-12)

    def test_result_is_orthonormal(self):
        vec = torch.randn(5, 3, dtype=torch.float64)
        r = rotation_from_axis_angle(vec)
        eye = torch.eye(3, dtype=torch.float64).expand(5, 3, 3)
        assert torch.allclose(r @ r.transpose(1, 2), eye, atol=1e-12)
        assert torch.allclose(torch.linalg.det(r), torch.ones(5, dtype=torch.float64), atol=1e-12)


class TestPoseEstimate:
    def test_matrix_holds_translation(self):
        pose = PoseEstimate(torch.zeros(1, 3), torch.tensor([[1.0, 2.0, 3.0]]))
        m = pose.matrix()[0]
        assert torch.equal(m[:3, :3], torch.eye(3))
        assert torch.equal(m[:3, 3], torch.tensor([1.0, 2.0, 3.0]))
        assert m[3, 3] == 1.0

    def test_identity_vector_is_zero(self):
        assert torch.equal(PoseEstimate.identity(2).vector(), torch.zeros(2, 6))


class TestFeatureEncoder:
    def test_pyramid_shapes(self):
        encoder = FeatureEncoder((4, 4, 8, 8, 8))
        pyramid = encoder(torch.randn(2, 3, 64, 96))
        sizes = [tuple(s.shape) for s in pyramid.stages]
        assert sizes == [(2, 4, 32, 48), (2, 4, 16, 24), (2, 8, 8, 12), (2, 8, 4, 6), (2, 8, 2, 3)]

    def test_levels_run_coarse_to_fine(self):
        pyramid = FeatureEncoder((4, 4, 8, 8, 8))(torch.randn(1, 3, 64, 64))
        assert [lvl.shape[-1] for lvl in pyramid.levels] == [4, 8, 16, 32]
        assert pyramid.level(1) is pyramid.stages[3]

    def test_bad_level_raises(self):
        pyramid = FeatureEncoder((4, 4, 8, 8, 8))(torch.randn(1, 3, 32, 32))
        with pytest.raises(ValueError, match="1..4"):
            pyramid.level(5)

    def test_indivisible_size_suggests_padding(self):
        with pytest.raises(ValueError, match="Pad by 12 column"):
            FeatureEncoder((4, 4, 8, 8, 8))(torch.randn(1, 3, 64, 52))

    def test_wrong_width_count_raises(self):
        with pytest.raises(ValueError, match="5 stage widths"):
            FeatureEncoder((4, 8))


class TestPoseNet:
    def test_output_shapes_and_bounded_rotation(self):
        net = PoseNet(widths=(8, 8, 8, 8, 8))
        pose = net(torch.randn(3, 3, 64, 64), torch.randn(3, 3, 64, 64))
        assert pose.rotation.shape == (3, 3)
        assert pose.translation.shape == (3, 3)
        assert (pose.rotation.norm(dim=1) < math.pi).all()

    def test_mismatched_frames_raise(self):
        with pytest.raises(ValueError, match="identical size"):
            PoseNet(widths=(8, 8, 8, 8, 8))(torch.randn(1, 3, 64, 64), torch.randn(1, 3, 32, 64))
