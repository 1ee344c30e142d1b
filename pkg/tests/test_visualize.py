"""
Tests for depthflow.visualize.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from depthflow.visualize import (
    colorize,
    colorize_disparity,
    depth_error_map,
    flow_error_map,
    flow_to_color,
    plot_ablation,
    plot_training_curves,
    save_png,
)


class TestFlowColour:
    def test_zero_flow_is_white(self):
        image = flow_to_color(np.zeros((3, 4, 2)))
        assert image.dtype == np.uint8 and image.shape == (3, 4, 3)
        assert (image == 255).all()

    def test_direction_sets_the_hue(self):
        flow = np.zeros((1, 2, 2))
        flow[0, 0, 0] = 1.0
        flow[0, 1, 0] = -1.0
        image = flow_to_color(flow)
        assert image[0, 0].tolist() == [255, 0, 0]
        assert image[0, 1].tolist() == [0, 255, 255]

    def test_max_flow_caps_saturation(self):
        flow = np.zeros((1, 1, 2))
        flow[0, 0, 0] = 1.0
        assert flow_to_color(flow, max_flow=2.0)[0, 0].tolist() == [255, 128, 128]


class TestColourMaps:
    def test_colorize_shape(self):
        image = colorize_disparity(np.linspace(0, 1, 12).reshape(3, 4))
        assert image.shape == (3, 4, 3) and image.dtype == np.uint8

    def test_colorize_clips_to_vmax(self):
        image = colorize(np.array([[1.0, 5.0]]), vmax=1.0)
        assert image[0, 0].tolist() == image[0, 1].tolist()

    def test_flow_error_map_blanks_invalid(self):
        pred = np.ones((2, 2, 2))
        valid = np.array([[True, False], [True, True]])
        image = flow_error_map(pred, np.zeros((2, 2, 2)), valid)
        assert image[0, 1].tolist() == [0, 0, 0]
        assert image[0, 0].any()

    def test_depth_error_map_blanks_missing_ground_truth(self):
        gt = np.array([[2.0, 0.0]])
        image = depth_error_map(np.array([[3.0, 3.0]]), gt)
        assert image[0, 1].tolist() == [0, 0, 0]
        assert image[0, 0].any()


class TestOutputs:
    def test_save_png_writes_rgb(self, tmp_path: Path):
        rgb = np.zeros((2, 3, 3), dtype=np.uint8)
        rgb[..., 0] = 200
        path = save_png(tmp_path / "sub" / "a.png", rgb)
        bgr = cv2.imread(str(path))
        assert bgr[0, 0].tolist() == [0, 0, 200]

    def test_training_curves(self, tmp_path: Path):
        records = [
            {"stage": 1, "global_step": 1, "total": 0.5},
            {"stage": 1, "global_step": 2, "total": 0.4},
            {"stage": 2, "global_step": 3, "total": 0.6, "photometric_flow/i4": 0.1},
        ]
        path = plot_training_curves(records, tmp_path / "curves.png", keys=["total", "photometric_flow/i4"])
        assert path.is_file() and path.stat().st_size > 0

    def test_ablation_bars(self, tmp_path: Path):
        records = [
            {"model_id": "VI", "flow": {"epe": 1.0}, "depth": {"abs_rel": 0.1}},
            {"model_id": "I", "flow": {"epe": 2.0}, "depth": {"abs_rel": 0.2}},
            {"model_id": "VI", "flow": {"epe": 1.2}, "depth": {"abs_rel": 0.12}},
        ]
        assert plot_ablation(records, tmp_path / "epe.png").is_file()
        assert plot_ablation(records, tmp_path / "abs_rel.png", metric="abs_rel").is_file()
