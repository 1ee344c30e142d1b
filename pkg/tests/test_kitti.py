"""
Tests for depthflow.kitti: flow PNG codec, KITTI 2015 pairs and the Eigen split
reader, on miniature on-disk fixtures.
"""

from __future__ import annotations

import logging
from pathlib import Path

import cv2
import numpy as np
import pytest

from depthflow.data import write_image
from depthflow.kitti import (
    decode_flow,
    encode_flow,
    is_static,
    load_kitti_eigen,
    load_kitti_flow_2015,
    read_calib_file,
    read_flow_png,
    read_split_file,
    velodyne_depth,
    write_flow_png,
)

DATE = "2011_09_26"
DRIVE = f"{DATE}/{DATE}_drive_0001_sync"
FOCAL, CX, CY = 50.0, 32.0, 16.0
WIDTH, HEIGHT = 64, 32


def _write_calib(date_dir: Path) -> None:
    date_dir.mkdir(parents=True, exist_ok=True)
    p_rect = f"{FOCAL} 0 {CX} 0 0 {FOCAL} {CY} 0 0 0 1 0"
    (date_dir / "calib_cam_to_cam.txt").write_text(
        "calib_time: 09-Jan-2012 13:57:47\n"
        f"S_rect_02: {WIDTH} {HEIGHT}\n"
        "R_rect_00: 1 0 0 0 1 0 0 0 1\n"
        f"P_rect_02: {p_rect}\n"
        f"P_rect_03: {p_rect}\n",
        encoding="utf-8",
    )
    # Velodyne x forward, y left, z up -> camera x right, y down, z forward.
    (date_dir / "calib_velo_to_cam.txt").write_text(
        "calib_time: 15-Mar-2012 11:37:16\nR: 0 -1 0 0 0 -1 1 0 0\nT: 0 0 0\n",
        encoding="utf-8",
    )


def _write_frames(root: Path, indices, seed: int = 0, camera: int = 2) -> None:
    image_dir = root / DRIVE / f"image_0{camera}" / "data"
    image_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for index in indices:
        write_image(image_dir / f"{index:010d}.png", rng.random((HEIGHT, WIDTH, 3)))


def _write_velodyne(root: Path, index: int, points) -> Path:
    velo_dir = root / DRIVE / "velodyne_points" / "data"
    velo_dir.mkdir(parents=True, exist_ok=True)
    path = velo_dir / f"{index:010d}.bin"
    np.asarray(points, dtype=np.float32).tofile(str(path))
    return path


def _write_split(root: Path, name: str, filename: str, lines) -> Path:
    split_dir = root / "splits" / name
    split_dir.mkdir(parents=True, exist_ok=True)
    path = split_dir / filename
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Flow codec
# ---------------------------------------------------------------------------


class TestFlowCodec:
    def test_png_round_trip_is_exact_on_the_grid(self, tmp_path: Path):
        rng = np.random.default_rng(0)
        flow = np.round(rng.uniform(-100, 100, (6, 9, 2)) * 64) / 64
        valid = rng.random((6, 9)) > 0.3
        write_flow_png(tmp_path / "f.png", flow, valid)
        got, got_valid = read_flow_png(tmp_path / "f.png")
        assert np.array_equal(got_valid, valid)
        assert np.array_equal(got, flow)

    def test_encoding_layout(self):
        encoded = encode_flow(np.array([[[1.0, -0.5]]]))
        assert encoded.dtype == np.uint16
        assert encoded[0, 0].tolist() == [2 ** 15 + 64, 2 ** 15 - 32, 1]

    def test_decode_reads_validity_channel(self):
        encoded = np.array([[[2 ** 15, 2 ** 15, 0]]], dtype=np.uint16)
        flow, valid = decode_flow(encoded)
        assert flow.tolist() == [[[0.0, 0.0]]]
        assert not valid[0, 0]

    def test_encode_rejects_wrong_shape(self):
        with pytest.raises(ValueError, match="H x W x 2"):
            encode_flow(np.zeros((4, 4, 3)))

    def test_missing_file(self, tmp_path: Path):
        with pytest.raises(FileNotFoundError, match="unreadable"):
            read_flow_png(tmp_path / "missing.png")

    def test_eight_bit_png_is_malformed(self, tmp_path: Path):
        cv2.imwrite(str(tmp_path / "rgb.png"), np.zeros((4, 4, 3), dtype=np.uint8))
        with pytest.raises(ValueError, match="Malformed KITTI flow encoding"):
            read_flow_png(tmp_path / "rgb.png")


# ---------------------------------------------------------------------------
# KITTI 2015 flow
# ---------------------------------------------------------------------------


class TestKittiFlow2015:
    def _make(self, root: Path, with_noc: bool = True) -> np.ndarray:
        base = root / "training"
        for sub in ("image_2", "flow_occ", "flow_noc"):
            (base / sub).mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(1)
        write_image(base / "image_2" / "000000_10.png", rng.random((8, 12, 3)))
        write_image(base / "image_2" / "000000_11.png", rng.random((8, 12, 3)))
        flow = np.full((8, 12, 2), 1.5)
        valid = np.ones((8, 12), dtype=bool)
        write_flow_png(base / "flow_occ" / "000000_10.png", flow, valid)
        if with_noc:
            noc = valid.copy()
            noc[:, :3] = False
            write_flow_png(base / "flow_noc" / "000000_10.png", flow, noc)
        return flow

    def test_yields_pairs(self, tmp_path: Path):
        flow = self._make(tmp_path)
        pairs = list(load_kitti_flow_2015(tmp_path))
        assert len(pairs) == 1
        pair = pairs[0]
        assert pair.name == "000000"
        assert pair.frame_t.shape == (8, 12, 3)
        assert np.array_equal(pair.gt_flow, flow)
        assert pair.noc.sum() == 8 * 9

    def test_missing_noc_falls_back_to_valid(self, tmp_path: Path, caplog):
        self._make(tmp_path, with_noc=False)
        with caplog.at_level(logging.WARNING, logger="depthflow.kitti"):
            pair = next(load_kitti_flow_2015(tmp_path))
        assert np.array_equal(pair.noc, pair.valid)
        assert "No noc mask" in caplog.text

    def test_missing_tree(self, tmp_path: Path):
        with pytest.raises(FileNotFoundError, match="flow ground truth not found"):
            next(load_kitti_flow_2015(tmp_path))

    def test_empty_tree(self, tmp_path: Path):
        (tmp_path / "training" / "flow_occ").mkdir(parents=True)
        with pytest.raises(ValueError, match="No \\*_10.png"):
            next(load_kitti_flow_2015(tmp_path))


# ---------------------------------------------------------------------------
# KITTI raw / Eigen split
# ---------------------------------------------------------------------------


class TestCalibration:
    def test_non_numeric_entries_are_skipped(self, tmp_path: Path):
        _write_calib(tmp_path)
        calib = read_calib_file(tmp_path / "calib_cam_to_cam.txt")
        assert "calib_time" not in calib
        assert calib["P_rect_02"].reshape(3, 4)[0, 0] == FOCAL

    def test_velodyne_projection_keeps_nearest_point(self, tmp_path: Path):
        _write_calib(tmp_path)
        points = [
            [10.0, 0.0, 0.0, 1.0],   # straight ahead at 10 m
            [20.0, 0.0, 0.0, 1.0],   # same pixel, further away
            [-5.0, 0.0, 0.0, 1.0],   # behind the sensor
            [5.0, -1.0, 0.0, 1.0],   # 10 px right of the centre
        ]
        velo = tmp_path / "sweep.bin"
        np.asarray(points, dtype=np.float32).tofile(str(velo))
        depth = velodyne_depth(tmp_path, velo)
        assert depth.shape == (HEIGHT, WIDTH)
        assert depth[int(CY) - 1, int(CX) - 1] == pytest.approx(10.0)
        assert depth[int(CY) - 1, int(CX) + 10 - 1] == pytest.approx(5.0)
        assert np.count_nonzero(depth) == 2


class TestSplitFile:
    def test_parses_entries(self, tmp_path: Path):
        path = _write_split(tmp_path, "eigen", "test_files.txt", [f"{DRIVE} 5 l", "", f"{DRIVE} 6 r"])
        entries = read_split_file(path)
        assert [(e.folder, e.index, e.side) for e in entries] == [(DRIVE, 5, "l"), (DRIVE, 6, "r")]

    def test_malformed_line_names_its_number(self, tmp_path: Path):
        path = _write_split(tmp_path, "eigen", "test_files.txt", [f"{DRIVE} 5 l", f"{DRIVE} 6 x"])
        with pytest.raises(ValueError, match="test_files.txt:2"):
            read_split_file(path)

    def test_missing_file(self, tmp_path: Path):
        with pytest.raises(FileNotFoundError, match="Split file not found"):
            read_split_file(tmp_path / "nope.txt")

    def test_is_static(self):
        frame = np.random.default_rng(0).random((4, 4, 3))
        assert is_static((frame, frame, frame), 0.01)
        assert not is_static((frame, frame, 1.0 - frame), 0.01)


class TestLoadKittiEigen:
    def test_test_split_with_velodyne(self, tmp_path: Path):
        _write_calib(tmp_path / DATE)
        _write_frames(tmp_path, [0, 1, 2])
        _write_velodyne(tmp_path, 1, [[10.0, 0.0, 0.0, 1.0]])
        _write_split(tmp_path, "eigen", "test_files.txt", [f"{DRIVE} 1 l"])

        samples = list(load_kitti_eigen(tmp_path, "test", width=32, height=16))
        assert len(samples) == 1
        sample = samples[0]
        assert sample.size == (32, 16)
        assert sample.intrinsics.fx == pytest.approx(FOCAL / 2)
        assert sample.gt_depth.shape == (HEIGHT, WIDTH)
        assert sample.gt_depth.max() == pytest.approx(10.0)

    def test_missing_frames_are_skipped(self, tmp_path: Path, caplog):
        _write_calib(tmp_path / DATE)
        _write_frames(tmp_path, [0, 1, 2])
        _write_split(tmp_path, "eigen_zhou", "train_files.txt", [f"{DRIVE} 1 l", f"{DRIVE} 7 l"])
        with caplog.at_level(logging.WARNING, logger="depthflow.kitti"):
            samples = list(load_kitti_eigen(tmp_path, "train", width=64, height=32))
        assert len(samples) == 1
        assert samples[0].gt_depth is None
        assert "Skipping" in caplog.text

    def test_static_triplets_are_skipped(self, tmp_path: Path):
        _write_calib(tmp_path / DATE)
        image_dir = tmp_path / DRIVE / "image_02" / "data"
        image_dir.mkdir(parents=True)
        frame = np.random.default_rng(3).random((HEIGHT, WIDTH, 3))
        for index in (0, 1, 2):
            write_image(image_dir / f"{index:010d}.png", frame)
        _write_frames(tmp_path, [3, 4], seed=9)
        split = _write_split(tmp_path, "eigen_zhou", "train_files.txt", [f"{DRIVE} 1 l", f"{DRIVE} 3 l"])
        samples = list(
            load_kitti_eigen(tmp_path, "train", width=64, height=32, split_file=split, static_threshold=0.01)
        )
        assert [s.name for s in samples] == [f"{DRIVE} 3 l"]

    def test_nothing_loaded_raises(self, tmp_path: Path):
        _write_split(tmp_path, "eigen_zhou", "val_files.txt", [f"{DRIVE} 1 l"])
        with pytest.raises(ValueError, match="produced no samples"):
            list(load_kitti_eigen(tmp_path, "val", width=64, height=32))

    def test_unknown_split(self, tmp_path: Path):
        with pytest.raises(ValueError, match="Unknown Eigen split"):
            list(load_kitti_eigen(tmp_path, "dev", width=64, height=32))
