"""
KITTI readers: the 16-bit optical-flow PNG codec, KITTI 2015 flow pairs and
the Eigen split of KITTI raw (with velodyne ground truth for the test split).

Directory layouts follow the public releases::

    <kitti_raw>/2011_09_26/calib_cam_to_cam.txt
    <kitti_raw>/2011_09_26/calib_velo_to_cam.txt
    <kitti_raw>/2011_09_26/2011_09_26_drive_0001_sync/image_02/data/0000000000.png
    <kitti_raw>/2011_09_26/2011_09_26_drive_0001_sync/velodyne_points/data/0000000000.bin
    <kitti_raw>/splits/eigen_zhou/{train,val}_files.txt
    <kitti_raw>/splits/eigen/test_files.txt

    <kitti_2015>/training/image_2/000000_10.png, 000000_11.png
    <kitti_2015>/training/flow_occ/000000_10.png
    <kitti_2015>/training/flow_noc/000000_10.png
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import cv2
import numpy as np

from depthflow.backbone import CameraIntrinsics
from depthflow.data import SequenceSample, read_image, resize_sample

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

FLOW_OFFSET = 2 ** 15
FLOW_SCALE = 64.0

EIGEN_SPLITS = {"train": "eigen_zhou", "val": "eigen_zhou", "test": "eigen"}
SIDE_TO_CAMERA = {"l": 2, "r": 3}


# ---------------------------------------------------------------------------
# 16-bit flow codec
# ---------------------------------------------------------------------------


def encode_flow(flow: np.ndarray, valid: Optional[np.ndarray] = None) -> np.ndarray:
    """Encode an ``H × W × 2`` flow into the KITTI ``uint16`` (u, v, valid) layout."""
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"Flow must be H x W x 2, got {flow.shape}.")
    if valid is None:
        valid = np.ones(flow.shape[:2], dtype=bool)
    encoded = np.empty(flow.shape[:2] + (3,), dtype=np.uint16)
    encoded[..., :2] = np.clip(np.round(flow * FLOW_SCALE + FLOW_OFFSET), 0, 65535)
    encoded[..., 2] = np.asarray(valid, dtype=bool)
    return encoded


def decode_flow(encoded: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Decode a KITTI ``uint16`` (u, v, valid) image into ``(flow, valid)``."""
    flow = (encoded[..., :2].astype(np.float64) - FLOW_OFFSET) / FLOW_SCALE
    return flow, encoded[..., 2] > 0


def write_flow_png(path: Path, flow: np.ndarray, valid: Optional[np.ndarray] = None) -> None:
    encoded = encode_flow(flow, valid)
    # OpenCV stores channels as BGR.
    if not cv2.imwrite(str(path), encoded[..., ::-1]):
        raise OSError(f"Could not write flow image {path}")


def read_flow_png(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    """Read a KITTI flow PNG.

    Raises
    ------
    FileNotFoundError
        When the file is missing or unreadable.
    ValueError
        When the PNG is not a 3-channel 16-bit image.
    """
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(f"Flow image not found or unreadable: {path}")
    if raw.dtype != np.uint16 or raw.ndim != 3 or raw.shape[2] != 3:
        raise ValueError(
            f"Malformed KITTI flow encoding in {path}:\n"
            f"  expected 3-channel uint16, got {raw.dtype} with shape {raw.shape}"
        )
    return decode_flow(raw[..., ::-1])


# ---------------------------------------------------------------------------
# KITTI 2015 flow
# ---------------------------------------------------------------------------


@dataclass
class FlowPair:
    """One KITTI 2015 evaluation pair with ground truth at native resolution."""

    frame_t: np.ndarray
    frame_s: np.ndarray
    gt_flow: np.ndarray
    valid: np.ndarray
    noc: np.ndarray
    name: str


def load_kitti_flow_2015(root: Path, split: str = "training") -> Iterator[FlowPair]:
    """Yield the ground-truth pairs of the KITTI 2015 flow benchmark in name order.

    Raises
    ------
    FileNotFoundError
        When ``<root>/<split>/flow_occ`` does not exist.
    ValueError
        When it holds no flow files, or a flow file is malformed.
    """
    base = Path(root) / split
    occ_dir = base / "flow_occ"
    if not occ_dir.is_dir():
        raise FileNotFoundError(
            f"KITTI 2015 flow ground truth not found: {occ_dir}\n"
            "  Point --data-root at the unpacked data_scene_flow directory."
        )
    files = sorted(occ_dir.glob("*_10.png"))
    if not files:
        raise ValueError(f"No *_10.png flow files in {occ_dir}.")
    for occ_path in files:
        stem = occ_path.stem[: -len("_10")]
        try:
            frame_t = read_image(base / "image_2" / f"{stem}_10.png")
            frame_s = read_image(base / "image_2" / f"{stem}_11.png")
            noc_path = base / "flow_noc" / occ_path.name
        except FileNotFoundError as exc:
            logger.warning("Skipping KITTI 2015 pair %s: %s", stem, exc)
            continue
        flow, valid = read_flow_png(occ_path)
        if noc_path.is_file():
            _, noc = read_flow_png(noc_path)
        else:
            logger.warning("No noc mask for %s; using the occ validity", stem)
            noc = valid
        yield FlowPair(frame_t, frame_s, flow, valid, noc & valid, stem)


# ---------------------------------------------------------------------------
# KITTI raw / Eigen split
# ---------------------------------------------------------------------------


def read_calib_file(path: Path) -> Dict[str, np.ndarray]:
    """Parse a KITTI ``key: v1 v2 ...`` calibration file, skipping non-numeric entries."""
    data: Dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            key, _, value = line.partition(":")
            try:
                data[key.strip()] = np.array([float(x) for x in value.split()])
            except ValueError:
                pass
    return data


def camera_intrinsics(calib_dir: Path, camera: int, width: int, height: int) -> CameraIntrinsics:
    cam2cam = read_calib_file(Path(calib_dir) / "calib_cam_to_cam.txt")
    p_rect = cam2cam[f"P_rect_0{camera}"].reshape(3, 4)
    return CameraIntrinsics(
        fx=float(p_rect[0, 0]),
        fy=float(p_rect[1, 1]),
        cx=float(p_rect[0, 2]),
        cy=float(p_rect[1, 2]),
        width=width,
        height=height,
    )


def velodyne_depth(calib_dir: Path, velo_path: Path, camera: int = 2) -> np.ndarray:
    """Project a velodyne sweep into the rectified camera image as sparse depth.

    Pixels hit by several points keep the nearest one; pixels without a
    point are 0.
    """
    cam2cam = read_calib_file(Path(calib_dir) / "calib_cam_to_cam.txt")
    velo2cam_raw = read_calib_file(Path(calib_dir) / "calib_velo_to_cam.txt")
    velo2cam = np.vstack(
        (np.hstack((velo2cam_raw["R"].reshape(3, 3), velo2cam_raw["T"][:, None])), [0, 0, 0, 1.0])
    )
    width, height = cam2cam["S_rect_02"].astype(np.int64)
    rect = np.eye(4)
    rect[:3, :3] = cam2cam["R_rect_00"].reshape(3, 3)
    p_rect = cam2cam[f"P_rect_0{camera}"].reshape(3, 4)
    velo_to_image = p_rect @ rect @ velo2cam

    points = np.fromfile(str(velo_path), dtype=np.float32).reshape(-1, 4).astype(np.float64)
    points = points[points[:, 0] >= 0]
    points[:, 3] = 1.0
    proj = points @ velo_to_image.T
    proj[:, :2] /= proj[:, 2:3]
    x = np.round(proj[:, 0]).astype(np.int64) - 1
    y = np.round(proj[:, 1]).astype(np.int64) - 1
    z = proj[:, 2]
    keep = (x >= 0) & (y >= 0) & (x < width) & (y < height) & (z > 0)
    x, y, z = x[keep], y[keep], z[keep]

    depth = np.zeros((height, width))
    # Far points first so nearer ones overwrite them.
    order = np.argsort(-z)
    depth[y[order], x[order]] = z[order]
    return depth


@dataclass
class EigenEntry:
    folder: str
    index: int
    side: str


def read_split_file(path: Path) -> List[EigenEntry]:
    """Parse a monodepth-style split file (``<folder> <frame> <l|r>`` per line)."""
    if not Path(path).is_file():
        raise FileNotFoundError(f"Split file not found: {path}")
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[2] not in SIDE_TO_CAMERA:
                raise ValueError(f"{path}:{lineno}: expected '<folder> <frame> <l|r>', got {line!r}")
            entries.append(EigenEntry(parts[0], int(parts[1]), parts[2]))
    return entries


def is_static(frames, threshold: float) -> bool:
    """True when both neighbours differ from the centre frame by less than *threshold*."""
    prev_frame, center, next_frame = frames
    diffs = (np.abs(prev_frame - center).mean(), np.abs(next_frame - center).mean())
    return max(diffs) < threshold


def load_kitti_eigen(
    root: Path,
    split: str,
    width: int,
    height: int,
    split_file: Optional[Path] = None,
    static_threshold: Optional[float] = None,
) -> Iterator[SequenceSample]:
    """Yield Eigen-split triplets from a KITTI raw tree, in split-file order.

    Frames are resized to ``width × height`` with the intrinsics rescaled.
    Test samples carry sparse velodyne depth (``gt > 0`` marks valid pixels)
    at the native image resolution.  Entries with missing files are skipped
    with a warning; with *static_threshold* set, near-static triplets are
    skipped as well.

    Raises
    ------
    ValueError
        When *split* is unknown or no sample could be loaded.
    FileNotFoundError
        When the split file does not exist.
    """
    if split not in EIGEN_SPLITS:
        raise ValueError(f"Unknown Eigen split '{split}'; choose one of {sorted(EIGEN_SPLITS)}.")
    root = Path(root)
    if split_file is None:
        split_file = root / "splits" / EIGEN_SPLITS[split] / f"{split}_files.txt"
    entries = read_split_file(split_file)

    produced = 0
    for entry in entries:
        camera = SIDE_TO_CAMERA[entry.side]
        date = entry.folder.split("/")[0]
        image_dir = root / entry.folder / f"image_0{camera}" / "data"
        try:
            frames = tuple(
                read_image(image_dir / f"{entry.index + offset:010d}.png") for offset in (-1, 0, 1)
            )
            native_h, native_w = frames[1].shape[:2]
            intrinsics = camera_intrinsics(root / date, camera, native_w, native_h)
            gt_depth = None
            if split == "test":
                velo = root / entry.folder / "velodyne_points" / "data" / f"{entry.index:010d}.bin"
                if not velo.is_file():
                    raise FileNotFoundError(f"Velodyne sweep not found: {velo}")
                gt_depth = velodyne_depth(root / date, velo, camera)
        except (FileNotFoundError, KeyError) as exc:
            logger.warning("Skipping %s %d %s: %s", entry.folder, entry.index, entry.side, exc)
            continue
        if static_threshold is not None and split != "test" and is_static(frames, static_threshold):
            logger.debug("Skipping static triplet %s %d", entry.folder, entry.index)
            continue
        sample = SequenceSample(
            frames=frames,
            intrinsics=intrinsics,
            gt_depth=gt_depth,
            name=f"{entry.folder} {entry.index} {entry.side}",
        )
        produced += 1
        yield resize_sample(sample, width, height)

    if produced == 0:
        raise ValueError(
            f"The Eigen '{split}' split produced no samples.\n"
            f"  split file : {split_file}\n"
            f"  data root  : {root}"
        )
