"""
Training samples, the synthetic scene generator and the self-describing
synthetic dataset directory.

The generator renders a camera moving over a textured background plane with
textured rectangular sprites floating in front of it.  Everything is computed
analytically from the pinhole model, so depth, flow, pose, visibility and
rigidity ground truth are exact.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from depthflow.backbone import CameraIntrinsics, rotation_from_axis_angle

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "depthflow-synthetic"
MANIFEST_VERSION = 1

#: Stored 16-bit value = round(INVERSE_DEPTH_SCALE / depth); 0 marks no depth.
INVERSE_DEPTH_SCALE = 5000.0

#: Sinusoid wavelengths (pixels at frame 0) of the band-limited textures.
TEXTURE_WAVELENGTHS = (20.0, 80.0)
TEXTURE_BANDS = 8
TEXTURE_AMPLITUDE = 0.4

#: Minimum visible fraction of every sprite in every frame.
MIN_SPRITE_VISIBLE = 0.5


# ---------------------------------------------------------------------------
# Sample
# ---------------------------------------------------------------------------


@dataclass
class SequenceSample:
    """A frame triplet ``(t-1, t, t+1)`` with optional ground truth.

    ``frames`` are ``H × W × 3`` float32 RGB arrays in ``[0, 1]``.  Flow
    ground truth is for the pair ``(t, t+1)``; ``gt_pose`` is the 4×4
    transform taking frame-t camera points into the frame-(t+1) camera.
    """

    frames: Tuple[np.ndarray, np.ndarray, np.ndarray]
    intrinsics: CameraIntrinsics
    gt_depth: Optional[np.ndarray] = None
    gt_flow: Optional[np.ndarray] = None
    flow_valid: Optional[np.ndarray] = None
    flow_noc: Optional[np.ndarray] = None
    rigid_mask: Optional[np.ndarray] = None
    gt_pose: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self) -> None:
        if len(self.frames) != 3:
            raise ValueError(f"A sample needs three frames (t-1, t, t+1), got {len(self.frames)}.")
        shapes = {f.shape for f in self.frames}
        if len(shapes) != 1:
            raise ValueError(f"Frames of one sample differ in size: {sorted(shapes)}")

    @property
    def size(self) -> Tuple[int, int]:
        """``(width, height)`` of the frames."""
        h, w = self.frames[0].shape[:2]
        return w, h


def resize_sample(sample: SequenceSample, width: int, height: int) -> SequenceSample:
    """Resize the frames to ``width × height`` and rescale the intrinsics.

    Ground truth stays at its native resolution; evaluation resizes the
    prediction to it.
    """
    if sample.size == (width, height):
        return sample
    frames = tuple(
        cv2.resize(f, (width, height), interpolation=cv2.INTER_AREA).astype(np.float32)
        for f in sample.frames
    )
    return SequenceSample(
        frames=frames,
        intrinsics=sample.intrinsics.resized(width, height),
        gt_depth=sample.gt_depth,
        gt_flow=sample.gt_flow,
        flow_valid=sample.flow_valid,
        flow_noc=sample.flow_noc,
        rigid_mask=sample.rigid_mask,
        gt_pose=sample.gt_pose,
        name=sample.name,
    )


# ---------------------------------------------------------------------------
# Scene description
# ---------------------------------------------------------------------------


@dataclass
class SpriteSpec:
    """A textured rectangle parallel to the image plane.

    ``position`` is its centre and ``size`` its extent, both in frame-0
    pixels; ``velocity`` is its own image motion in pixels per frame at its
    depth.
    """

    depth: float
    velocity: Tuple[float, float]
    size: Tuple[float, float]
    position: Tuple[float, float]
    texture_seed: int = 0


@dataclass
class SyntheticSceneSpec:
    """Everything :func:`generate_synthetic` needs to render a sequence.

    ``translation`` and ``rotation`` (axis-angle) describe the per-frame
    camera motion: a point in camera ``k`` lands at ``R·X + t`` in camera
    ``k + 1``.
    """

    width: int = 256
    height: int = 128
    fx: float = 128.0
    fy: float = 128.0
    cx: float = 127.5
    cy: float = 63.5
    background_depth: float = 10.0
    translation: Tuple[float, float, float] = (0.2, 0.0, 0.0)
    rotation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    sprites: List[SpriteSpec] = field(default_factory=list)
    num_frames: int = 50
    seed: int = 0

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    def motion(self) -> np.ndarray:
        """4×4 per-frame camera motion (camera k → camera k+1)."""
        transform = np.eye(4)
        rot = rotation_from_axis_angle(torch.tensor(self.rotation, dtype=torch.float64))
        transform[:3, :3] = rot.numpy()
        transform[:3, 3] = self.translation
        return transform

    def camera_pose(self, k: int) -> np.ndarray:
        """4×4 transform from camera-0 coordinates to camera ``k``."""
        return np.linalg.matrix_power(self.motion(), k)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSceneSpec":
        data = dict(data)
        data["sprites"] = [
            SpriteSpec(
                depth=s["depth"],
                velocity=tuple(s["velocity"]),
                size=tuple(s["size"]),
                position=tuple(s["position"]),
                texture_seed=s.get("texture_seed", 0),
            )
            for s in data.get("sprites", [])
        ]
        for key in ("translation", "rotation"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    def validate(self) -> None:
        """Check the scene invariants.

        Raises
        ------
        ValueError
            When the image, intrinsics or motion are unusable, a sprite is not
            in front of the background, or a sprite is less than half visible
            in some frame.
        """
        if self.width < 1 or self.height < 1:
            raise ValueError(f"Image size must be positive, got {self.width}x{self.height}.")
        _ = self.intrinsics
        if self.background_depth <= 0:
            raise ValueError(f"Background depth must be positive, got {self.background_depth}.")
        if self.num_frames < 3:
            raise ValueError(f"A sequence needs at least 3 frames, got {self.num_frames}.")
        for j, sprite in enumerate(self.sprites):
            if not 0 < sprite.depth < self.background_depth:
                raise ValueError(
                    f"Sprite {j} depth {sprite.depth} must lie between 0 and the "
                    f"background depth {self.background_depth}."
                )
            if min(sprite.size) <= 0:
                raise ValueError(f"Sprite {j} has a non-positive size {sprite.size}.")
            for k in range(self.num_frames):
                visible = self._visible_fraction(sprite, k)
                if visible < MIN_SPRITE_VISIBLE:
                    raise ValueError(
                        f"Sprite {j} is only {visible:.0%} inside the image in frame {k}; "
                        f"every sprite must stay at least {MIN_SPRITE_VISIBLE:.0%} visible.\n"
                        "  Reduce its velocity, the camera motion or the sequence length."
                    )

    # -- geometry helpers -------------------------------------------------

    def sprite_center(self, sprite: SpriteSpec, k: int) -> np.ndarray:
        """Camera-0 coordinates of the sprite centre at frame ``k``."""
        z = sprite.depth
        base = np.array(
            [
                (sprite.position[0] - self.cx) * z / self.fx,
                (sprite.position[1] - self.cy) * z / self.fy,
                z,
            ]
        )
        return base + k * self.sprite_step(sprite)

    def sprite_step(self, sprite: SpriteSpec) -> np.ndarray:
        """Per-frame world displacement of the sprite."""
        z = sprite.depth
        return np.array([sprite.velocity[0] * z / self.fx, sprite.velocity[1] * z / self.fy, 0.0])

    def sprite_half_extent(self, sprite: SpriteSpec) -> Tuple[float, float]:
        z = sprite.depth
        return 0.5 * sprite.size[0] * z / self.fx, 0.5 * sprite.size[1] * z / self.fy

    def _visible_fraction(self, sprite: SpriteSpec, k: int) -> float:
        center = self.sprite_center(sprite, k)
        hx, hy = self.sprite_half_extent(sprite)
        corners = np.array(
            [center + [sx * hx, sy * hy, 0.0] for sx in (-1, 1) for sy in (-1, 1)]
        )
        pose = self.camera_pose(k)
        cam = corners @ pose[:3, :3].T + pose[:3, 3]
        if np.any(cam[:, 2] <= 0):
            return 0.0
        u = self.fx * cam[:, 0] / cam[:, 2] + self.cx
        v = self.fy * cam[:, 1] / cam[:, 2] + self.cy
        area = (u.max() - u.min()) * (v.max() - v.min())
        iw = max(0.0, min(u.max(), self.width) - max(u.min(), 0.0))
        ih = max(0.0, min(v.max(), self.height) - max(v.min(), 0.0))
        return float(iw * ih / area) if area > 0 else 0.0


def desk_scene(
    width: int = 256,
    height: int = 128,
    num_frames: int = 50,
    seed: int = 0,
    num_sprites: int = 2,
    translation: Tuple[float, float, float] = (0.2, 0.0, 0.0),
    background_depth: float = 10.0,
) -> SyntheticSceneSpec:
    """A translating camera over a plane with *num_sprites* moving sprites.

    Sprite velocities are drawn so each sprite drifts at most a third of the
    image across the whole sequence.
    """
    rng = np.random.default_rng(seed)
    fx = fy = 0.5 * width
    sprites = []
    span = max(num_frames - 1, 1)
    for j in range(num_sprites):
        depth = float(rng.uniform(0.35, 0.6) * background_depth)
        size = (float(rng.uniform(0.15, 0.25) * width), float(rng.uniform(0.25, 0.4) * height))
        drift = np.array([rng.uniform(-1, 1) * width / 3, rng.uniform(-1, 1) * height / 8]) / span
        start = np.array(
            [
                rng.uniform(0.3, 0.7) * width - 0.5 * drift[0] * span,
                rng.uniform(0.35, 0.65) * height - 0.5 * drift[1] * span,
            ]
        )
        rigid = np.array([fx * translation[0] / depth, fy * translation[1] / depth])
        velocity = drift - rigid
        sprites.append(
            SpriteSpec(
                depth=depth,
                velocity=(float(velocity[0]), float(velocity[1])),
                size=size,
                position=(float(start[0]), float(start[1])),
                texture_seed=seed * 1000 + j + 1,
            )
        )
    return SyntheticSceneSpec(
        width=width,
        height=height,
        fx=fx,
        fy=fy,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        background_depth=background_depth,
        translation=translation,
        sprites=sprites,
        num_frames=num_frames,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def texture(u: np.ndarray, v: np.ndarray, seed: int) -> np.ndarray:
    """Band-limited RGB texture: a sum of random plane waves around grey 0.5."""
    rng = np.random.default_rng(seed)
    out = np.full(u.shape + (3,), 0.5)
    lo, hi = TEXTURE_WAVELENGTHS
    for c in range(3):
        wavelengths = rng.uniform(lo, hi, TEXTURE_BANDS)
        angles = rng.uniform(0.0, np.pi, TEXTURE_BANDS)
        phases = rng.uniform(0.0, 2 * np.pi, TEXTURE_BANDS)
        amplitudes = TEXTURE_AMPLITUDE * wavelengths / wavelengths.sum()
        for lam, theta, phase, amp in zip(wavelengths, angles, phases, amplitudes):
            proj = u * np.cos(theta) + v * np.sin(theta)
            out[..., c] += amp * np.sin(2 * np.pi * proj / lam + phase)
    return np.clip(out, 0.0, 1.0)


@dataclass
class RenderedFrame:
    image: np.ndarray
    depth: np.ndarray
    surface: np.ndarray
    points: np.ndarray


@dataclass
class SyntheticSequence:
    """A fully rendered sequence with per-frame and per-pair ground truth.

    ``flows[k]``, ``flow_valid[k]``, ``flow_noc[k]`` and ``rigid[k]`` describe
    the pair ``(k, k+1)``.
    """

    spec: SyntheticSceneSpec
    frames: List[np.ndarray]
    depths: List[np.ndarray]
    flows: List[np.ndarray]
    flow_valid: List[np.ndarray]
    flow_noc: List[np.ndarray]
    rigid: List[np.ndarray]

    @property
    def motion(self) -> np.ndarray:
        return self.spec.motion()

    def samples(self) -> Iterator[SequenceSample]:
        """Yield the triplet centred on every frame that has both neighbours."""
        for t in range(1, len(self.frames) - 1):
            yield SequenceSample(
                frames=(self.frames[t - 1], self.frames[t], self.frames[t + 1]),
                intrinsics=self.spec.intrinsics,
                gt_depth=self.depths[t],
                gt_flow=self.flows[t],
                flow_valid=self.flow_valid[t],
                flow_noc=self.flow_noc[t],
                rigid_mask=self.rigid[t],
                gt_pose=self.motion,
                name=f"{t:06d}",
            )


def _pixel_rays(spec: SyntheticSceneSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    rays = np.stack([(xs - spec.cx) / spec.fx, (ys - spec.cy) / spec.fy, np.ones_like(xs)], -1)
    return xs, ys, rays


def _render_frame(spec: SyntheticSceneSpec, k: int) -> RenderedFrame:
    _, _, rays = _pixel_rays(spec)
    pose = spec.camera_pose(k)
    rot, trans = pose[:3, :3], pose[:3, 3]
    origin = -rot.T @ trans
    directions = rays @ rot

    def hit(plane_z: float) -> Tuple[np.ndarray, np.ndarray]:
        dz = directions[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (plane_z - origin[2]) / dz
        lam = np.where((dz > 0) & (lam > 0), lam, np.inf)
        finite = np.where(np.isfinite(lam), lam, 0.0)
        return lam, origin + finite[..., None] * directions

    depth, points = hit(spec.background_depth)
    surface = np.zeros(depth.shape, dtype=np.int32)
    u = spec.fx * points[..., 0] / spec.background_depth + spec.cx
    v = spec.fy * points[..., 1] / spec.background_depth + spec.cy
    image = texture(u, v, spec.seed)

    for j, sprite in enumerate(spec.sprites, start=1):
        lam, pts = hit(sprite.depth)
        center = spec.sprite_center(sprite, k)
        hx, hy = spec.sprite_half_extent(sprite)
        local = pts - center
        inside = (np.abs(local[..., 0]) <= hx) & (np.abs(local[..., 1]) <= hy) & (lam < depth)
        if not inside.any():
            continue
        su = spec.fx * local[..., 0] / sprite.depth
        sv = spec.fy * local[..., 1] / sprite.depth
        sprite_image = texture(su, sv, sprite.texture_seed)
        depth = np.where(inside, lam, depth)
        points = np.where(inside[..., None], pts, points)
        surface = np.where(inside, j, surface)
        image = np.where(inside[..., None], sprite_image, image)

    return RenderedFrame(image.astype(np.float32), depth, surface, points)


def _pair_flow(
    spec: SyntheticSceneSpec, current: RenderedFrame, nxt: RenderedFrame, k: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    xs, ys, _ = _pixel_rays(spec)
    steps = np.zeros((len(spec.sprites) + 1, 3))
    for j, sprite in enumerate(spec.sprites, start=1):
        steps[j] = spec.sprite_step(sprite)
    moved = current.points + steps[current.surface]
    pose = spec.camera_pose(k + 1)
    cam = moved @ pose[:3, :3].T + pose[:3, 3]
    in_front = cam[..., 2] > 0
    z = np.where(in_front, cam[..., 2], 1.0)
    x1 = spec.fx * cam[..., 0] / z + spec.cx
    y1 = spec.fy * cam[..., 1] / z + spec.cy
    flow = np.stack([x1 - xs, y1 - ys], -1)

    valid = (
        in_front
        & np.isfinite(current.depth)
        & (x1 >= 0)
        & (x1 <= spec.width - 1)
        & (y1 >= 0)
        & (y1 <= spec.height - 1)
    )
    noc = valid.copy()
    fx0 = np.clip(np.floor(x1), 0, spec.width - 1).astype(np.int64)
    fy0 = np.clip(np.floor(y1), 0, spec.height - 1).astype(np.int64)
    for dx in (0, 1):
        for dy in (0, 1):
            nx = np.clip(fx0 + dx, 0, spec.width - 1)
            ny = np.clip(fy0 + dy, 0, spec.height - 1)
            noc &= nxt.surface[ny, nx] == current.surface
    return flow, valid, noc


def render_sequence(spec: SyntheticSceneSpec) -> SyntheticSequence:
    """Render every frame of *spec* together with its ground truth."""
    spec.validate()
    rendered = [_render_frame(spec, k) for k in range(spec.num_frames)]
    flows, valids, nocs, rigids = [], [], [], []
    for k in range(spec.num_frames - 1):
        flow, valid, noc = _pair_flow(spec, rendered[k], rendered[k + 1], k)
        flows.append(flow)
        valids.append(valid)
        nocs.append(noc)
        rigids.append(rendered[k].surface == 0)
    return SyntheticSequence(
        spec=spec,
        frames=[r.image for r in rendered],
        depths=[r.depth for r in rendered],
        flows=flows,
        flow_valid=valids,
        flow_noc=nocs,
        rigid=rigids,
    )


def generate_synthetic(spec: SyntheticSceneSpec) -> Iterator[SequenceSample]:
    """Render *spec* and yield its triplets with full ground truth.

    Deterministic given the spec (textures are seeded by ``spec.seed`` and
    each sprite's ``texture_seed``).

    Raises
    ------
    ValueError
        When the scene violates :meth:`SyntheticSceneSpec.validate`.
    """
    yield from render_sequence(spec).samples()


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------


def write_image(path: Path, rgb: np.ndarray) -> None:
    data = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    if not cv2.imwrite(str(path), data[..., ::-1]):
        raise OSError(f"Could not write image {path}")


def read_image(path: Path) -> np.ndarray:
    data = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if data is None:
        raise FileNotFoundError(f"Image not found or unreadable: {path}")
    return (data[..., ::-1].astype(np.float32) / 255.0).copy()


def export_synthetic(sequence: SyntheticSequence, out_dir: Path) -> Path:
    """Write *sequence* as a self-describing directory and return the manifest path.

    Layout::

        manifest.json        intrinsics, camera poses, scene spec, seed, scales
        image/NNNNNN.png     8-bit RGB frames
        depth/NNNNNN.png     16-bit inverse depth (value = scale / depth)
        flow_occ/NNNNNN.png  16-bit KITTI flow (k → k+1), valid = in frame
        flow_noc/NNNNNN.png  same flow, valid = non-occluded
        rigid/NNNNNN.png     8-bit background (camera-motion only) mask
    """
    from depthflow.kitti import write_flow_png

    out_dir = Path(out_dir)
    for sub in ("image", "depth", "flow_occ", "flow_noc", "rigid"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    n = len(sequence.frames)
    for k in range(n):
        name = f"{k:06d}.png"
        write_image(out_dir / "image" / name, sequence.frames[k])
        inv = np.where(
            np.isfinite(sequence.depths[k]), INVERSE_DEPTH_SCALE / sequence.depths[k], 0.0
        )
        cv2.imwrite(str(out_dir / "depth" / name), np.clip(np.round(inv), 0, 65535).astype(np.uint16))
        if k < n - 1:
            write_flow_png(out_dir / "flow_occ" / name, sequence.flows[k], sequence.flow_valid[k])
            write_flow_png(out_dir / "flow_noc" / name, sequence.flows[k], sequence.flow_noc[k])
            cv2.imwrite(str(out_dir / "rigid" / name), sequence.rigid[k].astype(np.uint8) * 255)

    spec = sequence.spec
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "num_frames": n,
        "seed": spec.seed,
        "intrinsics": spec.intrinsics.to_dict(),
        "camera_motion": sequence.motion.tolist(),
        "camera_poses": [spec.camera_pose(k).tolist() for k in range(n)],
        "inverse_depth_scale": INVERSE_DEPTH_SCALE,
        "flow_encoding": "kitti-16bit",
        "scene": spec.to_dict(),
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    logger.info("Exported %d synthetic frames to %s", n, out_dir)
    return path


def read_manifest(data_dir: Path) -> Dict:
    """Load and check the manifest of an exported synthetic directory.

    Raises
    ------
    FileNotFoundError
        When the directory has no manifest.
    ValueError
        When the manifest belongs to another format or a newer version.
    """
    path = Path(data_dir) / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(
            f"No {MANIFEST_NAME} in {data_dir}.\n"
            "  Create a synthetic dataset first: depthflow synth-data --out DIR"
        )
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path} is not a {MANIFEST_FORMAT} manifest.")
    if int(manifest.get("version", 0)) > MANIFEST_VERSION:
        raise ValueError(
            f"{path} has format version {manifest['version']}; "
            f"this depthflow reads up to version {MANIFEST_VERSION}."
        )
    return manifest


def load_synthetic_dir(data_dir: Path) -> Iterator[SequenceSample]:
    """Yield the triplets of a directory written by :func:`export_synthetic`."""
    from depthflow.kitti import read_flow_png

    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    n = int(manifest["num_frames"])
    intrinsics = CameraIntrinsics(**manifest["intrinsics"])
    motion = np.asarray(manifest["camera_motion"], dtype=np.float64)
    scale = float(manifest["inverse_depth_scale"])

    def name(k: int) -> str:
        return f"{k:06d}.png"

    frames = [read_image(data_dir / "image" / name(k)) for k in range(n)]
    for t in range(1, n - 1):
        inv = cv2.imread(str(data_dir / "depth" / name(t)), cv2.IMREAD_UNCHANGED).astype(np.float64)
        depth = np.where(inv > 0, scale / np.maximum(inv, 1e-12), 0.0)
        flow, valid = read_flow_png(data_dir / "flow_occ" / name(t))
        _, noc = read_flow_png(data_dir / "flow_noc" / name(t))
        rigid = cv2.imread(str(data_dir / "rigid" / name(t)), cv2.IMREAD_UNCHANGED) > 0
        yield SequenceSample(
            frames=(frames[t - 1], frames[t], frames[t + 1]),
            intrinsics=intrinsics,
            gt_depth=depth,
            gt_flow=flow,
            flow_valid=valid,
            flow_noc=noc,
            rigid_mask=rigid,
            gt_pose=motion,
            name=name(t)[:-4],
        )


# ---------------------------------------------------------------------------
# Torch dataset
# ---------------------------------------------------------------------------


def _chw(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()


class SequenceDataset(Dataset):
    """Tensors for training and evaluation from a list of samples.

    Every item carries ``frames`` ``[3, 3, H, W]`` (t-1, t, t+1) and ``K``
    ``[3, 3]``; ground-truth entries appear when the samples have them.
    """

    def __init__(self, samples: Sequence[SequenceSample], width: Optional[int] = None,
                 height: Optional[int] = None):
        if not samples:
            raise ValueError("SequenceDataset received no samples.")
        if width is not None and height is not None:
            samples = [resize_sample(s, width, height) for s in samples]
        self.samples = list(samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        sample = self.samples[index]
        item = {
            "frames": torch.stack([_chw(f) for f in sample.frames]),
            "K": sample.intrinsics.matrix(torch.float32),
            "index": torch.tensor(index),
        }
        if sample.gt_depth is not None:
            item["gt_depth"] = torch.from_numpy(
                np.where(np.isfinite(sample.gt_depth), sample.gt_depth, 0.0)
            ).float()[None]
        if sample.gt_flow is not None:
            item["gt_flow"] = _chw(sample.gt_flow)
            item["flow_valid"] = torch.from_numpy(np.asarray(sample.flow_valid, dtype=bool))
            if sample.flow_noc is not None:
                item["flow_noc"] = torch.from_numpy(np.asarray(sample.flow_noc, dtype=bool))
        if sample.rigid_mask is not None:
            item["rigid_mask"] = torch.from_numpy(np.asarray(sample.rigid_mask, dtype=bool))
        if sample.gt_pose is not None:
            item["gt_pose"] = torch.from_numpy(np.asarray(sample.gt_pose)).float()
        return item


def make_loader(
    dataset: Dataset, batch_size: int, seed: int, shuffle: bool = True, num_workers: int = 0
) -> DataLoader:
    """DataLoader with a seeded shuffling generator; single process by default."""
    generator = torch.Generator()
    generator.manual_seed(seed)
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        num_workers=num_workers,
        generator=generator,
        drop_last=shuffle and len(dataset) >= batch_size,
    )
