"""
Training configuration and its flat ``key = value`` file format.

Example::

    # desk-scale synthetic run
    width = 256
    height = 128
    stage1_steps = 200
    encoder_widths = 16, 32, 64, 96, 128
    dual_head = true

Blank lines and ``#`` comments are ignored.  Values are typed from the
:class:`TrainConfig` field types; tuples are comma separated.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, get_type_hints

from depthflow.model import ExchangeFlags

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

DATA_ROOT_ENV = "DEPTHFLOW_DATA_ROOT"

DATASETS = ("synthetic", "synthetic_dir", "kitti")

#: Fields that do not change what a run computes; left out of the config hash.
HASH_EXCLUDED = frozenset(
    {"seed", "output_dir", "data_root", "kitti_flow_root", "split_file", "device", "num_workers", "log_every"}
)

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class TrainConfig:
    # -- data ---------------------------------------------------------------
    dataset: str = "synthetic"
    data_root: str = ""
    kitti_flow_root: str = ""
    split_file: str = ""
    static_threshold: float = 0.0
    width: int = 256
    height: int = 128
    synth_frames: int = 50
    synth_sprites: int = 2
    synth_translation: Tuple[float, ...] = (0.2, 0.0, 0.0)
    synth_val_seed_offset: int = 1000

    # -- architecture -------------------------------------------------------
    encoder_widths: Tuple[int, ...] = (16, 32, 64, 96, 128)
    depth_widths: Tuple[int, ...] = (16, 32, 64, 96, 128)
    estimator_widths: Tuple[int, ...] = (128, 128, 96, 64, 32)
    radius: int = 4
    mask_hidden: int = 32
    min_depth: float = 0.1
    max_depth: float = 100.0

    # -- exchange flags -----------------------------------------------------
    separate_encoders: bool = False
    d2f: bool = True
    f2d: bool = True
    ema: bool = True
    dual_head: bool = True

    # -- schedule -----------------------------------------------------------
    stage1_epochs: int = 20
    stage2_epochs: int = 20
    stage3_epochs: int = 5
    stage1_lr: float = 1e-4
    stage2_lr: float = 1e-4
    stage3_lr: float = 1e-5
    stage1_steps: int = 0
    stage2_steps: int = 0
    stage3_steps: int = 0
    freeze_depth_in_stage2: bool = False

    # -- optimiser ----------------------------------------------------------
    batch_size: int = 4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.0
    ema_decay: float = 0.999

    # -- losses -------------------------------------------------------------
    disparity_smoothness: float = 1e-3
    flow_smoothness: float = 1e-2
    flow_scale_weights: Tuple[float, ...] = (0.32, 0.08, 0.02, 0.01)
    flow_loss_weight: float = 1.0
    flow_border: float = 0.05
    automask: bool = True
    use_ssim: bool = True

    # -- run ----------------------------------------------------------------
    seed: int = 0
    device: str = "cpu"
    num_workers: int = 0
    log_every: int = 10
    output_dir: str = "runs"

    # ---------------------------------------------------------------------

    def flags(self) -> ExchangeFlags:
        return ExchangeFlags(
            separate_encoders=self.separate_encoders,
            d2f=self.d2f,
            f2d=self.f2d,
            ema=self.ema,
            dual_head=self.dual_head,
        )

    def with_flags(self, flags: ExchangeFlags) -> "TrainConfig":
        return dataclasses.replace(self, **flags.to_dict())

    def stage_lr(self, stage: int) -> float:
        return getattr(self, f"stage{stage}_lr")

    def stage_epochs(self, stage: int) -> int:
        return getattr(self, f"stage{stage}_epochs")

    def stage_steps(self, stage: int) -> int:
        """Step budget of *stage*; 0 means "run the configured epochs"."""
        return getattr(self, f"stage{stage}_steps")

    def validate(self) -> "TrainConfig":
        """Check value ranges and flag consistency; return ``self``.

        Raises
        ------
        ValueError
            On the first violated constraint.
        """
        if self.dataset not in DATASETS:
            raise ValueError(f"dataset must be one of {', '.join(DATASETS)}; got '{self.dataset}'.")
        for stage in (1, 2, 3):
            if self.stage_lr(stage) <= 0:
                raise ValueError(f"stage{stage}_lr must be > 0, got {self.stage_lr(stage)}.")
            if self.stage_epochs(stage) < 0 or self.stage_steps(stage) < 0:
                raise ValueError(f"stage{stage} epochs and steps must be >= 0.")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1), got {self.ema_decay}.")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}.")
        if self.width % 32 or self.height % 32:
            raise ValueError(
                f"width and height must be multiples of 32, got {self.width}x{self.height}."
            )
        for name in ("encoder_widths", "depth_widths", "estimator_widths"):
            if len(getattr(self, name)) != 5:
                raise ValueError(f"{name} needs 5 values, got {getattr(self, name)}.")
        if len(self.flow_scale_weights) != 4:
            raise ValueError(f"flow_scale_weights needs 4 values, got {self.flow_scale_weights}.")
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError(f"Need 0 < min_depth < max_depth, got {self.min_depth}, {self.max_depth}.")
        if self.radius < 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}.")
        self.flags()
        return self


# ---------------------------------------------------------------------------
# Flat key = value format
# ---------------------------------------------------------------------------


def _field_types() -> Dict[str, Any]:
    return get_type_hints(TrainConfig)


def _parse_value(raw: str, kind: Any) -> Any:
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean (true/false), got '{raw}'")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is str:
        return raw
    args = getattr(kind, "__args__", ())
    if args:
        item = args[0]
        return tuple(item(x.strip()) for x in raw.split(",") if x.strip())
    raise ValueError(f"unsupported field type {kind}")


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def parse_config(text: str, source: str = "<config>", base: Optional[TrainConfig] = None) -> TrainConfig:
    """Parse flat ``key = value`` *text* on top of *base* (defaults when omitted).

    Raises
    ------
    ValueError
        On unknown keys, malformed lines or unparsable values, naming the
        line number.
    """
    types = _field_types()
    values: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, raw = stripped.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        if key not in types:
            raise ValueError(f"{source}:{lineno}: unknown config key '{key}'")
        try:
            values[key] = _parse_value(raw, types[key])
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: bad value for '{key}': {exc}") from None
    config = dataclasses.replace(base or TrainConfig(), **values)
    return config.validate()


def load_config(path: Optional[Path] = None, env: Optional[Dict[str, str]] = None) -> TrainConfig:
    """Read a config file (defaults when *path* is None) and apply the environment.

    ``DEPTHFLOW_DATA_ROOT`` replaces ``data_root`` when set.

    Raises
    ------
    FileNotFoundError
        When *path* does not exist.
    ValueError
        When the file is malformed or fails validation.
    """
    if path is None:
        config = TrainConfig().validate()
    else:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Config file not found: {path}")
        config = parse_config(path.read_text(encoding="utf-8"), source=str(path))
    env = os.environ if env is None else env
    if env.get(DATA_ROOT_ENV):
        config = dataclasses.replace(config, data_root=env[DATA_ROOT_ENV])
    return config


def format_config(config: TrainConfig) -> str:
    """Render *config* in the flat format; :func:`parse_config` reads it back."""
    return "\n".join(f"{f.name} = {_format_value(getattr(config, f.name))}" for f in fields(config)) + "\n"


def config_hash(config: TrainConfig) -> str:
    """SHA-256 over the fields that determine what a run computes."""
    digest = hashlib.sha256()
    for f in fields(config):
        if f.name in HASH_EXCLUDED:
            continue
        digest.update(f"{f.name}={_format_value(getattr(config, f.name))}\n".encode("utf-8"))
    return digest.hexdigest()


def config_to_dict(config: TrainConfig) -> Dict[str, Any]:
    return dataclasses.asdict(config)


def config_from_dict(data: Dict[str, Any]) -> TrainConfig:
    """Inverse of :func:`config_to_dict`; JSON lists become tuples again."""
    types = _field_types()
    clean = {}
    for key, value in data.items():
        if key not in types:
            raise ValueError(f"unknown config key '{key}'")
        clean[key] = tuple(value) if isinstance(value, list) else value
    return TrainConfig(**clean).validate()
