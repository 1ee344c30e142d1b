"""
Versioned single-file checkpoint container.

Layout::

    8 bytes   magic  b"DFLOWCKP"
    uint32    format version (little endian)
    uint64    manifest length in bytes (little endian)
    ...       UTF-8 JSON manifest
    ...       raw little-endian tensor blobs, in manifest order

The manifest holds the config snapshot, the stage / step / epoch counters,
the metric history, the optimizer's param groups and a table with
``name``, ``group``, ``dtype``, ``shape``, ``offset`` and ``nbytes`` for every
tensor.  Model tensors (teacher included) are keyed by their state-dict
path; optimizer state tensors by ``<param index>.<field>``.
"""

from __future__ import annotations

import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch

logger = logging.getLogger(__name__)

MAGIC = b"DFLOWCKP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    """Everything needed to resume training or run a trained model."""

    config: Dict[str, Any]
    model_state: Dict[str, torch.Tensor]
    stage: int = 0
    step: int = 0
    epoch: int = 0
    optimizer_state: Optional[Dict[str, Any]] = None
    history: List[Dict[str, Any]] = field(default_factory=list)
    format_version: int = FORMAT_VERSION


# ---------------------------------------------------------------------------
# Tensor <-> bytes
# ---------------------------------------------------------------------------


def _tensor_bytes(tensor: torch.Tensor) -> Tuple[str, List[int], bytes]:
    array = tensor.detach().cpu().contiguous().numpy()
    dtype = array.dtype.newbyteorder("<")
    return array.dtype.str.lstrip("<>|="), list(array.shape), array.astype(dtype, copy=False).tobytes()


def _tensor_from_bytes(raw: bytes, dtype: str, shape: List[int]) -> torch.Tensor:
    array = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).reshape(shape)
    return torch.from_numpy(array.astype(np.dtype(dtype).newbyteorder("="), copy=True))


def _split_optimizer(state: Dict[str, Any]) -> Tuple[List[Dict], Dict[str, torch.Tensor], Dict[str, Any]]:
    tensors: Dict[str, torch.Tensor] = OrderedDict()
    scalars: Dict[str, Any] = {}
    for index, entry in state["state"].items():
        for key, value in entry.items():
            name = f"{index}.{key}"
            if torch.is_tensor(value):
                tensors[name] = value
            else:
                scalars[name] = value
    return state["param_groups"], tensors, scalars


def _join_optimizer(groups: List[Dict], tensors: Dict[str, torch.Tensor], scalars: Dict[str, Any]) -> Dict:
    state: Dict[int, Dict[str, Any]] = {}
    for name, value in list(tensors.items()) + list(scalars.items()):
        index, key = name.split(".", 1)
        state.setdefault(int(index), {})[key] = value
    for group in groups:
        if isinstance(group.get("betas"), list):
            group["betas"] = tuple(group["betas"])
    return {"state": state, "param_groups": groups}


# ---------------------------------------------------------------------------
# Save / load
# ---------------------------------------------------------------------------


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> Path:
    """Write *checkpoint* to *path* atomically (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    entries: List[Tuple[str, str, torch.Tensor]] = [
        (name, "model", t) for name, t in checkpoint.model_state.items()
    ]
    groups: Optional[List[Dict]] = None
    scalars: Dict[str, Any] = {}
    if checkpoint.optimizer_state is not None:
        groups, opt_tensors, scalars = _split_optimizer(checkpoint.optimizer_state)
        entries.extend((name, "optimizer", t) for name, t in opt_tensors.items())

    table = []
    blobs = []
    offset = 0
    for name, group, tensor in entries:
        dtype, shape, raw = _tensor_bytes(tensor)
        table.append(
            {"name": name, "group": group, "dtype": dtype, "shape": shape, "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)

    manifest = {
        "config": checkpoint.config,
        "stage": checkpoint.stage,
        "step": checkpoint.step,
        "epoch": checkpoint.epoch,
        "history": checkpoint.history,
        "optimizer": None if groups is None else {"param_groups": groups, "scalars": scalars},
        "tensors": table,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest_bytes)))
        fh.write(manifest_bytes)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)
    logger.info("Checkpoint written: %s (stage %d, step %d)", path, checkpoint.stage, checkpoint.step)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Raises
    ------
    FileNotFoundError
        When *path* does not exist.
    ValueError
        When the file is not a checkpoint, is truncated, or was written by a
        newer format version.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: too short to be a checkpoint ({len(data)} bytes).")
    magic, version, manifest_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a depthflow checkpoint (bad magic {magic!r}).")
    if version > FORMAT_VERSION:
        raise ValueError(
            f"{path}: checkpoint format version {version} is newer than the supported "
            f"version {FORMAT_VERSION}.\n  Upgrade depthflow to read it."
        )
    if version < FORMAT_VERSION:
        logger.warning("%s: reading checkpoint format version %d", path, version)

    start = _HEADER.size
    try:
        manifest = json.loads(data[start : start + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint manifest ({exc}).") from None
    blob_start = start + manifest_len

    model_state: Dict[str, torch.Tensor] = OrderedDict()
    opt_tensors: Dict[str, torch.Tensor] = OrderedDict()
    for entry in manifest["tensors"]:
        begin = blob_start + entry["offset"]
        end = begin + entry["nbytes"]
        if end > len(data):
            raise ValueError(f"{path}: truncated checkpoint (tensor '{entry['name']}' is incomplete).")
        tensor = _tensor_from_bytes(data[begin:end], entry["dtype"], entry["shape"])
        target = model_state if entry["group"] == "model" else opt_tensors
        target[entry["name"]] = tensor

    optimizer_state = None
    if manifest.get("optimizer") is not None:
        opt = manifest["optimizer"]
        optimizer_state = _join_optimizer(opt["param_groups"], opt_tensors, opt.get("scalars", {}))

    return Checkpoint(
        config=manifest["config"],
        model_state=model_state,
        stage=manifest["stage"],
        step=manifest["step"],
        epoch=manifest["epoch"],
        optimizer_state=optimizer_state,
        history=manifest.get("history", []),
        format_version=version,
    )
