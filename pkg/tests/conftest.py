"""
Shared fixtures and the ``--runslow`` switch for the training acceptance runs.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import pytest
import torch

from depthflow.config import TrainConfig
from depthflow.data import SequenceDataset, desk_scene, render_sequence

#: Network widths small enough for CPU unit tests.
TINY_ARCH = {
    "encoder_widths": (8, 8, 16, 16, 16),
    "depth_widths": (8, 8, 16, 16, 16),
    "estimator_widths": (16, 16, 8, 8, 8),
    "radius": 2,
    "mask_hidden": 8,
}


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run the slow training acceptance tests"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(0)


@pytest.fixture()
def tiny_config(tmp_path: Path) -> TrainConfig:
    """A 64x64 synthetic config with tiny widths and a handful of steps per stage."""
    return TrainConfig(
        width=64,
        height=64,
        synth_frames=6,
        synth_sprites=1,
        batch_size=2,
        stage1_steps=3,
        stage2_steps=3,
        stage3_steps=2,
        log_every=1,
        output_dir=str(tmp_path / "run"),
        **TINY_ARCH,
    ).validate()


@pytest.fixture()
def tiny_sequence():
    """A rendered 64x64, 5-frame synthetic sequence with one sprite."""
    return render_sequence(desk_scene(width=64, height=64, num_frames=5, seed=3, num_sprites=1))


@pytest.fixture()
def tiny_batch(tiny_sequence):
    """A collated batch of two training triplets."""
    dataset = SequenceDataset(list(tiny_sequence.samples()))
    items = [dataset[0], dataset[1]]
    return {key: torch.stack([item[key] for item in items]) for key in items[0]}


def with_flags(config: TrainConfig, **flags) -> TrainConfig:
    return dataclasses.replace(config, **flags).validate()
