"""
Tests for depthflow.checkpoint: the binary container and resuming from it.
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path

import pytest
import torch

from depthflow.checkpoint import FORMAT_VERSION, MAGIC, Checkpoint, load_checkpoint, save_checkpoint
from depthflow.config import TrainConfig, config_to_dict
from depthflow.model import MultiTaskNet
from tests.conftest import TINY_ARCH


def _trained_pair():
    net = MultiTaskNet(**TINY_ARCH)
    optimizer = torch.optim.Adam(net.trainable_parameters(2), lr=1e-3)
    frames = torch.rand(2, 3, 64, 64), torch.rand(2, 3, 64, 64)
    out = net(*frames, stage=2)
    (out.flow.full.abs().mean() + out.depth.disparities[0].mean()).backward()
    optimizer.step()
    return net, optimizer, frames


class TestRoundTrip:
    def test_restored_model_is_bit_exact(self, tmp_path: Path):
        net, optimizer, frames = _trained_pair()
        ckpt = Checkpoint(
            config=config_to_dict(TrainConfig(**TINY_ARCH)),
            model_state=net.state_dict(),
            stage=2,
            step=1,
            epoch=0,
            optimizer_state=optimizer.state_dict(),
            history=[{"stage": 2, "steps": 1}],
        )
        path = save_checkpoint(ckpt, tmp_path / "ckpt" / "stage2.ckpt")
        assert path.read_bytes()[:8] == MAGIC
        assert not (tmp_path / "ckpt" / "stage2.ckpt.tmp").exists()

        loaded = load_checkpoint(path)
        assert (loaded.stage, loaded.step, loaded.epoch) == (2, 1, 0)
        assert loaded.history == [{"stage": 2, "steps": 1}]
        assert loaded.format_version == FORMAT_VERSION

        clone = MultiTaskNet(**TINY_ARCH)
        clone.load_state_dict(loaded.model_state)
        net.eval()
        clone.eval()
        a = net.predict(*frames)
        b = clone.predict(*frames)
        assert torch.equal(a.depth, b.depth)
        assert torch.equal(a.flow, b.flow)

    def test_optimizer_state_survives(self, tmp_path: Path):
        net, optimizer, _ = _trained_pair()
        ckpt = Checkpoint(config={}, model_state=net.state_dict(), optimizer_state=optimizer.state_dict())
        loaded = load_checkpoint(save_checkpoint(ckpt, tmp_path / "a.ckpt"))

        original = optimizer.state_dict()
        restored = loaded.optimizer_state
        assert restored["param_groups"][0]["betas"] == original["param_groups"][0]["betas"]
        assert set(restored["state"]) == set(original["state"])
        for index, entry in original["state"].items():
            for key, value in entry.items():
                got = restored["state"][index][key]
                if torch.is_tensor(value):
                    assert torch.equal(got, value)
                else:
                    assert got == value

        fresh = torch.optim.Adam(MultiTaskNet(**TINY_ARCH).trainable_parameters(2), lr=1e-3)
        fresh.load_state_dict(restored)

    def test_teacher_tensors_are_stored(self, tmp_path: Path):
        net = MultiTaskNet(**TINY_ARCH)
        loaded = load_checkpoint(save_checkpoint(Checkpoint({}, net.state_dict()), tmp_path / "t.ckpt"))
        assert any(name.startswith("flow_teacher.") for name in loaded.model_state)
        assert loaded.optimizer_state is None


class TestRejection:
    def test_missing_file(self, tmp_path: Path):
        with pytest.raises(FileNotFoundError, match="Checkpoint not found"):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_bad_magic(self, tmp_path: Path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOTACKPT" + bytes(64))
        with pytest.raises(ValueError, match="bad magic"):
            load_checkpoint(path)

    def test_too_short(self, tmp_path: Path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"DF")
        with pytest.raises(ValueError, match="too short"):
            load_checkpoint(path)

    def test_newer_version(self, tmp_path: Path):
        path = save_checkpoint(Checkpoint({}, {"w": torch.ones(2)}), tmp_path / "x.ckpt")
        data = bytearray(path.read_bytes())
        struct.pack_into("<I", data, 8, FORMAT_VERSION + 1)
        path.write_bytes(bytes(data))
        with pytest.raises(ValueError, match="newer than the supported"):
            load_checkpoint(path)

    def test_older_version_warns(self, tmp_path: Path, caplog):
        path = save_checkpoint(Checkpoint({}, {"w": torch.ones(2)}), tmp_path / "x.ckpt")
        data = bytearray(path.read_bytes())
        struct.pack_into("<I", data, 8, FORMAT_VERSION - 1)
        path.write_bytes(bytes(data))
        with caplog.at_level(logging.WARNING, logger="depthflow.checkpoint"):
            loaded = load_checkpoint(path)
        assert torch.equal(loaded.model_state["w"], torch.ones(2))
        assert "format version" in caplog.text

    def test_truncated(self, tmp_path: Path):
        path = save_checkpoint(Checkpoint({}, {"w": torch.ones(100)}), tmp_path / "x.ckpt")
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)

    def test_corrupt_manifest(self, tmp_path: Path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(struct.pack("<8sIQ", MAGIC, FORMAT_VERSION, 5) + b"{oops")
        with pytest.raises(ValueError, match="corrupt checkpoint manifest"):
            load_checkpoint(path)
