"""
CLI tests: argument handling, exit codes and the files each sub-command writes.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import cv2
import numpy as np
import pytest

from depthflow import __version__
from depthflow.config import TrainConfig, format_config, parse_config
from depthflow.data import MANIFEST_NAME, write_image
from depthflow.main import main
from depthflow.trainer import LEDGER_NAME, TRAIN_LOG_NAME, read_jsonl
from tests.conftest import TINY_ARCH

# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------


def _tiny(output_dir: Path) -> TrainConfig:
    return TrainConfig(
        width=64,
        height=64,
        synth_frames=6,
        synth_sprites=1,
        batch_size=2,
        stage1_steps=2,
        stage2_steps=2,
        stage3_steps=1,
        output_dir=str(output_dir),
        **TINY_ARCH,
    ).validate()


@pytest.fixture()
def config_file(tmp_path: Path) -> Path:
    p = tmp_path / "tiny.cfg"
    p.write_text(format_config(_tiny(tmp_path / "run")), encoding="utf-8")
    return p


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory) -> Path:
    """A run directory holding all three stage checkpoints of the tiny config."""
    root = tmp_path_factory.mktemp("trained")
    cfg = root / "tiny.cfg"
    cfg.write_text(format_config(_tiny(root / "run")), encoding="utf-8")
    assert main(["train", "--stage", "all", "--config", str(cfg), "--quiet"]) == 0
    return root / "run"


@pytest.fixture()
def frame_pair(tmp_path: Path):
    rng = np.random.default_rng(0)
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    write_image(a, rng.random((48, 80, 3)))
    write_image(b, rng.random((48, 80, 3)))
    return a, b


# ---------------------------------------------------------------------------
# Help and version
# ---------------------------------------------------------------------------


class TestCliHelp:
    def test_main_help_lists_commands(self, capsys):
        with pytest.raises(SystemExit) as exc_info:
            main(["--help"])
        assert exc_info.value.code == 0
        out = capsys.readouterr().out
        for command in ("synth-data", "train", "eval-depth", "eval-flow", "infer", "ablate", "param-count", "plot"):
            assert command in out
        assert "Exit codes" in out

    def test_train_help(self, capsys):
        with pytest.raises(SystemExit) as exc_info:
            main(["train", "--help"])
        assert exc_info.value.code == 0
        out = capsys.readouterr().out
        assert "--stage" in out and "--print-config" in out and "--resume" in out

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc_info:
            main(["--version"])
        assert exc_info.value.code == 0
        assert __version__ in capsys.readouterr().out

    def test_missing_command_is_a_usage_error(self):
        with pytest.raises(SystemExit) as exc_info:
            main([])
        assert exc_info.value.code == 2

    def test_unknown_ablation_model_is_a_usage_error(self):
        with pytest.raises(SystemExit) as exc_info:
            main(["ablate", "--model", "VII"])
        assert exc_info.value.code == 2


# ---------------------------------------------------------------------------
# synth-data
# ---------------------------------------------------------------------------


class TestCliSynthData:
    def test_exports_a_sequence(self, tmp_path: Path, capsys):
        out = tmp_path / "desk"
        rc = main(["synth-data", "--out", str(out), "--width", "64", "--height", "64", "--frames", "4",
                   "--sprites", "1"])
        assert rc == 0
        assert (out / MANIFEST_NAME).is_file()
        assert "Manifest" in capsys.readouterr().out

    def test_quiet_prints_nothing(self, tmp_path: Path, capsys):
        rc = main(["synth-data", "--out", str(tmp_path / "d"), "--width", "64", "--height", "64",
                   "--frames", "3", "--sprites", "0", "--quiet"])
        assert rc == 0
        assert capsys.readouterr().out == ""

    def test_too_few_frames_returns_2(self, tmp_path: Path, capsys):
        rc = main(["synth-data", "--out", str(tmp_path / "d"), "--frames", "2"])
        assert rc == 2
        assert capsys.readouterr().err.startswith("Error:")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


class TestCliTrain:
    def test_print_config_round_trips(self, config_file: Path, capsys):
        assert main(["train", "--config", str(config_file), "--print-config"]) == 0
        printed = parse_config(capsys.readouterr().out)
        assert printed == parse_config(config_file.read_text(encoding="utf-8"))

    def test_output_dir_overrides_the_config(self, config_file: Path, tmp_path: Path, capsys):
        other = tmp_path / "elsewhere"
        assert main(["train", "-c", str(config_file), "-o", str(other), "--print-config"]) == 0
        assert parse_config(capsys.readouterr().out).output_dir == str(other)

    def test_stage_one(self, config_file: Path, tmp_path: Path, capsys):
        rc = main(["train", "--stage", "1", "--config", str(config_file), "--quiet"])
        assert rc == 0
        assert (tmp_path / "run" / "stage1.ckpt").is_file()
        assert len(read_jsonl(tmp_path / "run" / TRAIN_LOG_NAME)) == 2
        assert "Stage 1" in capsys.readouterr().out

    def test_stage_two_without_stage_one_returns_3(self, config_file: Path, capsys):
        rc = main(["train", "--stage", "2", "--config", str(config_file), "--quiet"])
        assert rc == 3
        err = capsys.readouterr().err
        assert "Checkpoint not found" in err and "--resume" in err

    def test_malformed_config_returns_2(self, tmp_path: Path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("width = 64\nbogus_key = 1\n", encoding="utf-8")
        assert main(["train", "--config", str(bad)]) == 2
        assert "bad.cfg:2: unknown config key 'bogus_key'" in capsys.readouterr().err

    def test_missing_config_returns_2(self, tmp_path: Path, capsys):
        assert main(["train", "--config", str(tmp_path / "none.cfg")]) == 2
        assert "Config file not found" in capsys.readouterr().err

    def test_missing_data_root_returns_3(self, tmp_path: Path, capsys):
        cfg = tmp_path / "dir.cfg"
        config = dataclasses.replace(_tiny(tmp_path / "run"), dataset="synthetic_dir",
                                     data_root=str(tmp_path / "nodata"))
        cfg.write_text(format_config(config), encoding="utf-8")
        assert main(["train", "--stage", "1", "--config", str(cfg), "--quiet"]) == 3
        assert "Data root not found" in capsys.readouterr().err

    def test_trains_from_an_exported_directory(self, tmp_path: Path):
        data = tmp_path / "desk"
        assert main(["synth-data", "--out", str(data), "--width", "64", "--height", "64", "--frames", "4",
                     "--sprites", "1", "--quiet"]) == 0
        cfg = tmp_path / "dir.cfg"
        config = dataclasses.replace(_tiny(tmp_path / "run"), dataset="synthetic_dir", data_root=str(data))
        cfg.write_text(format_config(config), encoding="utf-8")
        assert main(["train", "--stage", "1", "--config", str(cfg), "--quiet"]) == 0
        assert (tmp_path / "run" / "stage1.ckpt").is_file()

    def test_full_schedule(self, trained_run: Path):
        for stage in (1, 2, 3):
            assert (trained_run / f"stage{stage}.ckpt").is_file()
        stages = [r["stage"] for r in read_jsonl(trained_run / TRAIN_LOG_NAME)]
        assert stages == [1, 1, 2, 2, 3]


# ---------------------------------------------------------------------------
# eval-depth / eval-flow
# ---------------------------------------------------------------------------


class TestCliEval:
    def test_missing_checkpoint_returns_3(self, tmp_path: Path, capsys):
        rc = main(["eval-flow", "--checkpoint", str(tmp_path / "none.ckpt")])
        assert rc == 3
        assert "Checkpoint not found" in capsys.readouterr().err

    def test_default_checkpoint_is_stage_three_of_the_run(self, tmp_path: Path, capsys):
        assert main(["eval-depth", "--output-dir", str(tmp_path / "empty")]) == 3
        assert "stage3.ckpt" in capsys.readouterr().err

    def test_corrupt_checkpoint_returns_2(self, tmp_path: Path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage-bytes-that-are-long-enough")
        assert main(["eval-flow", "--checkpoint", str(bad)]) == 2

    def test_eval_flow(self, trained_run: Path, capsys):
        assert main(["eval-flow", "--checkpoint", str(trained_run / "stage3.ckpt"), "--quiet"]) == 0
        result = json.loads(capsys.readouterr().out)
        assert {"checkpoint", "epe", "epe_noc", "f1", "epe_rigid"} <= set(result)

    def test_eval_depth(self, trained_run: Path, capsys):
        assert main(["eval-depth", "--checkpoint", str(trained_run / "stage3.ckpt"), "--quiet"]) == 0
        result = json.loads(capsys.readouterr().out)
        assert 0.0 <= result["delta1"] <= 1.0 and result["abs_rel"] >= 0.0

    def test_eval_depth_without_median_scaling(self, trained_run: Path, capsys):
        ckpt = str(trained_run / "stage3.ckpt")
        assert main(["eval-depth", "--checkpoint", ckpt, "--no-median-scaling", "--quiet"]) == 0
        assert "abs_rel" in json.loads(capsys.readouterr().out)


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------


class TestCliInfer:
    def test_writes_all_outputs(self, trained_run: Path, frame_pair, tmp_path: Path):
        out = tmp_path / "pred"
        a, b = frame_pair
        assert main(["infer", str(a), str(b), "--checkpoint", str(trained_run / "stage3.ckpt"),
                     "--out", str(out), "--quiet"]) == 0
        for name in ("depth.png", "depth16.png", "flow.png", "flow_color.png"):
            assert (out / name).is_file()
        depth16 = cv2.imread(str(out / "depth16.png"), cv2.IMREAD_UNCHANGED)
        assert depth16.dtype == np.uint16 and depth16.shape == (48, 80)
        assert cv2.imread(str(out / "flow.png"), cv2.IMREAD_UNCHANGED).dtype == np.uint16

    def test_missing_frame_returns_3(self, trained_run: Path, frame_pair, tmp_path: Path):
        a, _ = frame_pair
        rc = main(["infer", str(a), str(tmp_path / "none.png"), "--checkpoint",
                   str(trained_run / "stage3.ckpt"), "--out", str(tmp_path / "pred")])
        assert rc == 3

    def test_frames_of_different_size_return_2(self, trained_run: Path, frame_pair, tmp_path: Path, capsys):
        a, _ = frame_pair
        small = tmp_path / "small.png"
        write_image(small, np.zeros((16, 16, 3)))
        rc = main(["infer", str(a), str(small), "--checkpoint", str(trained_run / "stage3.ckpt"),
                   "--out", str(tmp_path / "pred")])
        assert rc == 2
        assert "differ in size" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# ablate / param-count / plot
# ---------------------------------------------------------------------------


class TestCliAblate:
    def test_appends_to_the_ledger(self, config_file: Path, tmp_path: Path, capsys):
        assert main(["ablate", "--model", "II", "--config", str(config_file), "--quiet"]) == 0
        records = read_jsonl(tmp_path / "run" / LEDGER_NAME)
        assert [r["model_id"] for r in records] == ["II"]
        out = capsys.readouterr().out
        assert "epe" in out and "params" in out


class TestCliParamCount:
    def test_single_model(self, config_file: Path, capsys):
        assert main(["param-count", "--model", "VI", "--config", str(config_file)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].split() == ["model", "params"]
        assert lines[2].split()[0] == "VI"

    def test_all_models_with_fps(self, config_file: Path, capsys):
        assert main(["param-count", "--config", str(config_file), "--fps"]) == 0
        out = capsys.readouterr().out
        assert "fps" in out and "hardware" in out
        assert len(out.strip().splitlines()) == 2 + 6


class TestCliPlot:
    def test_nothing_to_plot_returns_2(self, tmp_path: Path, capsys):
        assert main(["plot", "--out", str(tmp_path)]) == 2
        assert "Nothing to plot" in capsys.readouterr().err

    def test_missing_log_returns_3(self, tmp_path: Path):
        assert main(["plot", "--log", str(tmp_path / "none.jsonl"), "--out", str(tmp_path)]) == 3

    def test_training_curves_and_error_maps(self, trained_run: Path, tmp_path: Path):
        out = tmp_path / "plots"
        rc = main(["plot", "--log", str(trained_run / TRAIN_LOG_NAME), "--checkpoint",
                   str(trained_run / "stage3.ckpt"), "--out", str(out), "--quiet"])
        assert rc == 0
        for name in ("training_curves.png", "loss_components.png", "flow_error.png", "depth_error.png"):
            assert (out / name).is_file()

    def test_ablation_ledger(self, tmp_path: Path):
        ledger = tmp_path / LEDGER_NAME
        ledger.write_text(
            json.dumps({"model_id": "I", "flow": {"epe": 2.0}, "depth": {"abs_rel": 0.2}}) + "\n"
            + json.dumps({"model_id": "VI", "flow": {"epe": 1.0}, "depth": {"abs_rel": 0.1}}) + "\n",
            encoding="utf-8",
        )
        assert main(["plot", "--ledger", str(ledger), "--out", str(tmp_path / "p"), "--quiet"]) == 0
        assert (tmp_path / "p" / "ablation_epe.png").is_file()
        assert (tmp_path / "p" / "ablation_abs_rel.png").is_file()
