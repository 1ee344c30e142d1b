"""
Staged training, EMA teacher updates, ablation runs and evaluation loops.

Training runs in three stages, each starting from the previous stage's
checkpoint:

1. encoder + depth decoder + pose network, depth loss only;
2. adds the flow decoder with D2F and dual-head masks, depth + flow loss,
   the EMA teacher is cloned from the student at the stage start;
3. adds the F2D blocks.

Every step appends one JSON line to ``<output_dir>/train_log.jsonl`` and
every stage writes ``<output_dir>/stage<n>.ckpt``.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from depthflow.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from depthflow.config import TrainConfig, config_from_dict, config_hash, config_to_dict
from depthflow.data import (
    SequenceDataset,
    SequenceSample,
    desk_scene,
    load_synthetic_dir,
    make_loader,
    render_sequence,
)
from depthflow.evalmetrics import (
    average_metrics,
    count_parameters,
    depth_metrics,
    flow_metrics,
    region_epe,
)
from depthflow.kitti import FlowPair, load_kitti_eigen, load_kitti_flow_2015
from depthflow.losses import LossReport, depth_loss, flow_loss
from depthflow.model import JointOutput, MultiTaskNet, flags_for_model

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

TRAIN_LOG_NAME = "train_log.jsonl"
LEDGER_NAME = "results.jsonl"
STAGES = (1, 2, 3)


def stage_checkpoint_path(output_dir: Path, stage: int) -> Path:
    return Path(output_dir) / f"stage{stage}.ckpt"


# ---------------------------------------------------------------------------
# Optional progress bar (tqdm).  Falls back to plain prints if not installed.
# ---------------------------------------------------------------------------

try:
    from tqdm import tqdm as _tqdm  # type: ignore[import-untyped]

    def _make_progress_cb(description: str, total: int, enabled: bool = True):
        bar = _tqdm(total=total, desc=description, unit="step", dynamic_ncols=True, disable=not enabled)

        def _cb(done: int, loss: float) -> None:
            bar.update(1)
            bar.set_postfix(loss=f"{loss:.4f}", refresh=False)
            if done >= total:
                bar.close()

        return _cb

except ImportError:  # pragma: no cover

    def _make_progress_cb(description: str, total: int, enabled: bool = True):
        def _cb(done: int, loss: float) -> None:
            if not enabled:
                return
            print(f"\r{description}: {done}/{total} loss {loss:.4f}", end="", flush=True)
            if done >= total:
                print()

        return _cb


# ---------------------------------------------------------------------------
# EMA teacher
# ---------------------------------------------------------------------------


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, decay: float) -> None:
    """``θ_T ← decay·θ_T + (1 − decay)·θ_S`` for every parameter, in place.

    Raises
    ------
    ValueError
        When *decay* is outside ``[0, 1]`` or the two modules do not have the
        same parameter names and shapes.
    """
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1], got {decay}.")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        missing = sorted(set(s_params) ^ set(t_params))
        raise ValueError(
            "Teacher and student parameter registries differ:\n"
            f"  mismatched names : {missing[:5]}{' ...' if len(missing) > 5 else ''}"
        )
    for name, t_param in t_params.items():
        s_param = s_params[name]
        if t_param.shape != s_param.shape:
            raise ValueError(
                f"Parameter '{name}' differs in shape: teacher {tuple(t_param.shape)}, "
                f"student {tuple(s_param.shape)}."
            )
        t_param.mul_(decay).add_(s_param.detach(), alpha=1.0 - decay)


# ---------------------------------------------------------------------------
# Data and model construction
# ---------------------------------------------------------------------------


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def build_samples(config: TrainConfig, split: str = "train") -> List[SequenceSample]:
    """Training (``split="train"``) or validation (``"val"``) triplets for *config*.

    Raises
    ------
    FileNotFoundError
        When a configured data root does not exist.
    """
    if split not in ("train", "val", "test"):
        raise ValueError(f"split must be train, val or test, got '{split}'.")
    if config.dataset == "synthetic":
        seed = config.seed if split == "train" else config.seed + config.synth_val_seed_offset
        spec = desk_scene(
            width=config.width,
            height=config.height,
            num_frames=config.synth_frames,
            seed=seed,
            num_sprites=config.synth_sprites,
            translation=tuple(config.synth_translation),
        )
        return list(render_sequence(spec).samples())

    root = Path(config.data_root)
    if not config.data_root or not root.is_dir():
        raise FileNotFoundError(f"Data root not found: '{config.data_root}'")
    if config.dataset == "synthetic_dir":
        return list(load_synthetic_dir(root))
    return list(
        load_kitti_eigen(
            root,
            split,
            config.width,
            config.height,
            split_file=Path(config.split_file) if config.split_file else None,
            static_threshold=config.static_threshold if split == "train" and config.static_threshold > 0 else None,
        )
    )


def build_model(config: TrainConfig) -> MultiTaskNet:
    return MultiTaskNet.from_config(config).to(config.device)


def model_from_checkpoint(checkpoint: Checkpoint, device: Optional[str] = None) -> Tuple[MultiTaskNet, TrainConfig]:
    """Rebuild the network stored in *checkpoint* and load its weights."""
    config = config_from_dict(checkpoint.config)
    if device is not None:
        config = replace(config, device=device)
    model = build_model(config)
    model.load_state_dict(checkpoint.model_state)
    return model, config


# ---------------------------------------------------------------------------
# Loss of one batch
# ---------------------------------------------------------------------------


def compute_losses(
    model: MultiTaskNet, batch: Dict[str, torch.Tensor], stage: int, config: TrainConfig
) -> Tuple[LossReport, JointOutput]:
    """Depth loss (all stages) plus weighted flow loss (stages 2 and 3)."""
    frames = batch["frames"].to(config.device)
    k = batch["K"].to(config.device)
    prev_frame, frame_t, next_frame = frames[:, 0], frames[:, 1], frames[:, 2]

    output = model(frame_t, next_frame, stage=stage)
    poses = (model.estimate_pose(frame_t, prev_frame), model.estimate_pose(frame_t, next_frame))
    report = depth_loss(
        (prev_frame, frame_t, next_frame),
        output.depth.disparities,
        poses,
        k,
        disparity_smoothness=config.disparity_smoothness,
        min_depth=config.min_depth,
        max_depth=config.max_depth,
        automask=config.automask,
        use_ssim=config.use_ssim,
    )
    if stage >= 2:
        flow = flow_loss(
            frame_t,
            next_frame,
            output.flow,
            scale_weights=config.flow_scale_weights,
            flow_smoothness=config.flow_smoothness,
            border=config.flow_border,
            use_ssim=config.use_ssim,
        )
        w = config.flow_loss_weight
        report = report + LossReport(w * flow.total, {k_: w * v for k_, v in flow.components.items()})
    return report, output


# ---------------------------------------------------------------------------
# Stage training
# ---------------------------------------------------------------------------


def _append_jsonl(path: Path, record: Dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path: Path) -> List[Dict[str, Any]]:
    """Records of a line-delimited JSON file (training log or results ledger).

    Raises
    ------
    FileNotFoundError
        When *path* does not exist.
    ValueError
        When a line is not valid JSON, naming the line number.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Record file not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: malformed record ({exc.msg}).") from None
    return records


def _global_offset(history: Sequence[Dict[str, Any]], stage: int) -> int:
    return sum(h["steps"] for h in history if h["stage"] < stage)


def _check_prerequisite(stage: int, resume: Optional[Checkpoint]) -> None:
    if stage not in STAGES:
        raise ValueError(f"Training stage must be 1, 2 or 3, got {stage}.")
    if stage == 1:
        if resume is not None and resume.stage != 1:
            raise ValueError(f"Stage 1 can only resume a stage 1 checkpoint, got stage {resume.stage}.")
        return
    if resume is None:
        raise ValueError(f"Stage {stage} needs the stage {stage - 1} checkpoint; none was given.")
    if resume.stage not in (stage - 1, stage):
        raise ValueError(
            f"Stage {stage} needs a stage {stage - 1} checkpoint (or a stage {stage} one to "
            f"resume), got a stage {resume.stage} checkpoint."
        )


def train_stage(
    stage: int,
    config: TrainConfig,
    resume: Optional[Checkpoint] = None,
    samples: Optional[Sequence[SequenceSample]] = None,
    progress: bool = True,
) -> Checkpoint:
    """Train *stage* and write its checkpoint to ``config.output_dir``.

    Parameters
    ----------
    stage:
        1, 2 or 3.
    config:
        Run configuration; ``stage<n>_steps`` overrides the epoch count.
    resume:
        The previous stage's checkpoint (required for stages 2 and 3), or a
        checkpoint of the same stage to continue from its step counter.
    samples:
        Training triplets; built from *config* when omitted.
    progress:
        Show a progress bar.

    Raises
    ------
    ValueError
        When the prerequisite checkpoint is missing or of the wrong stage.
    """
    _check_prerequisite(stage, resume)
    output_dir = Path(config.output_dir)
    seed_everything(config.seed + 7919 * stage)

    model = build_model(config)
    history: List[Dict[str, Any]] = []
    start_step = 0
    continuing = resume is not None and resume.stage == stage
    if resume is not None:
        model.load_state_dict(resume.model_state)
        history = [h for h in resume.history if h["stage"] < stage]
        if continuing:
            start_step = resume.step
    if stage == 2 and not continuing:
        model.reset_teacher()

    params = list(model.trainable_parameters(stage, freeze_depth=config.freeze_depth_in_stage2))
    optimizer = torch.optim.Adam(
        params,
        lr=config.stage_lr(stage),
        betas=(config.adam_beta1, config.adam_beta2),
        weight_decay=config.weight_decay,
    )
    if continuing and resume.optimizer_state is not None:
        optimizer.load_state_dict(resume.optimizer_state)

    dataset = SequenceDataset(samples if samples is not None else build_samples(config, "train"),
                              config.width, config.height)
    batches_per_epoch = len(make_loader(dataset, config.batch_size, seed=0))
    total_steps = config.stage_steps(stage) or config.stage_epochs(stage) * batches_per_epoch
    offset = _global_offset(history, stage)
    log_path = output_dir / TRAIN_LOG_NAME

    logger.info(
        "Stage %d: %d steps, lr %g, %d trainable tensors", stage, total_steps, config.stage_lr(stage), len(params)
    )
    progress_cb = _make_progress_cb(f"stage {stage}", max(total_steps - start_step, 0), progress)

    step = start_step
    first_loss: Optional[float] = None
    last_loss: Optional[float] = None
    model.train()
    while step < total_steps:
        epoch = step // batches_per_epoch
        skip = step % batches_per_epoch
        loader = make_loader(
            dataset, config.batch_size, seed=config.seed * 1000 + 100 * stage + epoch, num_workers=config.num_workers
        )
        for index, batch in enumerate(loader):
            if index < skip:
                continue
            if step >= total_steps:
                break
            optimizer.zero_grad()
            report, _ = compute_losses(model, batch, stage, config)
            report.total.backward()
            optimizer.step()
            if stage >= 2 and model.flow_teacher is not None:
                ema_update(model.flow_teacher, model.flow_decoder, config.ema_decay)

            step += 1
            losses = report.as_floats()
            first_loss = losses["total"] if first_loss is None else first_loss
            last_loss = losses["total"]
            _append_jsonl(
                log_path,
                {"stage": stage, "epoch": epoch, "step": step, "global_step": offset + step, **losses},
            )
            if config.log_every and step % config.log_every == 0:
                logger.debug("stage %d step %d: %s", stage, step, losses)
            progress_cb(step - start_step, last_loss)

    history.append(
        {
            "stage": stage,
            "steps": step,
            "first_loss": first_loss,
            "last_loss": last_loss,
        }
    )
    checkpoint = Checkpoint(
        config=config_to_dict(config),
        model_state=model.state_dict(),
        stage=stage,
        step=step,
        epoch=step // batches_per_epoch,
        optimizer_state=optimizer.state_dict(),
        history=history,
    )
    save_checkpoint(checkpoint, stage_checkpoint_path(output_dir, stage))
    logger.info("Stage %d finished after %d steps (loss %s)", stage, step, last_loss)
    return checkpoint


def train(
    config: TrainConfig,
    stages: Sequence[int] = STAGES,
    resume: Optional[Checkpoint] = None,
    samples: Optional[Sequence[SequenceSample]] = None,
    progress: bool = True,
) -> Checkpoint:
    """Run *stages* in order, chaining each stage's checkpoint into the next."""
    if samples is None:
        samples = build_samples(config, "train")
    checkpoint = resume
    for stage in stages:
        checkpoint = train_stage(stage, config, resume=checkpoint, samples=samples, progress=progress)
    return checkpoint


def resolve_resume(config: TrainConfig, stage: int, resume_path: Optional[Path]) -> Optional[Checkpoint]:
    """The checkpoint *stage* starts from: *resume_path*, else ``stage<n-1>.ckpt``.

    Raises
    ------
    FileNotFoundError
        When the needed checkpoint file is missing.
    """
    if resume_path is not None:
        return load_checkpoint(resume_path)
    if stage == 1:
        return None
    return load_checkpoint(stage_checkpoint_path(Path(config.output_dir), stage - 1))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def frame_tensor(image: np.ndarray, width: int, height: int, device: str) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()[None]
    if t.shape[-2:] != (height, width):
        t = F.interpolate(t, (height, width), mode="area")
    return t.to(device)


FlowCase = Union[SequenceSample, FlowPair]


def _flow_fields(case: FlowCase):
    if isinstance(case, FlowPair):
        return case.frame_t, case.frame_s, case.gt_flow, case.valid, case.noc, None
    if case.gt_flow is None:
        raise ValueError(f"Sample '{case.name}' has no flow ground truth.")
    return case.frames[1], case.frames[2], case.gt_flow, case.flow_valid, case.flow_noc, case.rigid_mask


def resize_flow(flow: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Bilinearly resize a ``[B, 2, h, w]`` flow and rescale its vectors."""
    h, w = flow.shape[-2:]
    if (h, w) == (height, width):
        return flow
    out = F.interpolate(flow, (height, width), mode="bilinear", align_corners=False)
    scale = torch.tensor([width / w, height / h], dtype=flow.dtype, device=flow.device).view(1, 2, 1, 1)
    return out * scale


def evaluate_depth(
    model: MultiTaskNet,
    samples: Iterator[SequenceSample],
    width: int,
    height: int,
    median_scale: bool = True,
    garg_crop: bool = False,
    device: str = "cpu",
) -> Dict[str, float]:
    """Average depth metrics of frame t over *samples*.

    Predictions are resized to each ground-truth map's resolution.

    Raises
    ------
    ValueError
        When no sample carries depth ground truth.
    """
    model.eval()
    records = []
    for sample in samples:
        if sample.gt_depth is None:
            continue
        frame_t = frame_tensor(sample.frames[1], width, height, device)
        frame_s = frame_tensor(sample.frames[2], width, height, device)
        pred = model.predict(frame_t, frame_s).depth
        gt = np.where(np.isfinite(sample.gt_depth), sample.gt_depth, 0.0)
        pred = F.interpolate(pred, gt.shape, mode="bilinear", align_corners=False)[0, 0].cpu().numpy()
        records.append(depth_metrics(pred, gt, median_scale=median_scale, garg_crop=garg_crop))
    if not records:
        raise ValueError("evaluate_depth: no sample has depth ground truth.")
    return average_metrics(records)


def evaluate_flow(
    model: MultiTaskNet,
    cases: Iterator[FlowCase],
    width: int,
    height: int,
    device: str = "cpu",
) -> Dict[str, float]:
    """Average EPE, EPE-noc and F1 (plus rigid-region EPE when known) over *cases*.

    Raises
    ------
    ValueError
        When *cases* is empty.
    """
    model.eval()
    records = []
    rigid = []
    for case in cases:
        frame_t, frame_s, gt, valid, noc, rigid_mask = _flow_fields(case)
        pred = model.predict(
            frame_tensor(frame_t, width, height, device), frame_tensor(frame_s, width, height, device)
        ).flow
        pred = resize_flow(pred, *gt.shape[:2])[0].permute(1, 2, 0).cpu().numpy()
        records.append(flow_metrics(pred, gt, valid, noc))
        if rigid_mask is not None and (np.asarray(rigid_mask, bool) & np.asarray(valid, bool)).any():
            rigid.append(region_epe(pred, gt, np.asarray(rigid_mask, bool) & np.asarray(valid, bool)))
    if not records:
        raise ValueError("evaluate_flow: nothing to evaluate.")
    result = average_metrics(records)
    if rigid:
        result["epe_rigid"] = float(np.mean(rigid))
    return result


def flow_cases(config: TrainConfig, split: str = "val") -> List[FlowCase]:
    """Flow evaluation cases for *config*: KITTI 2015 pairs or synthetic triplets."""
    if config.dataset == "kitti":
        root = Path(config.kitti_flow_root)
        if not config.kitti_flow_root or not root.is_dir():
            raise FileNotFoundError(f"KITTI 2015 flow root not found: '{config.kitti_flow_root}'")
        return list(load_kitti_flow_2015(root))
    return build_samples(config, split)


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------


def run_ablation(
    model_id: str,
    config: TrainConfig,
    ledger_path: Optional[Path] = None,
    progress: bool = True,
    train_fn: Callable[..., Checkpoint] = train,
) -> Dict[str, Any]:
    """Train ablation model *model_id* (I..VI) through all stages and evaluate it.

    The record (model id, seed, base config hash, flags, parameter count,
    depth and flow metrics) is appended to the results ledger, which defaults
    to ``<output_dir>/results.jsonl``.

    Raises
    ------
    ValueError
        When *model_id* is not one of I..VI.
    """
    flags = flags_for_model(model_id)
    run_config = replace(
        config.with_flags(flags),
        output_dir=str(Path(config.output_dir) / "ablation" / model_id / f"seed{config.seed}"),
    )
    logger.info("Ablation model %s, seed %d: %s", model_id, config.seed, flags.to_dict())
    checkpoint = train_fn(run_config, progress=progress)
    model, _ = model_from_checkpoint(checkpoint)

    val = build_samples(run_config, "val")
    record = {
        "model_id": model_id,
        "seed": config.seed,
        "config_hash": config_hash(config),
        "flags": flags.to_dict(),
        "params": count_parameters(model),
        "depth": evaluate_depth(model, val, run_config.width, run_config.height, device=run_config.device),
        "flow": evaluate_flow(model, val, run_config.width, run_config.height, device=run_config.device),
    }
    _append_jsonl(Path(ledger_path) if ledger_path else Path(config.output_dir) / LEDGER_NAME, record)
    return record
