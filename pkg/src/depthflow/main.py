"""
Command-line interface for depthflow.

Entry point: ``depthflow`` (defined in pyproject.toml console_scripts).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import textwrap
from pathlib import Path
from typing import List, Optional

from depthflow import __version__
from depthflow.config import TrainConfig, format_config, load_config
from depthflow.model import ABLATION_MODELS

# ---------------------------------------------------------------------------
# Exit codes
# ---------------------------------------------------------------------------

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING = 3


def _error(message: str) -> None:
    print(f"Error: {message}", file=sys.stderr)


# ---------------------------------------------------------------------------
# CLI helpers
# ---------------------------------------------------------------------------


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--verbose",
        "-v",
        action="store_true",
        default=False,
        help="Log debug messages.",
    )
    common.add_argument(
        "--quiet",
        "-q",
        action="store_true",
        default=False,
        help="Suppress progress bars and informational messages.",
    )
    return common


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config",
        "-c",
        metavar="PATH",
        default=None,
        help="Flat 'key = value' config file (defaults apply when omitted).",
    )
    parser.add_argument(
        "--output-dir",
        "-o",
        metavar="DIR",
        default=None,
        help="Run directory for checkpoints, logs and the results ledger (overrides the config).",
    )


def _build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="depthflow",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description=textwrap.dedent(
            """\
            depthflow — Self-supervised joint depth and optical-flow training.

            Common workflows
            ────────────────
              Export a synthetic sequence with exact ground truth:
                  depthflow synth-data --out data/desk

              Train all three stages on the desk-scale config:
                  depthflow train --stage all --config configs/desk.cfg

              Evaluate the final checkpoint:
                  depthflow eval-flow --checkpoint runs/stage3.ckpt
                  depthflow eval-depth --checkpoint runs/stage3.ckpt

              Run ablation model V and append it to the results ledger:
                  depthflow ablate --model V --config configs/desk.cfg
            """
        ),
        epilog=textwrap.dedent(
            """\
            Ablation models
            ───────────────
              I    separate encoders, no exchange
              II   shared encoder + D2F
              III  II + F2D
              IV   III + EMA teacher
              V    II + dual-head masks
              VI   IV + dual-head masks

            Exit codes
            ──────────
              0   success
              1   run-time failure
              2   configuration/argument error
              3   missing required artifact (checkpoint, dataset, split file)
            """
        ),
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"%(prog)s {__version__}",
    )

    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    subparsers.required = True

    # ---- synth-data ---------------------------------------------------------
    synth = subparsers.add_parser(
        "synth-data",
        parents=[common],
        help="Render and export a synthetic sequence with ground truth.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description=textwrap.dedent(
            """\
            Render a translating camera over a textured plane with moving
            sprites and export frames, depth, flow (KITTI 16-bit PNG), rigid
            masks and a manifest to OUT.

            Examples
            ────────
              Default 256x128, 50 frames, 2 sprites:
                  depthflow synth-data --out data/desk

              A different scene:
                  depthflow synth-data --out data/desk7 --seed 7 --sprites 3
            """
        ),
    )
    synth.add_argument("--out", required=True, metavar="DIR", help="Output directory.")
    synth.add_argument("--width", type=int, default=256, help="Image width (default: 256).")
    synth.add_argument("--height", type=int, default=128, help="Image height (default: 128).")
    synth.add_argument("--frames", type=int, default=50, help="Number of frames (default: 50).")
    synth.add_argument("--sprites", type=int, default=2, help="Number of moving sprites (default: 2).")
    synth.add_argument("--seed", type=int, default=0, help="Scene seed (default: 0).")

    # ---- train --------------------------------------------------------------
    train = subparsers.add_parser(
        "train",
        parents=[common],
        help="Train one stage or the full three-stage schedule.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description=textwrap.dedent(
            """\
            Train stage 1 (depth + pose), stage 2 (+ flow, D2F, dual-head,
            EMA teacher) or stage 3 (+ F2D).  Stages 2 and 3 start from the
            previous stage's checkpoint in the run directory unless --resume
            names one.

            Examples
            ────────
              Stage 1 only:
                  depthflow train --stage 1 --config configs/desk.cfg

              Everything, then show the effective config:
                  depthflow train --stage all --config configs/desk.cfg
                  depthflow train --config configs/desk.cfg --print-config
            """
        ),
    )
    train.add_argument(
        "--stage",
        choices=["1", "2", "3", "all"],
        default="all",
        help="Stage to train (default: all).",
    )
    _add_config_args(train)
    train.add_argument("--resume", metavar="PATH", default=None, help="Checkpoint to start from.")
    train.add_argument(
        "--print-config",
        action="store_true",
        default=False,
        help="Print the effective config in the flat format and exit.",
    )

    # ---- eval-depth / eval-flow ---------------------------------------------
    for name, what in (("eval-depth", "depth"), ("eval-flow", "optical flow")):
        ev = subparsers.add_parser(
            name,
            parents=[common],
            help=f"Evaluate {what} of a trained checkpoint.",
            formatter_class=argparse.RawDescriptionHelpFormatter,
            description=textwrap.dedent(
                f"""\
                Evaluate the {what} predictions of CHECKPOINT on the validation
                data of the config (the checkpoint's own config when --config is
                omitted).  Prints the averaged metrics as JSON.

                Example
                ───────
                    depthflow {name} --checkpoint runs/stage3.ckpt
                """
            ),
        )
        ev.add_argument(
            "--checkpoint",
            metavar="PATH",
            default=None,
            help="Checkpoint to evaluate (default: <output-dir>/stage3.ckpt).",
        )
        _add_config_args(ev)
        ev.add_argument(
            "--split",
            choices=["val", "test"],
            default="val",
            help="Split to evaluate (default: val).",
        )
    subparsers.choices["eval-depth"].add_argument(
        "--no-median-scaling",
        action="store_true",
        default=False,
        help="Evaluate raw depths without per-image median scaling.",
    )

    # ---- infer --------------------------------------------------------------
    infer = subparsers.add_parser(
        "infer",
        parents=[common],
        help="Predict depth and flow for one frame pair.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description=textwrap.dedent(
            """\
            Predict depth of FRAME_T and flow from FRAME_T to FRAME_S.
            Writes depth.png (coloured disparity), depth16.png (16-bit depth
            in 1/256 m), flow.png (KITTI 16-bit flow) and flow_color.png
            (colour wheel) to OUT.

            Example
            ───────
                depthflow infer --checkpoint runs/stage3.ckpt a.png b.png --out pred/
            """
        ),
    )
    infer.add_argument("frame_t", metavar="FRAME_T", help="Reference frame.")
    infer.add_argument("frame_s", metavar="FRAME_S", help="Next frame.")
    infer.add_argument("--checkpoint", required=True, metavar="PATH", help="Trained checkpoint.")
    infer.add_argument("--out", required=True, metavar="DIR", help="Output directory.")

    # ---- ablate -------------------------------------------------------------
    ablate = subparsers.add_parser(
        "ablate",
        parents=[common],
        help="Train and evaluate one ablation model.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description=textwrap.dedent(
            """\
            Train ablation model ID through all stages for every --seed,
            evaluate it on the validation data and append one record per seed
            to <output-dir>/results.jsonl.

            Example
            ───────
                depthflow ablate --model VI --config configs/desk.cfg --seed 0 1 2
            """
        ),
    )
    ablate.add_argument("--model", required=True, choices=list(ABLATION_MODELS), help="Ablation model.")
    _add_config_args(ablate)
    ablate.add_argument(
        "--seed", type=int, nargs="+", default=None, help="Seeds to run (default: the config's seed)."
    )

    # ---- param-count --------------------------------------------------------
    params = subparsers.add_parser(
        "param-count",
        parents=[common],
        help="Print parameter counts (and optionally FPS) of the ablation models.",
    )
    params.add_argument("--model", choices=list(ABLATION_MODELS), default=None, help="Only this model.")
    _add_config_args(params)
    params.add_argument("--fps", action="store_true", default=False, help="Also measure inference FPS.")

    # ---- plot ---------------------------------------------------------------
    plot = subparsers.add_parser(
        "plot",
        parents=[common],
        help="Plot training curves, ablation results or error maps.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description=textwrap.dedent(
            """\
            Render PNG plots into OUT:
              --log       training curves from a train_log.jsonl
              --ledger    ablation bars (mean ± std over seeds) from results.jsonl
              --checkpoint  flow EPE and depth abs-rel error maps on the first
                            validation sample of the checkpoint's config

            Example
            ───────
                depthflow plot --log runs/train_log.jsonl --out plots/
            """
        ),
    )
    plot.add_argument("--log", metavar="PATH", default=None, help="Training log (JSONL).")
    plot.add_argument("--ledger", metavar="PATH", default=None, help="Results ledger (JSONL).")
    plot.add_argument("--checkpoint", metavar="PATH", default=None, help="Checkpoint for error maps.")
    plot.add_argument("--out", required=True, metavar="DIR", help="Output directory.")

    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


def _load_config(args: argparse.Namespace) -> TrainConfig:
    """Config from ``--config`` with ``--output-dir`` applied.  Raises like :func:`load_config`."""
    config = load_config(Path(args.config) if args.config else None)
    if getattr(args, "output_dir", None):
        config = dataclasses.replace(config, output_dir=args.output_dir)
    return config


# ---------------------------------------------------------------------------
# Command handlers
# ---------------------------------------------------------------------------


def _cmd_synth_data(args: argparse.Namespace) -> int:
    from depthflow.data import desk_scene, export_synthetic, render_sequence

    try:
        spec = desk_scene(
            width=args.width,
            height=args.height,
            num_frames=args.frames,
            seed=args.seed,
            num_sprites=args.sprites,
        )
        spec.validate()
    except ValueError as exc:
        _error(str(exc))
        return EXIT_USAGE

    try:
        manifest = export_synthetic(render_sequence(spec), Path(args.out))
    except OSError as exc:
        _error(str(exc))
        return EXIT_FAILURE

    if not args.quiet:
        print(
            f"  Frames     : {args.frames}  ({args.width}x{args.height})\n"
            f"  Sprites    : {args.sprites}\n"
            f"  Manifest   : {manifest}"
        )
    return EXIT_OK


def _cmd_train(args: argparse.Namespace) -> int:
    try:
        config = _load_config(args)
    except (ValueError, FileNotFoundError) as exc:
        _error(str(exc))
        return EXIT_USAGE

    if args.print_config:
        print(format_config(config), end="")
        return EXIT_OK

    from depthflow.trainer import build_samples, resolve_resume, stage_checkpoint_path, train_stage

    stages = [1, 2, 3] if args.stage == "all" else [int(args.stage)]
    try:
        checkpoint = resolve_resume(config, stages[0], Path(args.resume) if args.resume else None)
        samples = build_samples(config, "train")
    except FileNotFoundError as exc:
        _error(f"{exc}\nTrain the previous stage first or pass --resume PATH.")
        return EXIT_MISSING
    except ValueError as exc:
        _error(str(exc))
        return EXIT_USAGE

    try:
        for stage in stages:
            checkpoint = train_stage(stage, config, resume=checkpoint, samples=samples, progress=not args.quiet)
            print(f"  Stage {stage}    : {stage_checkpoint_path(Path(config.output_dir), stage)}")
    except ValueError as exc:
        _error(str(exc))
        return EXIT_USAGE
    except (RuntimeError, OSError) as exc:
        _error(str(exc))
        return EXIT_FAILURE
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    from depthflow.checkpoint import load_checkpoint
    from depthflow.trainer import (
        build_samples,
        evaluate_depth,
        evaluate_flow,
        flow_cases,
        model_from_checkpoint,
        stage_checkpoint_path,
    )

    try:
        override = _load_config(args) if args.config else None
    except (ValueError, FileNotFoundError) as exc:
        _error(str(exc))
        return EXIT_USAGE

    if args.checkpoint:
        ckpt_path = Path(args.checkpoint)
    else:
        run_dir = Path(args.output_dir or (override.output_dir if override else TrainConfig().output_dir))
        ckpt_path = stage_checkpoint_path(run_dir, 3)
    try:
        checkpoint = load_checkpoint(ckpt_path)
    except FileNotFoundError:
        _error(
            f"Checkpoint not found: '{ckpt_path}'\n"
            "Train a model first (depthflow train) or pass --checkpoint PATH."
        )
        return EXIT_MISSING
    except ValueError as exc:
        _error(str(exc))
        return EXIT_USAGE

    model, config = model_from_checkpoint(checkpoint)
    if override is not None:
        config = dataclasses.replace(
            override, width=config.width, height=config.height, device=config.device
        )

    try:
        if args.command == "eval-depth":
            metrics = evaluate_depth(
                model,
                build_samples(config, args.split),
                config.width,
                config.height,
                median_scale=not args.no_median_scaling,
                garg_crop=config.dataset == "kitti",
                device=config.device,
            )
        else:
            metrics = evaluate_flow(model, flow_cases(config, args.split), config.width, config.height,
                                    device=config.device)
    except FileNotFoundError as exc:
        _error(str(exc))
        return EXIT_MISSING
    except ValueError as exc:
        _error(str(exc))
        return EXIT_FAILURE

    print(json.dumps({"checkpoint": str(ckpt_path), **metrics}, indent=2))
    return EXIT_OK


def _cmd_infer(args: argparse.Namespace) -> int:
    import cv2
    import numpy as np
    import torch.nn.functional as F

    from depthflow.checkpoint import load_checkpoint
    from depthflow.data import read_image
    from depthflow.kitti import write_flow_png
    from depthflow.trainer import frame_tensor, model_from_checkpoint, resize_flow
    from depthflow.visualize import colorize_disparity, flow_to_color, save_png

    try:
        checkpoint = load_checkpoint(Path(args.checkpoint))
        frame_t = read_image(Path(args.frame_t))
        frame_s = read_image(Path(args.frame_s))
    except FileNotFoundError as exc:
        _error(str(exc))
        return EXIT_MISSING
    except ValueError as exc:
        _error(str(exc))
        return EXIT_USAGE
    if frame_t.shape != frame_s.shape:
        _error(f"Frames differ in size: {frame_t.shape[:2]} vs {frame_s.shape[:2]}.")
        return EXIT_USAGE

    model, config = model_from_checkpoint(checkpoint)
    model.eval()
    height, width = frame_t.shape[:2]
    pred = model.predict(
        frame_tensor(frame_t, config.width, config.height, config.device),
        frame_tensor(frame_s, config.width, config.height, config.device),
    )
    disparity = F.interpolate(pred.disparity, (height, width), mode="bilinear", align_corners=False)
    depth = F.interpolate(pred.depth, (height, width), mode="bilinear", align_corners=False)
    flow = resize_flow(pred.flow, height, width)[0].permute(1, 2, 0).cpu().numpy()

    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_png(out_dir / "depth.png", colorize_disparity(disparity[0, 0].cpu().numpy()))
        depth16 = np.clip(depth[0, 0].cpu().numpy() * 256.0, 0, 65535).astype(np.uint16)
        cv2.imwrite(str(out_dir / "depth16.png"), depth16)
        write_flow_png(out_dir / "flow.png", flow)
        save_png(out_dir / "flow_color.png", flow_to_color(flow))
    except OSError as exc:
        _error(str(exc))
        return EXIT_FAILURE

    if not args.quiet:
        for name in ("depth.png", "depth16.png", "flow.png", "flow_color.png"):
            print(f"  {out_dir / name}")
    return EXIT_OK


def _cmd_ablate(args: argparse.Namespace) -> int:
    from depthflow.evalmetrics import format_table
    from depthflow.trainer import run_ablation

    try:
        config = _load_config(args)
    except (ValueError, FileNotFoundError) as exc:
        _error(str(exc))
        return EXIT_USAGE

    rows = []
    for seed in args.seed if args.seed is not None else [config.seed]:
        try:
            record = run_ablation(args.model, dataclasses.replace(config, seed=seed), progress=not args.quiet)
        except FileNotFoundError as exc:
            _error(str(exc))
            return EXIT_MISSING
        except ValueError as exc:
            _error(str(exc))
            return EXIT_USAGE
        except (RuntimeError, OSError) as exc:
            _error(str(exc))
            return EXIT_FAILURE
        rows.append({"model": args.model, "seed": seed, "params": record["params"], **record["flow"],
                     "abs_rel": record["depth"]["abs_rel"]})

    print(format_table(rows))
    return EXIT_OK


def _cmd_param_count(args: argparse.Namespace) -> int:
    from depthflow.evalmetrics import count_parameters, format_table, measure_fps
    from depthflow.model import MultiTaskNet, flags_for_model

    try:
        config = _load_config(args)
    except (ValueError, FileNotFoundError) as exc:
        _error(str(exc))
        return EXIT_USAGE

    rows = []
    for model_id in [args.model] if args.model else list(ABLATION_MODELS):
        model = MultiTaskNet.from_config(config, flags_for_model(model_id)).to(config.device)
        row = {"model": model_id, "params": count_parameters(model)}
        if args.fps:
            fps = measure_fps(model, config.width, config.height)
            row.update({"fps": fps.fps, "latency_ms": fps.latency_ms, "hardware": fps.hardware})
        rows.append(row)
    print(format_table(rows))
    return EXIT_OK


def _cmd_plot(args: argparse.Namespace) -> int:
    from depthflow.trainer import read_jsonl
    from depthflow.visualize import plot_ablation, plot_training_curves

    if not (args.log or args.ledger or args.checkpoint):
        _error("Nothing to plot: give --log, --ledger and/or --checkpoint.")
        return EXIT_USAGE

    out_dir = Path(args.out)
    written: List[Path] = []
    try:
        if args.log:
            records = read_jsonl(Path(args.log))
            keys = ["total"] + sorted({k for r in records for k in r if "/" in k})
            written.append(plot_training_curves(records, out_dir / "training_curves.png"))
            written.append(plot_training_curves(records, out_dir / "loss_components.png", keys=keys))
        if args.ledger:
            records = read_jsonl(Path(args.ledger))
            written.append(plot_ablation(records, out_dir / "ablation_epe.png", metric="epe"))
            written.append(plot_ablation(records, out_dir / "ablation_abs_rel.png", metric="abs_rel"))
        if args.checkpoint:
            written.extend(_plot_error_maps(Path(args.checkpoint), out_dir))
    except FileNotFoundError as exc:
        _error(str(exc))
        return EXIT_MISSING
    except ValueError as exc:
        _error(str(exc))
        return EXIT_FAILURE

    if not args.quiet:
        for path in written:
            print(f"  {path}")
    return EXIT_OK


def _plot_error_maps(ckpt_path: Path, out_dir: Path) -> List[Path]:
    import numpy as np
    import torch.nn.functional as F

    from depthflow.checkpoint import load_checkpoint
    from depthflow.trainer import build_samples, frame_tensor, model_from_checkpoint, resize_flow
    from depthflow.visualize import depth_error_map, flow_error_map, save_png

    model, config = model_from_checkpoint(load_checkpoint(ckpt_path))
    model.eval()
    sample = build_samples(config, "val")[0]
    pred = model.predict(
        frame_tensor(sample.frames[1], config.width, config.height, config.device),
        frame_tensor(sample.frames[2], config.width, config.height, config.device),
    )
    written = []
    if sample.gt_flow is not None:
        flow = resize_flow(pred.flow, *sample.gt_flow.shape[:2])[0].permute(1, 2, 0).cpu().numpy()
        written.append(save_png(out_dir / "flow_error.png", flow_error_map(flow, sample.gt_flow, sample.flow_valid)))
    if sample.gt_depth is not None:
        depth = F.interpolate(pred.depth, sample.gt_depth.shape, mode="bilinear", align_corners=False)
        depth = depth[0, 0].cpu().numpy()
        gt = sample.gt_depth
        valid = gt > 0
        depth = depth * (float(np.median(gt[valid])) / float(np.median(depth[valid])))
        written.append(save_png(out_dir / "depth_error.png", depth_error_map(depth, gt)))
    return written


# ---------------------------------------------------------------------------
# Main entry point
# ---------------------------------------------------------------------------

_HANDLERS = {
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "eval-depth": _cmd_eval,
    "eval-flow": _cmd_eval,
    "infer": _cmd_infer,
    "ablate": _cmd_ablate,
    "param-count": _cmd_param_count,
    "plot": _cmd_plot,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments and dispatch to the appropriate sub-command handler.

    Parameters
    ----------
    argv:
        Argument list; defaults to :data:`sys.argv[1:]` when *None*.

    Returns
    -------
    int
        Exit code (0 = success, 1 = run-time failure,
        2 = configuration/argument error, 3 = missing artifact).
    """
    parser = _build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args)

    handler = _HANDLERS.get(args.command)
    if handler is None:
        parser.print_help()
        return EXIT_FAILURE
    return handler(args)


def cli() -> None:
    """Console-script entry point."""
    sys.exit(main())


if __name__ == "__main__":
    cli()
