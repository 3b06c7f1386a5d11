"""
main.py - trajsight command line: gen, solve-pose, train-pose, train, eval, predict, ablate

Exit codes: 0 success, 1 computation failure, 2 usage or input error.
Every command records itself in <output dir>/manifest.json.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from config import get_config, read_json
from constants import ABLATION_VARIANTS, PROJECT_ROOT, VERSION, Files
from exceptions import InputError, NoWindowError, TrajSightError
from logging_config import setup_logging
from pipeline import (
    POSE_SOURCES,
    ablation_dataset,
    build_windows,
    estimate_poses,
    predictions_table,
    read_camera,
    read_detections,
    read_ground_truth,
    read_patches,
    read_recovered,
    read_trajectories,
    read_windows,
    recovered_boxes,
    regressor_targets,
    solve_detections,
    write_dataset,
    write_windows,
)
from pose_regressor import NoiseSpec, RegressorConfig, load_regressor, save_regressor, train_regressor
from stmha_net import ModelConfig, TrajectoryModel
from synth import generate_dataset, load_scenario
from training import (
    TrainConfig,
    ablation_table,
    evaluate,
    fit_scale,
    load_run_config,
    mde_iou_vs_distance,
    predict_windows,
    run_ablation,
    train,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- manifest

def git_describe() -> str:
    """`git describe` of the checkout, or the package version outside a repository."""
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=PROJECT_ROOT, capture_output=True, text=True, timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return f"v{VERSION}"
    return result.stdout.strip() if result.returncode == 0 and result.stdout.strip() else f"v{VERSION}"


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    """How one command produced the files of an output directory."""

    command: str
    argv: List[str]
    seed: Optional[int]
    version: str
    config_hashes: Dict[str, str] = field(default_factory=dict)
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    created_at: str = ""

    def write(self, directory: Path) -> Path:
        """Merge this run into the directory's single manifest, keyed by command."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / Files.MANIFEST
        runs: Dict[str, Any] = {}
        if path.exists():
            try:
                runs = json.loads(path.read_text()).get("runs", {})
            except (json.JSONDecodeError, AttributeError):
                logger.warning(f"Replacing unreadable manifest {path}")
        self.created_at = datetime.now(timezone.utc).isoformat()
        runs[self.command] = asdict(self)
        path.write_text(json.dumps({"runs": runs}, indent=2, sort_keys=True))
        return path


class Stopwatch:
    def __init__(self):
        self.timings: Dict[str, float] = {}
        self._started = time.perf_counter()

    def lap(self, name: str) -> None:
        now = time.perf_counter()
        self.timings[name] = round(now - self._started, 4)
        self._started = now


def _manifest(args: argparse.Namespace, seed: Optional[int], clock: Stopwatch, **kwargs) -> RunManifest:
    return RunManifest(
        command=args.command,
        argv=list(args.argv),
        seed=seed,
        version=git_describe(),
        timings=clock.timings,
        **kwargs,
    )


def _seed(args: argparse.Namespace) -> int:
    return args.seed if args.seed is not None else get_config().seed


def _run_configs(args: argparse.Namespace) -> tuple[ModelConfig, TrainConfig, Dict[str, str]]:
    """Run config from --config (or defaults), with --seed overriding the training seed."""
    hashes: Dict[str, str] = {}
    payload: Dict[str, Any] = {}
    if args.config:
        payload = read_json(args.config)
        if not isinstance(payload, dict):
            raise InputError(f"Run config {args.config} must be a JSON object")
        hashes[str(args.config)] = file_sha256(args.config)
    model_config, train_config = load_run_config(payload)
    if args.seed is not None or "seed" not in payload.get("train", {}):
        train_config = TrainConfig.from_dict({**train_config.to_dict(), "seed": _seed(args)})
    return model_config, train_config, hashes


def _data_windows(data: Path, t_steps: int, f_steps: int, observed: bool, stride: int):
    trajectories = read_trajectories(data / Files.TRAJECTORIES)
    recovered = read_recovered(data / Files.RECOVERED) if observed else None
    truth, windows = build_windows(trajectories, t_steps, f_steps, recovered, stride=stride)
    if not windows:
        raise NoWindowError(f"No {t_steps}+{f_steps}-step windows in {data}")
    return truth, windows


# ---------------------------------------------------------------- commands

def cmd_gen(args: argparse.Namespace) -> int:
    clock = Stopwatch()
    seed = _seed(args)
    scenario = load_scenario(args.scenario, get_config().scenarios_dir)
    noise = NoiseSpec(dim_sigma=args.dim_noise, theta_sigma=args.yaw_noise, pixel_sigma=args.pixel_noise)
    dataset = generate_dataset(scenario, seed, repeats=args.repeats, noise=noise, with_patches=args.patches)
    clock.lap("generate")
    written = write_dataset(dataset, args.out)
    clock.lap("write")
    scenario_path = Path(args.scenario)
    hashes = {str(scenario_path): file_sha256(scenario_path)} if scenario_path.exists() else {}
    _manifest(args, seed, clock, config_hashes=hashes, inputs=[args.scenario],
              outputs=[str(p) for p in written]).write(args.out)
    n_tracks = dataset.trajectories["track_id"].nunique()
    print(f"{scenario.name}: {n_tracks} tracks, {len(dataset.detections)} detections -> {args.out}")
    return 0


def cmd_solve_pose(args: argparse.Namespace) -> int:
    clock = Stopwatch()
    seed = _seed(args)
    camera = read_camera(args.camera)
    detections = read_detections(args.detections)
    data_dir = Path(args.detections).parent
    inputs = [str(args.camera), str(args.detections)]

    truths = patches = regressor = None
    if args.pose_source == "oracle":
        truth_path = Path(args.ground_truth or data_dir / Files.GROUND_TRUTH)
        truths = read_ground_truth(truth_path)
        inputs.append(str(truth_path))
    elif args.pose_source == "imha":
        if not args.regressor:
            raise InputError("--pose-source imha needs --regressor <dir> (see train-pose)")
        patch_path = Path(args.patches or data_dir / Files.PATCHES)
        patches = read_patches(patch_path)
        regressor = load_regressor(args.regressor)
        inputs += [str(patch_path), str(args.regressor)]

    noise = NoiseSpec(dim_sigma=args.dim_noise, theta_sigma=args.yaw_noise)
    estimates = estimate_poses(
        detections, args.pose_source, camera, truths=truths, patches=patches, regressor=regressor,
        noise=noise, rng=np.random.default_rng(seed),
    )
    clock.lap("estimate")
    recovered = solve_detections(detections, camera, estimates, refine=args.refine)
    clock.lap("solve")

    out = Path(args.out or data_dir / Files.RECOVERED)
    out.parent.mkdir(parents=True, exist_ok=True)
    recovered.to_csv(out, index=False)
    _manifest(args, seed, clock, inputs=inputs, outputs=[str(out)]).write(out.parent)
    print(f"{len(recovered)} detections, {int(recovered['flagged'].sum())} flagged -> {out}")
    return 0


def cmd_train_pose(args: argparse.Namespace) -> int:
    clock = Stopwatch()
    seed = _seed(args)
    data = Path(args.data)
    camera = read_camera(data / Files.CAMERA)
    features, dims, thetas = regressor_targets(
        read_detections(data / Files.DETECTIONS), camera,
        read_ground_truth(data / Files.GROUND_TRUTH), read_patches(data / Files.PATCHES),
    )
    train_config = TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=seed)
    config = RegressorConfig()
    weights, losses = train_regressor(features, dims, thetas, train_config, config)
    clock.lap("train")
    save_regressor(args.out, weights, config)
    loss_path = Path(args.out) / Files.REGRESSOR_LOSS
    pd.DataFrame({"epoch": np.arange(1, len(losses) + 1), "loss": losses}).to_csv(loss_path, index=False)
    _manifest(args, seed, clock, inputs=[str(data)],
              outputs=[str(Path(args.out) / Files.REGRESSOR_WEIGHTS), str(loss_path)]).write(args.out)
    print(f"Regressor trained on {len(features)} patches, final loss {losses[-1]:.5f} -> {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    clock = Stopwatch()
    model_config, train_config, hashes = _run_configs(args)
    data = Path(args.data)
    truth, windows = _data_windows(data, model_config.t_steps, model_config.f_steps, args.observed, args.stride)
    clock.lap("windows")

    model = TrajectoryModel.create(model_config, fit_scale(truth), np.random.default_rng(train_config.seed))
    logger.info(f"Training on {len(windows)} windows, {model.weights.parameter_count()} parameters")
    result = train(model, windows, train_config, checkpoint_dir=args.out)
    clock.lap("train")

    out = Path(args.out)
    result.model.save(out)
    result.loss_curve().to_csv(out / Files.LOSS_CURVE, index=False)
    outputs = [str(out / name) for name in (Files.WEIGHTS, Files.MODEL_CONFIG, Files.SCALE, Files.LOSS_CURVE)]
    _manifest(args, train_config.seed, clock, config_hashes=hashes, inputs=[str(data)],
              outputs=outputs).write(out)
    print(f"Trained {train_config.epochs} epochs on {len(windows)} windows, "
          f"final loss {result.losses[-1] if result.losses else float('nan'):.6f} -> {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    clock = Stopwatch()
    model = TrajectoryModel.load(args.model)
    data = Path(args.data)
    _, windows = _data_windows(data, model.config.t_steps, model.config.f_steps, args.observed, args.stride)
    report = evaluate(model, windows, variant="observed" if args.observed else "ground_truth")
    clock.lap("evaluate")

    recovered_path = data / Files.RECOVERED
    truth_path = data / Files.GROUND_TRUTH
    if recovered_path.exists() and truth_path.exists():
        estimates, truths = recovered_boxes(read_recovered(recovered_path), read_ground_truth(truth_path))
        report.distance_bins = mde_iou_vs_distance(estimates, truths)

    out = Path(args.out or args.model)
    report.write(out)
    write_windows(windows, out / Files.TEST_WINDOWS)
    _manifest(args, None, clock, inputs=[str(args.model), str(data)],
              outputs=[str(out / Files.EVAL_REPORT), str(out / Files.RMSE_BY_HORIZON)]).write(out)
    print(f"{'horizon_s':>9} {'model':>10} {'cv':>10}")
    for h, value in report.rmse.items():
        print(f"{h:>9g} {value:>10.4f} {report.baseline_rmse[h]:>10.4f}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    clock = Stopwatch()
    model = TrajectoryModel.load(args.model)
    windows = read_windows(args.window)
    table = predictions_table(windows, predict_windows(model, windows))
    clock.lap("predict")
    if args.out is None:
        table.to_csv(sys.stdout, index=False)
        return 0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out, index=False)
    _manifest(args, None, clock, inputs=[str(args.model), str(args.window)], outputs=[str(out)]).write(out.parent)
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    clock = Stopwatch()
    model_config, train_config, hashes = _run_configs(args)
    data = Path(args.data)
    recovered_path = data / Files.RECOVERED
    if not recovered_path.exists():
        raise InputError(f"File not found: {recovered_path} (run solve-pose first)")
    truth, observed = build_windows(
        read_trajectories(data / Files.TRAJECTORIES), model_config.t_steps, model_config.f_steps,
        read_recovered(recovered_path), stride=args.stride,
    )
    dataset = ablation_dataset(truth, observed, args.test_fraction, train_config.seed)
    clock.lap("windows")

    variants = list(ABLATION_VARIANTS) if args.variant == "all" else [args.variant]
    if "control" not in variants:
        variants.append("control")
    if args.with_vlstm:
        variants.append("vlstm")

    out = Path(args.out)
    reports = {}
    for variant in variants:
        reports[variant] = run_ablation(variant, dataset, model_config, train_config)
        reports[variant].write(out / variant)
        clock.lap(variant)
    table = ablation_table(reports)
    table.to_csv(out / Files.ABLATION_TABLE, index=False)
    _manifest(args, train_config.seed, clock, config_hashes=hashes, inputs=[str(data)],
              outputs=[str(out / Files.ABLATION_TABLE)]).write(out)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return 0


# ---------------------------------------------------------------- parser

DETECTION_HELP = """\
detections.csv columns:
  frame, track_id          frame index and vehicle id
  xmin, ymin, xmax, ymax   2D box in pixels
  dx, dy, dz               vehicle length, height, width in metres (needed by --pose-source file)
  theta_local              yaw relative to the ray through the box centre, rad (needed by --pose-source file)
trajectories.csv columns: frame, track_id, x (lateral m), y (longitudinal m)
ground_truth.json: {"boxes": [{frame, track_id, translation, dimensions, yaw, visible, truncated, reason}]}
patches.csv columns: frame, track_id, f0..f255 (16x16 pixels), f256..f258 (aspect, area, centre offset)
"""

RECOVERED_HELP = """\
output columns:
  frame, track_id          copied from the detection
  tx, ty, tz               recovered camera-frame translation (m)
  x, y                     ego-frame position (x = tx lateral, y = tz longitudinal)
  config_index             winning vertex configuration (0-63)
  residual                 norm of the four side constraints at the solution
  flagged, reason          unsolved rows: truncated, degenerate_box, no_pose, or the geometry error
"""

EVAL_HELP = """\
writes eval_report.json, rmse_by_horizon.csv (horizon_s, rmse), baseline_rmse.csv
(horizon_s, rmse of the constant-velocity baseline), distance_bins.csv
(distance_bin, mde, iou; when recovered.csv and ground_truth.json exist) and
test_windows.json (the evaluated windows, usable with predict).
"""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajsight",
        description="Monocular 3D localisation and attention-based trajectory prediction on synthetic highways.",
    )
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default from TRAJSIGHT_LOG_LEVEL)")
    parser.add_argument("--seed", type=int, default=None, help="Single source of randomness (default TRAJSIGHT_SEED)")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    gen = sub.add_parser("gen", help="Generate a synthetic dataset", epilog=DETECTION_HELP, formatter_class=fmt)
    gen.add_argument("--scenario", required=True, help="Scenario JSON path or preset name")
    gen.add_argument("--out", required=True, type=Path)
    gen.add_argument("--repeats", type=int, default=1, help="Seeded instances in disjoint frame blocks")
    gen.add_argument("--pixel-noise", type=float, default=0.0, help="Sigma on 2D box sides (px)")
    gen.add_argument("--dim-noise", type=float, default=0.0, help="Sigma on detection dimensions (m)")
    gen.add_argument("--yaw-noise", type=float, default=0.0, help="Sigma on detection local yaw (rad)")
    gen.add_argument("--patches", action="store_true", help="Also render patches.csv for the IMHA regressor")
    gen.set_defaults(handler=cmd_gen)

    solve = sub.add_parser("solve-pose", help="Recover 3D positions from detections",
                           epilog=RECOVERED_HELP, formatter_class=fmt)
    solve.add_argument("--camera", required=True, type=Path)
    solve.add_argument("--detections", required=True, type=Path)
    solve.add_argument("--pose-source", choices=POSE_SOURCES, default="oracle")
    solve.add_argument("--out", type=Path, default=None, help="Default: recovered.csv next to the detections")
    solve.add_argument("--ground-truth", type=Path, default=None)
    solve.add_argument("--patches", type=Path, default=None)
    solve.add_argument("--regressor", type=Path, default=None, help="Directory written by train-pose")
    solve.add_argument("--dim-noise", type=float, default=0.0, help="Oracle noise on dimensions (m)")
    solve.add_argument("--yaw-noise", type=float, default=0.0, help="Oracle noise on yaw (rad)")
    solve.add_argument("--refine", action="store_true", help="Levenberg-Marquardt polish of each solution")
    solve.set_defaults(handler=cmd_solve_pose)

    train_pose = sub.add_parser("train-pose", help="Train the IMHA pose regressor on rendered patches")
    train_pose.add_argument("--data", required=True, type=Path, help="Directory written by gen --patches")
    train_pose.add_argument("--out", required=True, type=Path)
    train_pose.add_argument("--epochs", type=int, default=100)
    train_pose.add_argument("--lr", type=float, default=1e-3)
    train_pose.add_argument("--batch-size", type=int, default=32)
    train_pose.set_defaults(handler=cmd_train_pose)

    for name, handler, helptext in (
        ("train", cmd_train, "Train the trajectory model"),
        ("ablate", cmd_ablate, "Train and compare architecture variants"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True, type=Path)
        p.add_argument("--config", type=Path, default=None, help='Run config {"model": {...}, "train": {...}}')
        p.add_argument("--out", required=True, type=Path)
        p.add_argument("--stride", type=int, default=1, help="Window stride in frames")
        p.set_defaults(handler=handler)
    sub.choices["train"].add_argument("--observed", action="store_true",
                                      help="Train on recovered pasts (recovered.csv)")
    sub.choices["ablate"].add_argument("--variant", choices=[*ABLATION_VARIANTS, "all"], default="all")
    sub.choices["ablate"].add_argument("--with-vlstm", action="store_true", help="Add the plain LSTM row")
    sub.choices["ablate"].add_argument("--test-fraction", type=float, default=0.25)

    ev = sub.add_parser("eval", help="RMSE by horizon against the constant-velocity baseline",
                        epilog=EVAL_HELP, formatter_class=fmt)
    ev.add_argument("--model", required=True, type=Path)
    ev.add_argument("--data", required=True, type=Path)
    ev.add_argument("--out", type=Path, default=None, help="Default: the model directory")
    ev.add_argument("--observed", action="store_true", help="Evaluate on recovered pasts")
    ev.add_argument("--stride", type=int, default=1)
    ev.set_defaults(handler=cmd_eval)

    pred = sub.add_parser("predict", help="Predict futures for windows (CSV window_id,track_id,step,x,y)")
    pred.add_argument("--model", required=True, type=Path)
    pred.add_argument("--window", required=True, type=Path, help="One window object or a list of them")
    pred.add_argument("--out", type=Path, default=None, help="Default: stdout")
    pred.set_defaults(handler=cmd_predict)

    # --seed is also accepted after the subcommand; absent there, the global value stands
    for command_parser in sub.choices.values():
        command_parser.add_argument("--seed", type=int, default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    try:
        config = get_config()
        setup_logging(args.log_level or config.log_level, config.log_file)
        return args.handler(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrajSightError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
