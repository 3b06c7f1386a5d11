"""
pipeline.py - Data-directory plumbing shared by the CLI and the analysis scripts

A data directory (written by `gen`) holds detections.csv, trajectories.csv,
ground_truth.json, camera.json and optionally patches.csv; `solve-pose` adds
recovered.csv. This module reads and writes those files and turns them into
pose estimates, recovered positions and trajectory windows.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import read_json
from constants import MAX_INTERPOLATED_GAP, OBSERVABLE_RADIUS_M, SAMPLE_PERIOD_S, Files
from exceptions import ContractError, GeometryError, InputError, MalformedInputError
from geometry3d import (
    Box2D,
    Box3D,
    CameraIntrinsics,
    global_to_local_yaw,
    local_to_global_yaw,
    ray_angle,
    recover_box3d_detailed,
)
from pose_regressor import NoiseSpec, PoseEstimate, RegressorConfig, oracle_estimate, regress_batch
from stmha_net import ModelWeights
from synth import DETECTION_BOX_COLUMNS, DETECTION_POSE_COLUMNS, SyntheticDataset
from track_assembly import (
    TRACK_COLUMNS,
    TrackSet,
    TrajectoryWindow,
    assemble,
    iter_windows,
    substitute_observed,
)
from training import AblationDataset

logger = logging.getLogger(__name__)

POSE_SOURCES = ("oracle", "imha", "file")
RECOVERED_COLUMNS = [
    "frame", "track_id", "tx", "ty", "tz", "x", "y", "config_index", "residual", "flagged", "reason",
]
TRUNCATION_MARGIN_PX = 0.5

TruthIndex = Dict[Tuple[int, int], Box3D]


# ---------------------------------------------------------------- files

def write_dataset(dataset: SyntheticDataset, out_dir: Path) -> List[Path]:
    """Write every table of a generated dataset; returns the paths written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [
        out_dir / Files.DETECTIONS,
        out_dir / Files.TRAJECTORIES,
        out_dir / Files.GROUND_TRUTH,
        out_dir / Files.CAMERA,
    ]
    dataset.detections.to_csv(written[0], index=False)
    dataset.trajectories.to_csv(written[1], index=False)
    written[2].write_text(json.dumps({"boxes": dataset.ground_truth}, indent=1, sort_keys=True))
    written[3].write_text(json.dumps(dataset.camera.to_dict(), indent=2, sort_keys=True))
    if dataset.patches is not None:
        dataset.patches.to_csv(out_dir / Files.PATCHES, index=False)
        written.append(out_dir / Files.PATCHES)
    return written


def _read_csv(path: Path, columns: Sequence[str], what: str) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise InputError(f"File not found: {path}")
    try:
        table = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise MalformedInputError(f"Cannot parse {what} CSV {path}: {e}") from e
    missing = [c for c in columns if c not in table.columns]
    if missing:
        raise MalformedInputError(f"{what.capitalize()} CSV {path} is missing columns: {', '.join(missing)}")
    return table


def read_detections(path: Path) -> pd.DataFrame:
    """Detections need the box columns; the pose columns are only read by the file pose source."""
    return _read_csv(path, DETECTION_BOX_COLUMNS, "detections")


def read_trajectories(path: Path) -> pd.DataFrame:
    return _read_csv(path, TRACK_COLUMNS, "trajectory")


def read_recovered(path: Path) -> pd.DataFrame:
    return _read_csv(path, RECOVERED_COLUMNS, "recovered")


def read_camera(path: Path) -> CameraIntrinsics:
    return CameraIntrinsics.from_dict(read_json(path))


def read_ground_truth(path: Path) -> TruthIndex:
    """Visible ground-truth boxes keyed by (frame, track_id)."""
    payload = read_json(path)
    try:
        return {
            (int(b["frame"]), int(b["track_id"])): Box3D.from_dict(b)
            for b in payload["boxes"]
            if b.get("visible", True)
        }
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedInputError(f"Ground truth {path} is malformed: {e}") from e


def read_patches(path: Path) -> Dict[Tuple[int, int], np.ndarray]:
    table = _read_csv(path, ["frame", "track_id", "f0"], "patches")
    values = table.drop(columns=["frame", "track_id"]).to_numpy(dtype=np.float64)
    keys = zip(table["frame"].astype(int), table["track_id"].astype(int))
    return {key: row for key, row in zip(keys, values)}


# ---------------------------------------------------------------- pose solving

def _detection_box(row) -> Optional[Box2D]:
    try:
        return Box2D(float(row.xmin), float(row.ymin), float(row.xmax), float(row.ymax))
    except ContractError:
        return None


def estimate_poses(
    detections: pd.DataFrame,
    source: str,
    camera: CameraIntrinsics,
    truths: Optional[TruthIndex] = None,
    patches: Optional[Dict[Tuple[int, int], np.ndarray]] = None,
    regressor: Optional[Tuple[ModelWeights, RegressorConfig]] = None,
    noise: Optional[NoiseSpec] = None,
    rng: Optional[np.random.Generator] = None,
) -> List[Optional[PoseEstimate]]:
    """
    One estimate per detection row (None when the source has nothing for it).

    oracle reads ground truth (plus optional noise), file reads the dimension
    and local-yaw columns of the detections, imha regresses from patches.
    """
    if source not in POSE_SOURCES:
        raise InputError(f"Unknown pose source {source!r}; expected one of {POSE_SOURCES}")
    keys = list(zip(detections["frame"].astype(int), detections["track_id"].astype(int)))

    if source == "file":
        missing = [c for c in DETECTION_POSE_COLUMNS if c not in detections.columns]
        if missing:
            raise MalformedInputError(
                f"Pose source 'file' needs detection columns: {', '.join(missing)}"
            )
        return [
            PoseEstimate(np.array([row.dx, row.dy, row.dz], dtype=np.float64), float(row.theta_local))
            for row in detections.itertuples(index=False)
        ]

    if source == "oracle":
        if truths is None:
            raise InputError("Pose source 'oracle' needs a ground-truth file")
        estimates: List[Optional[PoseEstimate]] = []
        for key, row in zip(keys, detections.itertuples(index=False)):
            truth = truths.get(key)
            if truth is None:
                estimates.append(None)
                continue
            theta_ray = ray_angle(camera, 0.5 * (row.xmin + row.xmax))
            estimates.append(oracle_estimate(truth, noise, rng, theta_ray))
        return estimates

    if patches is None or regressor is None:
        raise InputError("Pose source 'imha' needs a patches file and a trained regressor")
    weights, config = regressor
    found = [k for k in keys if k in patches]
    estimates_by_key: Dict[Tuple[int, int], PoseEstimate] = {}
    if found:
        batch = np.stack([patches[k] for k in found])
        estimates_by_key = dict(zip(found, regress_batch(batch, weights, config)))
    return [estimates_by_key.get(k) for k in keys]


def solve_detections(
    detections: pd.DataFrame,
    camera: CameraIntrinsics,
    estimates: Sequence[Optional[PoseEstimate]],
    refine: bool = False,
) -> pd.DataFrame:
    """
    Recover the 3D translation of every detection.

    Unsolvable rows (truncated or degenerate boxes, missing pose, geometry
    failures) are kept with flagged=True and a reason; the output has exactly
    one row per input row.
    """
    if len(estimates) != len(detections):
        raise ContractError(f"{len(estimates)} pose estimates for {len(detections)} detections")
    rows = []
    for row, estimate in zip(detections.itertuples(index=False), estimates):
        out = {
            "frame": int(row.frame), "track_id": int(row.track_id),
            "tx": np.nan, "ty": np.nan, "tz": np.nan, "x": np.nan, "y": np.nan,
            "config_index": -1, "residual": np.nan, "flagged": True, "reason": "",
        }
        box = _detection_box(row)
        if box is None:
            out["reason"] = "degenerate_box"
        elif box.touches_border(camera, TRUNCATION_MARGIN_PX):
            out["reason"] = "truncated"
        elif estimate is None:
            out["reason"] = "no_pose"
        else:
            yaw = local_to_global_yaw(estimate.theta_local, ray_angle(camera, box.center_u))
            try:
                result = recover_box3d_detailed(camera, yaw, estimate.dimensions, box, refine=refine)
            except (GeometryError, ContractError) as e:
                out["reason"] = type(e).__name__
                logger.debug(f"Frame {out['frame']} track {out['track_id']}: {e}")
            else:
                tx, ty, tz = result.box.translation
                out.update(tx=tx, ty=ty, tz=tz, x=tx, y=tz, config_index=result.config_index,
                           residual=result.residual, flagged=False)
        rows.append(out)

    table = pd.DataFrame(rows, columns=RECOVERED_COLUMNS)
    flagged = int(table["flagged"].sum())
    if flagged:
        reasons = table.loc[table["flagged"], "reason"].value_counts().to_dict()
        logger.warning(f"{flagged} of {len(table)} detections flagged: {reasons}")
    return table


def regressor_targets(
    detections: pd.DataFrame,
    camera: CameraIntrinsics,
    truths: TruthIndex,
    patches: Dict[Tuple[int, int], np.ndarray],
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Patch features with ground-truth dimensions and local yaw for every detection that has both."""
    features, dims, thetas = [], [], []
    for row in detections.itertuples(index=False):
        key = (int(row.frame), int(row.track_id))
        if key not in truths or key not in patches:
            continue
        truth = truths[key]
        features.append(patches[key])
        dims.append(truth.dimensions)
        thetas.append(global_to_local_yaw(truth.yaw, ray_angle(camera, 0.5 * (row.xmin + row.xmax))))
    if not features:
        raise InputError("No detection has both a patch and a ground-truth box")
    return np.stack(features), np.stack(dims), np.array(thetas)


def recovered_boxes(recovered: pd.DataFrame, truths: TruthIndex) -> Tuple[List[Box3D], List[Box3D]]:
    """Pairs (estimate, truth) for every unflagged recovered row that has ground truth."""
    estimates, matched = [], []
    for row in recovered[~recovered["flagged"].astype(bool)].itertuples(index=False):
        truth = truths.get((int(row.frame), int(row.track_id)))
        if truth is None:
            continue
        estimates.append(Box3D((row.tx, row.ty, row.tz), truth.dimensions, truth.yaw))
        matched.append(truth)
    return estimates, matched


# ---------------------------------------------------------------- windows

def observed_tracks(recovered: pd.DataFrame, dt: float = SAMPLE_PERIOD_S) -> TrackSet:
    """Tracks of the recovered ego-frame positions, flagged rows dropped."""
    usable = recovered[~recovered["flagged"].astype(bool)]
    return assemble(usable[TRACK_COLUMNS], dt=dt, max_gap=MAX_INTERPOLATED_GAP)


def build_windows(
    trajectories: pd.DataFrame,
    t_steps: int,
    f_steps: int,
    recovered: Optional[pd.DataFrame] = None,
    stride: int = 1,
    radius: float = OBSERVABLE_RADIUS_M,
) -> Tuple[List[TrajectoryWindow], List[TrajectoryWindow]]:
    """
    Ground-truth windows and their observed counterparts, index-aligned.

    Without recovered positions both lists are the ground-truth windows. With
    them, pasts are replaced by recovered positions and windows whose target
    was not recovered on every past step are dropped from both lists.
    """
    tracks = assemble(trajectories[TRACK_COLUMNS])
    truth = list(iter_windows(tracks, t_steps, f_steps, stride=stride, radius=radius))
    if recovered is None:
        return truth, truth
    observed_set = observed_tracks(recovered)
    kept_truth, kept_observed = [], []
    for win in truth:
        observed = substitute_observed(win, observed_set)
        if observed.past_presence[:, 0].all():
            kept_truth.append(win)
            kept_observed.append(observed)
    logger.info(f"{len(kept_observed)} of {len(truth)} windows have a fully recovered target past")
    return kept_truth, kept_observed


def split_windows(n_windows: int, test_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded train/test index split; both parts are sorted."""
    if not 0.0 < test_fraction < 1.0:
        raise InputError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if n_windows < 2:
        raise InputError(f"Need at least 2 windows to split, got {n_windows}")
    order = np.random.default_rng(seed).permutation(n_windows)
    n_test = min(max(1, int(round(n_windows * test_fraction))), n_windows - 1)
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def ablation_dataset(
    truth: Sequence[TrajectoryWindow],
    observed: Sequence[TrajectoryWindow],
    test_fraction: float,
    seed: int,
) -> AblationDataset:
    train_idx, test_idx = split_windows(len(truth), test_fraction, seed)
    return AblationDataset(
        train_truth=[truth[i] for i in train_idx],
        test_truth=[truth[i] for i in test_idx],
        train_observed=[observed[i] for i in train_idx],
        test_observed=[observed[i] for i in test_idx],
    )


def write_windows(windows: Sequence[TrajectoryWindow], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([w.to_dict() for w in windows], sort_keys=True))


def read_windows(path: Path) -> List[TrajectoryWindow]:
    """A window JSON file holds either one window object or a list of them."""
    payload = read_json(path)
    items = payload if isinstance(payload, list) else [payload]
    return [TrajectoryWindow.from_dict(item) for item in items]


def predictions_table(windows: Sequence[TrajectoryWindow], predictions: Sequence[np.ndarray]) -> pd.DataFrame:
    """Long table window_id, track_id, step (1-based), x, y."""
    rows = []
    for win, pred in zip(windows, predictions):
        for step in range(pred.shape[0]):
            for i, track_id in enumerate(win.vehicle_ids):
                rows.append({
                    "window_id": win.window_id,
                    "track_id": int(track_id),
                    "step": step + 1,
                    "x": float(pred[step, i, 0]),
                    "y": float(pred[step, i, 1]),
                })
    return pd.DataFrame(rows, columns=["window_id", "track_id", "step", "x", "y"])
