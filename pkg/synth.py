"""
synth.py - Synthetic highway scenarios and a pinhole renderer

Scenarios script each vehicle's motion in the ego frame (x lateral,
y longitudinal, velocities absolute, the ego driving straight at ego_speed).
Every frame is mapped to camera-frame boxes on a flat road and rendered to
2D detections and shaded silhouette patches, so each later stage has an exact
oracle.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image, ImageDraw
from scipy.special import expit

from config import read_json
from constants import (
    CAR_MEAN_DIMS,
    DEFAULT_MOUNT_HEIGHT_M,
    FACE_SHADES,
    MIN_VEHICLE_GAP_M,
    MIN_VISIBLE_DEPTH_M,
    PATCH_FEATURE_LEN,
    PATCH_RENDER_SIZE,
    PATCH_SIZE,
    SAMPLE_PERIOD_S,
    SCENARIO_PRESETS,
    SCENARIOS_DIR,
)
from exceptions import InputError, ScenarioInvalidError
from geometry3d import (
    Box2D,
    Box3D,
    CameraIntrinsics,
    global_to_local_yaw,
    ray_angle,
    rotation_from_yaw,
    vertex_index,
)
from pose_regressor import NoiseSpec, PatchFeatures

logger = logging.getLogger(__name__)

MOTIONS = ("constant_velocity", "constant_acceleration", "lane_change")
LANE_CHANGE_STEEPNESS = 10.0
DEFAULT_JITTER = {"position": 0.3, "speed": 0.05, "dims": 0.05}

DETECTION_BOX_COLUMNS = ["frame", "track_id", "xmin", "ymin", "xmax", "ymax"]
DETECTION_POSE_COLUMNS = ["dx", "dy", "dz", "theta_local"]
DETECTION_COLUMNS = DETECTION_BOX_COLUMNS + DETECTION_POSE_COLUMNS
TRUTH_COLUMNS = ["frame", "track_id", "x", "y", "tx", "ty", "tz", "dx", "dy", "dz", "yaw"]

# Local face -> (axis, sign); the vehicle nose is +x and y points down
FACES = {
    "front": (0, 1),
    "back": (0, -1),
    "top": (1, -1),
    "bottom": (1, 1),
    "left": (2, 1),
    "right": (2, -1),
}


@dataclass
class VehicleScript:
    id: int
    motion: str = "constant_velocity"
    x0: float = 0.0
    y0: float = 20.0
    vx: float = 0.0
    vy: float = 25.0
    ax: float = 0.0
    ay: float = 0.0
    lane_offset: float = 0.0
    start_s: float = 0.0
    duration_s: float = 4.0
    dims: Tuple[float, float, float] = CAR_MEAN_DIMS

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "VehicleScript":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ScenarioInvalidError(f"Vehicle {payload.get('id')}: unknown keys {', '.join(unknown)}")
        if "id" not in payload:
            raise ScenarioInvalidError("Every vehicle needs an integer id")
        script = cls(**{**payload, "dims": tuple(float(d) for d in payload.get("dims", CAR_MEAN_DIMS))})
        if script.motion not in MOTIONS:
            raise ScenarioInvalidError(f"Vehicle {script.id}: unknown motion {script.motion!r}, expected one of {MOTIONS}")
        if len(script.dims) != 3 or min(script.dims) <= 0:
            raise ScenarioInvalidError(f"Vehicle {script.id}: dims must be three positive lengths")
        if script.motion == "lane_change" and script.duration_s <= 0:
            raise ScenarioInvalidError(f"Vehicle {script.id}: lane change duration must be positive")
        return script

    def _lane_progress(self, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Normalised logistic in [0, 1] over the manoeuvre and its time derivative."""
        if self.motion != "lane_change":
            return np.zeros_like(t), np.zeros_like(t)
        tau = np.clip((t - self.start_s) / self.duration_s, 0.0, 1.0)
        k = LANE_CHANGE_STEEPNESS
        low, high = expit(-k / 2), expit(k / 2)
        sig = expit(k * (tau - 0.5))
        progress = (sig - low) / (high - low)
        inside = (t > self.start_s) & (t < self.start_s + self.duration_s)
        rate = np.where(inside, k * sig * (1 - sig) / (high - low) / self.duration_s, 0.0)
        return progress, rate

    def kinematics(self, t: np.ndarray, ego_speed: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Ego-relative (x, y) and absolute heading at times t."""
        ax, ay = (self.ax, self.ay) if self.motion == "constant_acceleration" else (0.0, 0.0)
        progress, rate = self._lane_progress(t)
        x = self.x0 + self.vx * t + 0.5 * ax * t * t + self.lane_offset * progress
        y = self.y0 + (self.vy - ego_speed) * t + 0.5 * ay * t * t
        vx = self.vx + ax * t + self.lane_offset * rate
        vy = self.vy + ay * t
        heading = np.where(np.hypot(vx, vy) > 1e-9, np.arctan2(-vy, vx), -math.pi / 2)
        return x, y, heading


@dataclass
class Scenario:
    name: str
    vehicles: List[VehicleScript]
    duration_s: float = 20.0
    dt: float = SAMPLE_PERIOD_S
    ego_speed: float = 0.0
    camera: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    mount_height: float = DEFAULT_MOUNT_HEIGHT_M
    jitter: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_JITTER))

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "Scenario":
        if not isinstance(payload, dict) or not payload.get("vehicles"):
            raise ScenarioInvalidError("Scenario needs a non-empty 'vehicles' list")
        camera_payload = dict(payload.get("camera", {}))
        mount_height = float(camera_payload.pop("mount_height", DEFAULT_MOUNT_HEIGHT_M))
        camera = CameraIntrinsics.from_dict({**CameraIntrinsics().to_dict(), **camera_payload})
        vehicles = [VehicleScript.from_dict(v) for v in payload["vehicles"]]
        ids = [v.id for v in vehicles]
        if len(set(ids)) != len(ids):
            raise ScenarioInvalidError(f"Duplicate vehicle ids in scenario: {ids}")
        jitter = {**DEFAULT_JITTER, **payload.get("jitter", {})}
        scenario = cls(
            name=str(payload.get("name", "scenario")),
            vehicles=vehicles,
            duration_s=float(payload.get("duration_s", 20.0)),
            dt=float(payload.get("dt", SAMPLE_PERIOD_S)),
            ego_speed=float(payload.get("ego_speed", 0.0)),
            camera=camera,
            mount_height=mount_height,
            jitter=jitter,
        )
        if scenario.dt <= 0 or scenario.duration_s <= 0:
            raise ScenarioInvalidError("duration_s and dt must be positive")
        return scenario

    @property
    def n_frames(self) -> int:
        return int(round(self.duration_s / self.dt)) + 1


def load_scenario(name_or_path: str, scenarios_dir: Path = SCENARIOS_DIR) -> Scenario:
    """
    Load a scenario JSON by path or by preset name.

    Raises:
        InputError: If neither a file nor a preset of that name exists.
    """
    path = Path(name_or_path)
    if not path.exists() and name_or_path in SCENARIO_PRESETS:
        path = Path(scenarios_dir) / f"{name_or_path}.json"
    if not path.exists():
        raise InputError(f"Scenario not found: {name_or_path}")
    return Scenario.from_dict(read_json(path))


# ---------------------------------------------------------------- generation

@dataclass
class SceneTruth:
    """Per-frame ground truth: ego-frame (x, y) and the camera-frame box."""

    table: pd.DataFrame
    scenario: Scenario

    def trajectories(self) -> pd.DataFrame:
        return self.table[["frame", "track_id", "x", "y"]].copy()

    def boxes(self, frame: int) -> List[Tuple[int, Box3D]]:
        rows = self.table[self.table["frame"] == frame]
        return [(int(r.track_id), _row_box(r)) for r in rows.itertuples(index=False)]


def _row_box(row) -> Box3D:
    return Box3D((row.tx, row.ty, row.tz), (row.dx, row.dy, row.dz), row.yaw)


def generate(scenario: Scenario, seed: int | Sequence[int]) -> SceneTruth:
    """
    Sample every vehicle at the scenario period.

    The seed jitters initial positions, speeds and dimensions; identical seeds
    give bit-identical tables.

    Raises:
        ScenarioInvalidError: If two vehicles come closer than the minimum gap.
    """
    rng = np.random.default_rng(seed)
    jitter = scenario.jitter
    times = np.arange(scenario.n_frames) * scenario.dt
    xs, ys, headings, dims = [], [], [], []

    for script in scenario.vehicles:
        draw = rng.normal(size=7)
        jittered = replace(
            script,
            x0=script.x0 + jitter["position"] * draw[0],
            y0=script.y0 + jitter["position"] * draw[1],
            vx=script.vx + jitter["speed"] * draw[2],
            vy=script.vy + jitter["speed"] * draw[3],
        )
        d = np.maximum(np.asarray(script.dims) + jitter["dims"] * draw[4:7], 0.1)
        x, y, heading = jittered.kinematics(times, scenario.ego_speed)
        xs.append(x)
        ys.append(y)
        headings.append(heading)
        dims.append(d)

    xs, ys = np.array(xs), np.array(ys)
    _check_gaps(scenario, xs, ys, times)

    n_vehicles, n_frames = xs.shape
    ids = np.array([v.id for v in scenario.vehicles])
    dims_arr = np.repeat(np.array(dims)[:, None, :], n_frames, axis=1)
    table = pd.DataFrame({
        "frame": np.tile(np.arange(n_frames), n_vehicles),
        "track_id": np.repeat(ids, n_frames),
        "x": xs.reshape(-1),
        "y": ys.reshape(-1),
        "tx": xs.reshape(-1),
        "ty": scenario.mount_height - dims_arr[..., 1].reshape(-1) / 2.0,
        "tz": ys.reshape(-1),
        "dx": dims_arr[..., 0].reshape(-1),
        "dy": dims_arr[..., 1].reshape(-1),
        "dz": dims_arr[..., 2].reshape(-1),
        "yaw": np.array(headings).reshape(-1),
    })
    table = table.sort_values(["frame", "track_id"]).reset_index(drop=True)
    logger.info(f"Generated {scenario.name}: {n_vehicles} vehicles x {n_frames} frames")
    return SceneTruth(table=table[TRUTH_COLUMNS], scenario=scenario)


def _check_gaps(scenario: Scenario, xs: np.ndarray, ys: np.ndarray, times: np.ndarray) -> None:
    for i in range(len(xs)):
        for j in range(i + 1, len(xs)):
            gap = np.hypot(xs[i] - xs[j], ys[i] - ys[j])
            k = int(np.argmin(gap))
            if gap[k] < MIN_VEHICLE_GAP_M:
                raise ScenarioInvalidError(
                    f"Vehicles {scenario.vehicles[i].id} and {scenario.vehicles[j].id} "
                    f"are {gap[k]:.2f} m apart at t={times[k]:.1f}s"
                )


# ---------------------------------------------------------------- rendering

@dataclass
class RenderedFrame:
    """One vehicle as the camera sees it."""

    track_id: int
    truth: Box3D
    box2d: Optional[Box2D]
    patch: Optional[PatchFeatures]
    visible: bool
    truncated: bool = False
    reason: str = ""


def _face_vertices(axis: int, sign: int) -> List[int]:
    others = [a for a in range(3) if a != axis]
    indices = []
    for s1, s2 in ((1, 1), (1, -1), (-1, -1), (-1, 1)):
        signs = [0, 0, 0]
        signs[axis], signs[others[0]], signs[others[1]] = sign, s1, s2
        indices.append(vertex_index(*signs))
    return indices


def render_patch(box: Box3D, hull: Box2D, camera: CameraIntrinsics) -> np.ndarray:
    """Shaded silhouette of the visible faces, rasterised then resampled to 16x16 in [0, 1]."""
    corners = box.corners()
    depth = corners[:, 2]
    u = camera.fx * corners[:, 0] / depth + camera.cx
    v = camera.fy * corners[:, 1] / depth + camera.cy
    size = PATCH_RENDER_SIZE
    px = (u - hull.x_min) / hull.width * (size - 1)
    py = (v - hull.y_min) / hull.height * (size - 1)

    rotation = rotation_from_yaw(box.yaw)
    faces = []
    for name, (axis, sign) in FACES.items():
        idx = _face_vertices(axis, sign)
        center = corners[idx].mean(axis=0)
        normal = rotation[:, axis] * sign
        if float(normal @ -center) > 0:
            faces.append((float(center[2]), name, idx))

    image = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(image)
    for _, name, idx in sorted(faces, key=lambda f: f[0], reverse=True):
        draw.polygon([(float(px[i]), float(py[i])) for i in idx], fill=FACE_SHADES[name])
    small = image.resize((PATCH_SIZE, PATCH_SIZE), Image.Resampling.BILINEAR)
    return np.asarray(small, dtype=np.float64) / 255.0


def render(
    truths: Sequence[Tuple[int, Box3D]],
    camera: CameraIntrinsics,
    with_patches: bool = True,
) -> List[RenderedFrame]:
    """
    Project each box: the 2D box is the hull of its 8 projected vertices.

    A box with a vertex closer than the minimum depth, or entirely outside the
    image, is invisible. A box crossing the image border is clipped and
    marked truncated.
    """
    rendered: List[RenderedFrame] = []
    for track_id, box in truths:
        corners = box.corners()
        if np.any(corners[:, 2] < MIN_VISIBLE_DEPTH_M):
            rendered.append(RenderedFrame(track_id, box, None, None, visible=False, reason="behind_camera"))
            continue
        u = camera.fx * corners[:, 0] / corners[:, 2] + camera.cx
        v = camera.fy * corners[:, 1] / corners[:, 2] + camera.cy
        hull = Box2D(float(u.min()), float(v.min()), float(u.max()), float(v.max()))
        if hull.x_max <= 0 or hull.y_max <= 0 or hull.x_min >= camera.width or hull.y_min >= camera.height:
            rendered.append(RenderedFrame(track_id, box, None, None, visible=False, reason="off_image"))
            continue
        clipped = Box2D(
            max(hull.x_min, 0.0),
            max(hull.y_min, 0.0),
            min(hull.x_max, float(camera.width)),
            min(hull.y_max, float(camera.height)),
        )
        truncated = clipped != hull
        patch = None
        if with_patches:
            patch = PatchFeatures.from_box(render_patch(box, hull, camera), clipped, camera)
        rendered.append(RenderedFrame(
            track_id, box, clipped, patch, visible=True, truncated=truncated,
            reason="truncated" if truncated else "",
        ))
    return rendered


# ---------------------------------------------------------------- datasets

@dataclass
class SyntheticDataset:
    trajectories: pd.DataFrame
    detections: pd.DataFrame
    ground_truth: List[Dict[str, Any]]
    camera: CameraIntrinsics
    patches: Optional[pd.DataFrame] = None


def apply_detection_noise(detections: pd.DataFrame, noise: NoiseSpec, rng: np.random.Generator) -> pd.DataFrame:
    """Gaussian noise on box sides (pixels), dimensions (metres) and local yaw (radians)."""
    noisy = detections.copy()
    n = len(noisy)
    if n == 0:
        return noisy
    if noise.pixel_sigma > 0:
        sides = noisy[["xmin", "ymin", "xmax", "ymax"]].to_numpy() + rng.normal(0.0, noise.pixel_sigma, size=(n, 4))
        xs, ys = np.sort(sides[:, [0, 2]], axis=1), np.sort(sides[:, [1, 3]], axis=1)
        xs[:, 1] = np.maximum(xs[:, 1], xs[:, 0] + 1.0)
        ys[:, 1] = np.maximum(ys[:, 1], ys[:, 0] + 1.0)
        noisy[["xmin", "xmax"]] = xs
        noisy[["ymin", "ymax"]] = ys
    if noise.dim_sigma > 0:
        dims = noisy[["dx", "dy", "dz"]].to_numpy() + rng.normal(0.0, noise.dim_sigma, size=(n, 3))
        noisy[["dx", "dy", "dz"]] = np.maximum(dims, 0.1)
    if noise.theta_sigma > 0:
        theta = noisy["theta_local"].to_numpy() + rng.normal(0.0, noise.theta_sigma, size=n)
        noisy["theta_local"] = np.arctan2(np.sin(theta), np.cos(theta))
    return noisy


def _frame_records(
    scene: SceneTruth, camera: CameraIntrinsics, with_patches: bool, frame_offset: int, id_offset: int
) -> Tuple[List[dict], List[dict], List[dict]]:
    detections, truth, patches = [], [], []
    for frame in sorted(scene.table["frame"].unique()):
        for item in render(scene.boxes(int(frame)), camera, with_patches):
            out_frame = int(frame) + frame_offset
            out_id = item.track_id + id_offset
            truth.append({
                "frame": out_frame,
                "track_id": out_id,
                **item.truth.to_dict(),
                "visible": item.visible,
                "truncated": item.truncated,
                "reason": item.reason,
            })
            if not item.visible:
                continue
            b = item.box2d
            theta_ray = ray_angle(camera, b.center_u)
            detections.append({
                "frame": out_frame,
                "track_id": out_id,
                "xmin": b.x_min,
                "ymin": b.y_min,
                "xmax": b.x_max,
                "ymax": b.y_max,
                "dx": item.truth.dimensions[0],
                "dy": item.truth.dimensions[1],
                "dz": item.truth.dimensions[2],
                "theta_local": global_to_local_yaw(item.truth.yaw, theta_ray),
            })
            if item.patch is not None:
                patches.append({"frame": out_frame, "track_id": out_id,
                                **{f"f{k}": value for k, value in enumerate(item.patch.vector())}})
    return detections, truth, patches


def generate_dataset(
    scenario: Scenario,
    seed: int,
    repeats: int = 1,
    noise: Optional[NoiseSpec] = None,
    with_patches: bool = False,
) -> SyntheticDataset:
    """
    Generate `repeats` seeded instances in disjoint frame blocks with disjoint track ids.

    Detection noise (if any) is applied after rendering; trajectories and
    ground truth stay exact.
    """
    if repeats < 1:
        raise InputError(f"repeats must be at least 1, got {repeats}")
    noise = noise or NoiseSpec()
    camera = scenario.camera
    id_block = max(v.id for v in scenario.vehicles) + 1
    trajectories, detections, truth, patches = [], [], [], []

    for r in range(repeats):
        instance_seed = seed if r == 0 else [seed, r]
        scene = generate(scenario, instance_seed)
        frame_offset, id_offset = r * (scenario.n_frames + 1), r * id_block
        traj = scene.trajectories()
        traj["frame"] += frame_offset
        traj["track_id"] += id_offset
        trajectories.append(traj)
        d, t, p = _frame_records(scene, camera, with_patches, frame_offset, id_offset)
        detections.extend(d)
        truth.extend(t)
        patches.extend(p)

    detection_table = pd.DataFrame(detections, columns=DETECTION_COLUMNS)
    detection_table = apply_detection_noise(detection_table, noise, np.random.default_rng([seed, repeats, 7]))
    patch_table = None
    if with_patches:
        patch_table = pd.DataFrame(
            patches, columns=["frame", "track_id"] + [f"f{k}" for k in range(PATCH_FEATURE_LEN)]
        )
    logger.info(f"Dataset: {len(detection_table)} detections over {repeats} instance(s)")
    return SyntheticDataset(
        trajectories=pd.concat(trajectories, ignore_index=True),
        detections=detection_table,
        ground_truth=truth,
        camera=camera,
        patches=patch_table,
    )
