"""
geometry3d.py - Recover 3D vehicle translation from a 2D box, dimensions and yaw

Camera frame: x right, y down, z forward. A Box3D is upright: its only
rotation is the yaw about the camera y axis. Box dimensions are ordered
(d_x, d_y, d_z) = (length, height, width), so the vehicle nose points along
the local +x axis.

Recovery enumerates the 64 admissible vertex-to-side configurations, solves
the four cross-multiplied side constraints for T by linear least squares and
keeps the candidate whose reprojected hull matches the input box best.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares
from shapely.geometry import Polygon

from constants import (
    DEFAULT_CX,
    DEFAULT_CY,
    DEFAULT_FX,
    DEFAULT_FY,
    DEFAULT_IMAGE_HEIGHT,
    DEFAULT_IMAGE_WIDTH,
)
from exceptions import (
    BehindCameraError,
    ContractError,
    DegenerateGeometryError,
    MalformedInputError,
    NoSolutionError,
)

logger = logging.getLogger(__name__)

# Vertices closer than this (metres along z) are treated as behind the camera
MIN_DEPTH = 1e-6

# Footprint corners as (sign_x, sign_z), in cyclic order around the box
CORNER_SIGNS = ((1, 1), (1, -1), (-1, -1), (-1, 1))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics K plus the sensor size used for visibility checks."""

    fx: float = DEFAULT_FX
    fy: float = DEFAULT_FY
    cx: float = DEFAULT_CX
    cy: float = DEFAULT_CY
    width: int = DEFAULT_IMAGE_WIDTH
    height: int = DEFAULT_IMAGE_HEIGHT

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "CameraIntrinsics":
        try:
            return cls(
                fx=float(payload["fx"]),
                fy=float(payload["fy"]),
                cx=float(payload["cx"]),
                cy=float(payload["cy"]),
                width=int(payload.get("width", DEFAULT_IMAGE_WIDTH)),
                height=int(payload.get("height", DEFAULT_IMAGE_HEIGHT)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedInputError(f"Camera JSON needs numeric fx, fy, cx, cy: {e}") from e

    def to_dict(self) -> Dict[str, Any]:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned pixel rectangle."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ContractError(
                f"Degenerate 2D box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])

    @property
    def center_u(self) -> float:
        return 0.5 * (self.x_min + self.x_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def touches_border(self, camera: CameraIntrinsics, margin: float = 0.0) -> bool:
        """True when the box reaches the image edge (a truncated detection)."""
        return (
            self.x_min <= margin
            or self.y_min <= margin
            or self.x_max >= camera.width - margin
            or self.y_max >= camera.height - margin
        )


@dataclass
class Box3D:
    """Upright box: translation T, dimensions D = (length, height, width), yaw."""

    translation: np.ndarray
    dimensions: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.dimensions = np.asarray(self.dimensions, dtype=np.float64).reshape(3)
        self.yaw = float(self.yaw)

    def corners(self) -> np.ndarray:
        """The 8 vertices in camera coordinates, ordered by vertex_index."""
        return box_vertices(self.dimensions) @ rotation_from_yaw(self.yaw).T + self.translation

    def footprint(self) -> np.ndarray:
        """(x, z) of the 4 footprint corners in cyclic order."""
        corners = self.corners()
        return np.array([corners[vertex_index(sx, 1, sz)][[0, 2]] for sx, sz in CORNER_SIGNS])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "translation": self.translation.tolist(),
            "dimensions": self.dimensions.tolist(),
            "yaw": self.yaw,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "Box3D":
        return cls(payload["translation"], payload["dimensions"], payload["yaw"])


@dataclass(frozen=True)
class VertexConfiguration:
    """Vertex index (0-7, see vertex_index) touching each side of the 2D box."""

    left: int
    right: int
    top: int
    bottom: int
    nearest_corner: int = field(default=0, compare=False)

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.left, self.right, self.top, self.bottom)


@dataclass
class RecoveryResult:
    """Winning candidate of a recover_box3d run."""

    box: Box3D
    config_index: int
    residual: float
    hull_error: float


# ---------------------------------------------------------------- primitives

def wrap_angle(angle: float) -> float:
    """Wrap to (-pi, pi]."""
    return -((-angle + math.pi) % (2.0 * math.pi) - math.pi)


def rotation_from_yaw(theta: float) -> np.ndarray:
    """Rotation about the camera y axis; roll and pitch are zero."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([
        [c, 0.0, s],
        [0.0, 1.0, 0.0],
        [-s, 0.0, c],
    ])


def vertex_index(sx: int, sy: int, sz: int) -> int:
    """Index of the vertex with the given half-extent signs."""
    return 4 * (sx < 0) + 2 * (sy < 0) + (sz < 0)


def is_upper_vertex(index: int) -> bool:
    """Upper vertices sit at y = -d_y/2 (y points down)."""
    return bool(index & 2)


def box_vertices(d: Sequence[float]) -> np.ndarray:
    """
    All 8 sign combinations of (±d_x/2, ±d_y/2, ±d_z/2), centred on the origin.

    Raises:
        ContractError: If any dimension is not positive.
    """
    d = np.asarray(d, dtype=np.float64).reshape(3)
    if not np.all(d > 0):
        raise ContractError(f"Box dimensions must be positive, got {d.tolist()}")
    signs = np.array(list(product([1.0, -1.0], repeat=3)))
    return signs * (d / 2.0)


def project(K: CameraIntrinsics, R: np.ndarray, T: Sequence[float], X: Sequence[float]) -> np.ndarray:
    """
    x = K [R T] X followed by perspective division.

    Raises:
        BehindCameraError: If the transformed point has non-positive depth.
    """
    point = np.asarray(R, dtype=np.float64) @ np.asarray(X, dtype=np.float64) + np.asarray(T, dtype=np.float64)
    if point[2] <= 0:
        raise BehindCameraError(f"Point at depth {point[2]:.3f} m is behind the camera")
    return np.array([K.fx * point[0] / point[2] + K.cx, K.fy * point[1] / point[2] + K.cy])


def project_points(K: CameraIntrinsics, points: np.ndarray) -> np.ndarray:
    """Project (..., 3) camera-frame points to (..., 2) pixels."""
    points = np.asarray(points, dtype=np.float64)
    if np.any(points[..., 2] <= 0):
        raise BehindCameraError("At least one point is behind the camera")
    u = K.fx * points[..., 0] / points[..., 2] + K.cx
    v = K.fy * points[..., 1] / points[..., 2] + K.cy
    return np.stack([u, v], axis=-1)


def project_box(K: CameraIntrinsics, box: Box3D) -> Box2D:
    """Axis-aligned hull of the 8 projected vertices."""
    pixels = project_points(K, box.corners())
    return Box2D(
        float(pixels[:, 0].min()),
        float(pixels[:, 1].min()),
        float(pixels[:, 0].max()),
        float(pixels[:, 1].max()),
    )


def ray_angle(K: CameraIntrinsics, u: float) -> float:
    """Horizontal angle of the back-projected ray through pixel column u."""
    return math.atan2(u - K.cx, K.fx)


def local_to_global_yaw(theta_local: float, theta_ray: float) -> float:
    return wrap_angle(theta_ray + theta_local)


def global_to_local_yaw(theta: float, theta_ray: float) -> float:
    return wrap_angle(theta - theta_ray)


# ---------------------------------------------------------------- configurations

@lru_cache(maxsize=1)
def _configurations() -> Tuple[VertexConfiguration, ...]:
    configs: List[VertexConfiguration] = []
    for n in range(4):
        prev_corner, next_corner = (n - 1) % 4, (n + 1) % 4
        opposite = (n + 2) % 4
        others = [c for c in range(4) if c != n]
        # (left, right) corner pairs: the nearest corner is an extreme, or sits between its neighbours
        pairs = [(n, x) for x in others] + [(x, n) for x in others]
        pairs += [(prev_corner, next_corner), (next_corner, prev_corner)]

        def lower(c: int) -> int:
            sx, sz = CORNER_SIGNS[c]
            return vertex_index(sx, 1, sz)

        def upper(c: int) -> int:
            sx, sz = CORNER_SIGNS[c]
            return vertex_index(sx, -1, sz)

        for top_corner in (n, opposite):
            for left_c, right_c in pairs:
                configs.append(VertexConfiguration(
                    left=lower(left_c),
                    right=lower(right_c),
                    top=upper(top_corner),
                    bottom=lower(n),
                    nearest_corner=n,
                ))
    return tuple(configs)


def enumerate_configurations() -> List[VertexConfiguration]:
    """The 64 vertex-to-side assignments admissible for an upright box above a flat road."""
    return list(_configurations())


@lru_cache(maxsize=1)
def _config_table() -> np.ndarray:
    return np.array([c.as_tuple() for c in _configurations()], dtype=np.int64)


def _constraint_matrix(K: CameraIntrinsics, box2d: Box2D) -> np.ndarray:
    du_min, du_max = box2d.x_min - K.cx, box2d.x_max - K.cx
    dv_min, dv_max = box2d.y_min - K.cy, box2d.y_max - K.cy
    return np.array([
        [K.fx, 0.0, -du_min],
        [K.fx, 0.0, -du_max],
        [0.0, K.fy, -dv_min],
        [0.0, K.fy, -dv_max],
    ])


def _constraint_rhs(K: CameraIntrinsics, box2d: Box2D, rotated: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Right-hand sides for rows (left, right, top, bottom); table is (C, 4) vertex indices."""
    du = np.array([box2d.x_min, box2d.x_max]) - K.cx
    dv = np.array([box2d.y_min, box2d.y_max]) - K.cy
    horizontal = rotated[table[:, :2]]
    vertical = rotated[table[:, 2:]]
    rhs_u = du * horizontal[..., 2] - K.fx * horizontal[..., 0]
    rhs_v = dv * vertical[..., 2] - K.fy * vertical[..., 1]
    return np.concatenate([rhs_u, rhs_v], axis=-1)


def _side_residuals(
    K: CameraIntrinsics, box2d: Box2D, rotated: np.ndarray, table: np.ndarray, T: np.ndarray
) -> np.ndarray:
    """Pixel error of each constrained vertex against its side; (C, 4)."""
    points = rotated[table] + T[:, None, :]
    depth = points[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * points[..., :2, 0] / depth[..., :2] + K.cx
        v = K.fy * points[..., 2:, 1] / depth[..., 2:] + K.cy
    return np.concatenate([
        u - np.array([box2d.x_min, box2d.x_max]),
        v - np.array([box2d.y_min, box2d.y_max]),
    ], axis=-1)


def solve_translation(
    K: CameraIntrinsics,
    yaw: float,
    d: Sequence[float],
    box2d: Box2D,
    config: VertexConfiguration,
    refine: bool = False,
) -> Tuple[np.ndarray, float]:
    """
    Solve the 4x3 linearised side constraints for T under one configuration.

    Each side equation "pixel = projected coordinate" is multiplied through by
    the vertex depth, giving one linear equation in (T_x, T_y, T_z).

    Returns:
        (T, residual) with the residual in pixels (root of summed squared side errors)

    Raises:
        DegenerateGeometryError: If the system is rank deficient.
    """
    rotated = box_vertices(d) @ rotation_from_yaw(yaw).T
    A = _constraint_matrix(K, box2d)
    table = np.array([config.as_tuple()], dtype=np.int64)
    b = _constraint_rhs(K, box2d, rotated, table)[0]
    T, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    if rank < 3:
        raise DegenerateGeometryError(f"Constraint system has rank {rank} for configuration {config.as_tuple()}")
    if refine:
        T = _refine(K, box2d, rotated, table, T)
    residual = float(np.linalg.norm(_side_residuals(K, box2d, rotated, table, T[None, :])[0]))
    return T, residual


def _refine(K: CameraIntrinsics, box2d: Box2D, rotated: np.ndarray, table: np.ndarray, T0: np.ndarray) -> np.ndarray:
    """Levenberg-Marquardt on the true reprojection error, started at the linear solution."""

    def residuals(params: np.ndarray) -> np.ndarray:
        return _side_residuals(K, box2d, rotated, table, params[None, :])[0]

    if np.any(rotated[table[0], 2] + T0[2] <= MIN_DEPTH):
        return T0
    result = least_squares(residuals, T0, method="lm")
    if not result.success or not np.all(np.isfinite(result.x)):
        logger.debug(f"Refinement did not converge ({result.message}); keeping linear solution")
        return T0
    return result.x


def _hull_errors(K: CameraIntrinsics, box2d: Box2D, corners: np.ndarray) -> np.ndarray:
    """Sum of absolute side errors between box2d and each candidate's projected hull."""
    depth = corners[..., 2]
    valid = np.all(depth > MIN_DEPTH, axis=-1)
    safe_depth = np.where(depth > MIN_DEPTH, depth, 1.0)
    u = K.fx * corners[..., 0] / safe_depth + K.cx
    v = K.fy * corners[..., 1] / safe_depth + K.cy
    error = (
        np.abs(u.min(axis=-1) - box2d.x_min)
        + np.abs(u.max(axis=-1) - box2d.x_max)
        + np.abs(v.min(axis=-1) - box2d.y_min)
        + np.abs(v.max(axis=-1) - box2d.y_max)
    )
    return np.where(valid, error, np.inf)


def recover_box3d_detailed(
    K: CameraIntrinsics,
    yaw: float,
    d: Sequence[float],
    box2d: Box2D,
    refine: bool = False,
) -> RecoveryResult:
    """
    Solve every configuration at once and keep the best reprojected hull.

    Candidates with any vertex behind the camera are discarded.

    Raises:
        ContractError: If a dimension is not positive.
        NoSolutionError: If no configuration yields a usable translation.
    """
    rotated = box_vertices(d) @ rotation_from_yaw(yaw).T
    A = _constraint_matrix(K, box2d)
    if np.linalg.matrix_rank(A) < 3:
        raise NoSolutionError(f"Every configuration is degenerate for box {box2d.as_array().tolist()}")

    table = _config_table()
    b = _constraint_rhs(K, box2d, rotated, table)
    solutions = b @ np.linalg.pinv(A).T
    corners = rotated[None, :, :] + solutions[:, None, :]
    hull_error = _hull_errors(K, box2d, corners)

    if not np.any(np.isfinite(hull_error)):
        raise NoSolutionError(
            f"No configuration places the box in front of the camera for {box2d.as_array().tolist()}"
        )

    best = int(np.argmin(hull_error))
    T = solutions[best]
    best_table = table[best:best + 1]
    if refine:
        T = _refine(K, box2d, rotated, best_table, T)
        hull_error[best] = float(_hull_errors(K, box2d, (rotated + T)[None])[0])
    residual = float(np.linalg.norm(_side_residuals(K, box2d, rotated, best_table, T[None, :])[0]))

    return RecoveryResult(
        box=Box3D(T, d, yaw),
        config_index=best,
        residual=residual,
        hull_error=float(hull_error[best]),
    )


def recover_box3d(
    K: CameraIntrinsics,
    yaw: float,
    d: Sequence[float],
    box2d: Box2D,
    refine: bool = False,
) -> Box3D:
    return recover_box3d_detailed(K, yaw, d, box2d, refine=refine).box


def realized_configuration(K: CameraIntrinsics, box: Box3D) -> VertexConfiguration:
    """The vertex touching each side of the projected box (ties go to the lowest index)."""
    pixels = project_points(K, box.corners())
    u, v = pixels[:, 0], pixels[:, 1]
    upper = [i for i in range(8) if is_upper_vertex(i)]
    lower = [i for i in range(8) if not is_upper_vertex(i)]
    return VertexConfiguration(
        left=int(lower[int(np.argmin(u[lower]))]),
        right=int(lower[int(np.argmax(u[lower]))]),
        top=int(upper[int(np.argmin(v[upper]))]),
        bottom=int(lower[int(np.argmax(v[lower]))]),
    )


# ---------------------------------------------------------------- iou

def iou3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU of two upright boxes: footprint polygon overlap x vertical overlap."""
    poly_a = Polygon(a.footprint())
    poly_b = Polygon(b.footprint())
    # y points down; the vertical extent is the y interval
    a_low, a_high = a.translation[1] - a.dimensions[1] / 2, a.translation[1] + a.dimensions[1] / 2
    b_low, b_high = b.translation[1] - b.dimensions[1] / 2, b.translation[1] + b.dimensions[1] / 2
    overlap = max(0.0, min(a_high, b_high) - max(a_low, b_low))
    area = poly_a.intersection(poly_b).area
    if area <= 0 or overlap <= 0:
        return 0.0
    inter = area * overlap
    union = float(np.prod(a.dimensions)) + float(np.prod(b.dimensions)) - inter
    return float(min(1.0, max(0.0, inter / union)))
