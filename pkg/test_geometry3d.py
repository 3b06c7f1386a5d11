"""Unit tests for projection, configuration enumeration and 3D box recovery."""
import math

import numpy as np
import pytest

from exceptions import BehindCameraError, ContractError, MalformedInputError
from geometry3d import (
    Box2D,
    Box3D,
    CameraIntrinsics,
    box_vertices,
    enumerate_configurations,
    global_to_local_yaw,
    iou3d,
    is_upper_vertex,
    local_to_global_yaw,
    project,
    project_box,
    ray_angle,
    realized_configuration,
    recover_box3d,
    recover_box3d_detailed,
    rotation_from_yaw,
    solve_translation,
    wrap_angle,
)

K = CameraIntrinsics()


def _random_road_box(rng):
    """A car-sized upright box standing on a road 1.5 m below the camera, fully in view."""
    while True:
        dims = np.array([4.5, 1.8, 1.6]) * rng.uniform(0.8, 1.2, size=3)
        depth = rng.uniform(5.0, 60.0)
        box = Box3D((rng.uniform(-0.5, 0.5) * depth, 1.5 - dims[1] / 2, depth), dims, rng.uniform(-math.pi, math.pi))
        if box.corners()[:, 2].min() < 1.0:
            continue
        hull = project_box(K, box)
        if hull.x_min > 1 and hull.y_min > 1 and hull.x_max < K.width - 1 and hull.y_max < K.height - 1:
            return box, hull


def test_rotation_from_yaw():
    """Zero yaw is the identity; any yaw is orthonormal and matches an angle-axis construction."""
    np.testing.assert_allclose(rotation_from_yaw(0.0), np.eye(3))
    R = rotation_from_yaw(math.pi / 2)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)

    theta = 0.83
    axis = np.array([0.0, 1.0, 0.0])
    skew = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    rodrigues = np.eye(3) + math.sin(theta) * skew + (1 - math.cos(theta)) * skew @ skew
    np.testing.assert_allclose(rotation_from_yaw(theta), rodrigues, atol=1e-12)


def test_box_vertices():
    """Vertices are the sign combinations of the half extents, centred on the origin."""
    cube = box_vertices((2, 2, 2))
    assert {tuple(v) for v in cube} == {(sx, sy, sz) for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)}
    np.testing.assert_allclose(box_vertices((4.5, 1.8, 1.6)).mean(axis=0), 0.0)
    np.testing.assert_allclose(box_vertices((4.5, 1.8, 1.6))[0], [2.25, 0.9, 0.8])


def test_box_vertices_rejects_flat_box():
    """A zero dimension violates the contract."""
    with pytest.raises(ContractError):
        box_vertices((0.0, 1.0, 1.0))
    with pytest.raises(ContractError):
        recover_box3d(K, 0.0, (0.0, 1.8, 1.6), Box2D(900, 500, 1000, 600))


def test_project_examples():
    """Optical axis and similar triangles."""
    unit = CameraIntrinsics(fx=1, fy=1, cx=0, cy=0)
    np.testing.assert_allclose(project(unit, np.eye(3), np.zeros(3), (0, 0, 5)), [0, 0])
    np.testing.assert_allclose(project(unit, np.eye(3), np.zeros(3), (1, 0, 2)), [0.5, 0])


def test_project_matches_homogeneous_oracle():
    """Projection equals the 3x4 matrix product followed by division."""
    rng = np.random.default_rng(0)
    for _ in range(20):
        R = rotation_from_yaw(rng.uniform(-math.pi, math.pi))
        T = np.array([rng.uniform(-3, 3), rng.uniform(-1, 2), rng.uniform(10, 40)])
        X = rng.uniform(-2, 2, size=3)
        homogeneous = K.matrix @ np.hstack([R, T[:, None]]) @ np.append(X, 1.0)
        np.testing.assert_allclose(project(K, R, T, X), homogeneous[:2] / homogeneous[2], atol=1e-9)


def test_project_behind_camera():
    """A point with non-positive depth cannot be projected."""
    with pytest.raises(BehindCameraError):
        project(K, np.eye(3), np.zeros(3), (0, 0, -1))


def test_yaw_conversions():
    """Local plus ray angle gives global yaw, wrapped to (-pi, pi]."""
    assert local_to_global_yaw(0.3, 0.2) == pytest.approx(0.5)
    assert local_to_global_yaw(math.pi, math.pi) == pytest.approx(0.0, abs=1e-12)
    assert global_to_local_yaw(local_to_global_yaw(1.1, -0.4), -0.4) == pytest.approx(1.1)
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)


def test_ray_angle():
    """Principal ray, unit tangent and agreement with the direction of a back-projected ray."""
    assert ray_angle(K, K.cx) == 0.0
    assert ray_angle(K, K.cx + K.fx) == pytest.approx(math.pi / 4)
    u = 1500.0
    direction = np.linalg.inv(K.matrix) @ np.array([u, K.cy, 1.0])
    assert ray_angle(K, u) == pytest.approx(math.atan2(direction[0], direction[2]))


def test_enumerate_configurations():
    """64 distinct configurations; top is an upper vertex and bottom a lower one."""
    configs = enumerate_configurations()
    assert len(configs) == 64
    assert len({c.as_tuple() for c in configs}) == 64
    for c in configs:
        assert is_upper_vertex(c.top)
        assert not is_upper_vertex(c.bottom)
        assert c.left != c.right


def test_realized_configuration_is_enumerated():
    """The configuration produced by true projection is always in the set."""
    rng = np.random.default_rng(1)
    admissible = {c.as_tuple() for c in enumerate_configurations()}
    for _ in range(200):
        box, _ = _random_road_box(rng)
        assert realized_configuration(K, box).as_tuple() in admissible


def test_solve_translation_with_true_configuration():
    """Noise-free render then solve recovers T; the residual at the truth is ~0."""
    truth = Box3D((1.0, 0.6, 20.0), (4.5, 1.8, 1.6), 0.2)
    box2d = project_box(K, truth)
    config = realized_configuration(K, truth)
    T, residual = solve_translation(K, truth.yaw, truth.dimensions, box2d, config)
    assert np.linalg.norm(T - truth.translation) < 1e-6
    assert residual < 1e-6


def test_solve_translation_symmetric_box():
    """A box centred on the optical axis with zero yaw recovers T_x = 0."""
    truth = Box3D((0.0, 0.6, 15.0), (4.5, 1.8, 1.6), 0.0)
    box2d = project_box(K, truth)
    T, _ = solve_translation(K, 0.0, truth.dimensions, box2d, realized_configuration(K, truth))
    assert abs(T[0]) < 1e-8


def test_recover_box3d_round_trip():
    """Render -> recover over random boxes is exact and reproduces the 2D box."""
    rng = np.random.default_rng(2)
    errors, hull_errors = [], []
    for _ in range(200):
        truth, hull = _random_road_box(rng)
        result = recover_box3d_detailed(K, truth.yaw, truth.dimensions, hull)
        errors.append(np.linalg.norm(result.box.translation - truth.translation))
        hull_errors.append(np.abs(project_box(K, result.box).as_array() - hull.as_array()).max())
        assert 0 <= result.config_index < 64
    assert np.median(errors) < 1e-5
    assert np.quantile(errors, 0.95) < 1e-3
    assert np.max(hull_errors) < 1e-6


def test_recover_with_refinement_matches_linear_solution():
    """Levenberg-Marquardt polishing keeps an exact solution exact."""
    truth = Box3D((-2.0, 0.6, 25.0), (4.2, 1.6, 1.7), -1.0)
    box = recover_box3d(K, truth.yaw, truth.dimensions, project_box(K, truth), refine=True)
    np.testing.assert_allclose(box.translation, truth.translation, atol=1e-6)


def test_recover_error_grows_with_noise_and_depth():
    """With pixel and yaw noise, far boxes are localised worse than near ones."""
    rng = np.random.default_rng(3)

    def mean_error(depth):
        errors = []
        for _ in range(40):
            truth = Box3D((rng.uniform(-2, 2), 0.6, depth), (4.5, 1.8, 1.6), rng.uniform(-math.pi, math.pi))
            sides = project_box(K, truth).as_array() + rng.normal(0, 2.0, size=4)
            noisy = Box2D(sides[0], sides[1], sides[2], sides[3])
            box = recover_box3d(K, truth.yaw + rng.normal(0, math.radians(5)), truth.dimensions, noisy)
            errors.append(np.linalg.norm(box.translation - truth.translation))
        return np.mean(errors)

    assert mean_error(10.0) < mean_error(50.0)


def test_box2d_rejects_degenerate_rectangle():
    """x_min must be below x_max."""
    with pytest.raises(ContractError):
        Box2D(10, 10, 5, 20)


def test_camera_from_dict_requires_focal_lengths():
    """Missing intrinsics are a malformed input."""
    with pytest.raises(MalformedInputError):
        CameraIntrinsics.from_dict({"fx": 1000})


def test_iou3d_examples():
    """Identical, disjoint and half-overlapping boxes."""
    a = Box3D((0.0, 0.0, 20.0), (4.0, 2.0, 2.0), 0.0)
    assert iou3d(a, a) == pytest.approx(1.0)
    far = Box3D((0.0, 0.0, 40.0), (4.0, 2.0, 2.0), 0.0)
    assert iou3d(a, far) == 0.0
    shifted = Box3D((2.0, 0.0, 20.0), (4.0, 2.0, 2.0), 0.0)
    assert iou3d(a, shifted) == pytest.approx(1 / 3)


def test_iou3d_matches_scalar_oracle():
    """Axis-aligned boxes agree with an interval-product oracle."""
    rng = np.random.default_rng(4)
    for _ in range(100):
        boxes = [
            Box3D(rng.uniform(-2, 2, size=3) + [0, 0, 20], rng.uniform(1, 4, size=3), 0.0)
            for _ in range(2)
        ]
        overlap = 1.0
        for axis in range(3):
            lo = max(b.translation[axis] - b.dimensions[axis] / 2 for b in boxes)
            hi = min(b.translation[axis] + b.dimensions[axis] / 2 for b in boxes)
            overlap *= max(0.0, hi - lo)
        union = sum(np.prod(b.dimensions) for b in boxes) - overlap
        assert iou3d(*boxes) == pytest.approx(overlap / union, abs=1e-12)
