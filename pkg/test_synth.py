"""Tests for scenario scripting, the generator and the renderer."""
import math

import numpy as np
import pandas as pd
import pytest

from constants import PATCH_FEATURE_LEN, PATCH_SIZE, SCENARIO_PRESETS
from exceptions import InputError, ScenarioInvalidError
from geometry3d import Box3D, CameraIntrinsics, project_box, recover_box3d
from pose_regressor import NoiseSpec
from synth import (
    DETECTION_COLUMNS,
    Scenario,
    VehicleScript,
    apply_detection_noise,
    generate,
    generate_dataset,
    load_scenario,
    render,
    render_patch,
)
from track_assembly import assemble

K = CameraIntrinsics()
NO_JITTER = {"position": 0.0, "speed": 0.0, "dims": 0.0}


def _scenario(vehicles, **kwargs):
    return Scenario.from_dict({"name": "test", "vehicles": vehicles, "jitter": NO_JITTER, **kwargs})


def test_constant_velocity_advances():
    """v = (0, 20) m/s for 3 s covers 60 m."""
    scene = generate(_scenario([{"id": 1, "vy": 20.0}], duration_s=3.0), seed=0)
    track = scene.trajectories()
    assert track["y"].iloc[-1] - track["y"].iloc[0] == pytest.approx(60.0)
    assert len(track) == 7


def test_ego_speed_is_subtracted():
    """Positions are relative to an ego moving at ego_speed."""
    script = VehicleScript(id=1, y0=20.0, vy=25.0)
    _, y, _ = script.kinematics(np.array([0.0, 2.0]), ego_speed=25.0)
    np.testing.assert_allclose(y, [20.0, 20.0])


def test_lane_change_endpoint():
    """A 3.5 m logistic lane change over 4 s ends exactly one lane over."""
    script = VehicleScript(id=1, motion="lane_change", lane_offset=3.5, start_s=1.0, duration_s=4.0, vy=20.0)
    x, _, heading = script.kinematics(np.array([0.0, 1.0, 3.0, 5.0, 8.0]), ego_speed=20.0)
    assert x[0] == 0.0 and x[1] == 0.0
    assert x[2] == pytest.approx(1.75)
    assert abs(x[3] - 3.5) < 1e-9
    assert abs(x[4] - 3.5) < 1e-9
    # mid-manoeuvre the heading turns away from straight ahead
    assert heading[2] != pytest.approx(-math.pi / 2)
    assert heading[4] == pytest.approx(-math.pi / 2)


def test_constant_acceleration_only_applies_to_its_motion():
    accelerating = VehicleScript(id=1, motion="constant_acceleration", vy=10.0, ay=2.0, y0=0.0)
    cruising = VehicleScript(id=2, vy=10.0, ay=2.0, y0=0.0)
    t = np.array([2.0])
    assert accelerating.kinematics(t, 0.0)[1][0] == pytest.approx(24.0)
    assert cruising.kinematics(t, 0.0)[1][0] == pytest.approx(20.0)


def test_generate_is_deterministic_per_seed():
    scenario = load_scenario("platoon-3")
    first = generate(scenario, seed=11).table
    pd.testing.assert_frame_equal(first, generate(scenario, seed=11).table)
    assert not first.equals(generate(scenario, seed=12).table)


def test_generate_rejects_collisions():
    with pytest.raises(ScenarioInvalidError) as err:
        generate(_scenario([{"id": 1, "y0": 20.0}, {"id": 2, "y0": 21.0}]), seed=0)
    assert "1 and 2" in str(err.value)


@pytest.mark.parametrize("payload", [
    {"vehicles": []},
    {"vehicles": [{"id": 1, "motion": "teleport"}]},
    {"vehicles": [{"id": 1, "wings": 2}]},
    {"vehicles": [{"id": 1}, {"id": 1, "y0": 40.0}]},
    {"vehicles": [{"id": 1, "dims": [4.5, 0.0, 1.6]}]},
    {"vehicles": [{"y0": 10.0}]},
])
def test_invalid_scenarios(payload):
    with pytest.raises(ScenarioInvalidError):
        Scenario.from_dict(payload)


def test_scenario_camera_overrides():
    scenario = _scenario([{"id": 1}], camera={"fx": 800.0, "mount_height": 1.2})
    assert scenario.camera.fx == 800.0
    assert scenario.camera.cx == K.cx
    assert scenario.mount_height == 1.2
    assert scenario.jitter == NO_JITTER


@pytest.mark.parametrize("name", SCENARIO_PRESETS)
def test_presets_generate(name):
    """Every shipped preset is collision free and yields gap-free tracks."""
    scenario = load_scenario(name)
    scene = generate(scenario, seed=0)
    tracks = assemble(scene.trajectories())
    assert len(tracks.track_ids) == len(scenario.vehicles)
    for track_id in tracks.track_ids:
        assert len(tracks.track(track_id)) == scenario.n_frames


def test_load_scenario_missing():
    with pytest.raises(InputError) as err:
        load_scenario("no-such-scenario.json")
    assert "no-such-scenario.json" in str(err.value)


def test_render_optical_axis_is_centred():
    """A yaw-0 box on the optical axis projects around the principal point."""
    (item,) = render([(1, Box3D((0.0, 0.0, 20.0), (4.5, 1.8, 1.6), 0.0))], K, with_patches=False)
    assert item.visible and not item.truncated
    b = item.box2d
    assert (b.x_min + b.x_max) / 2 == pytest.approx(K.cx)
    assert (b.y_min + b.y_max) / 2 == pytest.approx(K.cy)


def test_render_width_halves_with_depth():
    near = render([(1, Box3D((0.0, 0.6, 50.0), (4.5, 1.8, 1.6), 0.0))], K, with_patches=False)[0].box2d
    far = render([(1, Box3D((0.0, 0.6, 100.0), (4.5, 1.8, 1.6), 0.0))], K, with_patches=False)[0].box2d
    assert far.width / near.width == pytest.approx(0.5, rel=0.01)


def test_render_hull_matches_projection_and_recovers():
    """Rendered boxes equal the projected hull and recover their 3D box."""
    scene = generate(load_scenario("lane-change"), seed=3)
    checked = 0
    for frame in (0, 10, 20):
        for item in render(scene.boxes(frame), K, with_patches=False):
            if not item.visible or item.truncated:
                continue
            hull = project_box(K, item.truth)
            np.testing.assert_allclose(item.box2d.as_array(), hull.as_array(), atol=0.5)
            recovered = recover_box3d(K, item.truth.yaw, item.truth.dimensions, item.box2d)
            assert np.linalg.norm(recovered.translation - item.truth.translation) < 1e-5
            checked += 1
    assert checked > 0


def test_render_visibility_flags():
    """Behind-camera and off-image boxes are invisible; a border-crossing box is clipped."""
    behind = Box3D((0.0, 0.6, 1.0), (4.5, 1.8, 1.6), -math.pi / 2)
    off_image = Box3D((200.0, 0.6, 20.0), (4.5, 1.8, 1.6), 0.0)
    border = Box3D((19.0, 0.6, 20.0), (4.5, 1.8, 1.6), 0.0)
    items = render([(1, behind), (2, off_image), (3, border)], K, with_patches=False)
    assert [i.reason for i in items] == ["behind_camera", "off_image", "truncated"]
    assert not items[0].visible and not items[1].visible
    assert items[2].visible and items[2].box2d.x_max == K.width


def test_render_patch_is_shaded_silhouette():
    box = Box3D((2.0, 0.6, 15.0), (4.5, 1.8, 1.6), -1.2)
    patch = render_patch(box, project_box(K, box), K)
    assert patch.shape == (PATCH_SIZE, PATCH_SIZE)
    assert patch.min() >= 0.0 and patch.max() <= 1.0
    assert patch.max() > 0.0
    assert len(np.unique(np.round(patch, 3))) > 2


def test_generate_dataset_repeats_are_disjoint():
    """Each repeat gets its own frame block and track ids; patches have 259 features."""
    scenario = load_scenario("platoon-3")
    dataset = generate_dataset(scenario, seed=5, repeats=2, with_patches=True)
    tracks = assemble(dataset.trajectories)
    assert len(tracks.track_ids) == 6
    assert dataset.trajectories["frame"].max() == 2 * scenario.n_frames
    assert list(dataset.detections.columns) == DETECTION_COLUMNS
    assert dataset.patches.shape[1] == 2 + PATCH_FEATURE_LEN
    assert len(dataset.patches) == len(dataset.detections)
    assert len(dataset.ground_truth) == 6 * scenario.n_frames


def test_generate_dataset_rejects_zero_repeats():
    with pytest.raises(InputError):
        generate_dataset(load_scenario("platoon-3"), seed=0, repeats=0)


def test_detection_noise_keeps_boxes_valid():
    """Noisy sides stay ordered at least a pixel apart; yaw stays wrapped."""
    detections = pd.DataFrame(
        [[0, 1, 100.0, 100.0, 100.5, 100.5, 4.5, 1.8, 1.6, 3.1]] * 200, columns=DETECTION_COLUMNS
    )
    noisy = apply_detection_noise(detections, NoiseSpec(dim_sigma=0.5, theta_sigma=0.5, pixel_sigma=3.0),
                                  np.random.default_rng(0))
    assert np.all(noisy["xmax"] - noisy["xmin"] >= 1.0 - 1e-12)
    assert np.all(noisy["ymax"] - noisy["ymin"] >= 1.0 - 1e-12)
    assert np.all(np.abs(noisy["theta_local"]) <= math.pi)
    assert np.all(noisy[["dx", "dy", "dz"]].to_numpy() >= 0.1)
    assert noisy["theta_local"].std() > 0.1
