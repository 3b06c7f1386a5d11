"""Tests for the loss, the optimiser, the training loop, metrics and ablations."""
import json
import math

import numpy as np
import pytest

import tensor_core as tc
from exceptions import ConfigurationError, ContractError, DimensionError, DivergenceError
from geometry3d import Box3D
from stmha_net import ModelConfig, ModelWeights, TrajectoryModel, weight_shapes
from tensor_core import Tensor
from track_assembly import ScaleSpec, TrajectoryWindow
from training import (
    AblationDataset,
    AdamState,
    EvalReport,
    TrainConfig,
    ablation_table,
    adam_step,
    constant_velocity_baseline,
    evaluate,
    fit_scale,
    load_run_config,
    mde_iou_vs_distance,
    mse_loss,
    rmse_by_horizon,
    run_ablation,
    train,
)

TOY = ModelConfig(d_model=8, n_heads=4, n_layers=1, d_ff=8, lstm_hidden=4, pe_hidden=4, t_steps=3, f_steps=2)


def _line_window(k, speed=2.0, lateral=0.0, t_steps=3, f_steps=2):
    """Two vehicles driving straight at constant speed, 10 m apart."""
    t = np.arange(t_steps + f_steps, dtype=np.float64)
    lead = np.stack([np.full_like(t, lateral), 10.0 + k + speed * t], axis=-1)
    follower = np.stack([np.full_like(t, lateral + 3.5), k + speed * t], axis=-1)
    xy = np.stack([lead, follower], axis=1)
    return TrajectoryWindow(
        past=xy[:t_steps],
        future=xy[t_steps:],
        presence=np.ones((t_steps + f_steps, 2), dtype=bool),
        vehicle_ids=[1, 2],
        frames=list(range(k, k + t_steps + f_steps)),
        target_id=1,
        window_id=k,
    )


def _zero_model(windows):
    weights = ModelWeights.from_arrays({name: np.zeros(shape) for name, shape in weight_shapes(TOY).items()})
    return TrajectoryModel(TOY, weights, fit_scale(windows))


def test_mse_loss_examples():
    """Zero at the truth; one entry off by (3, 4) contributes 25."""
    gt = np.zeros((2, 3, 2))
    mask = np.zeros((2, 3), dtype=bool)
    mask[1, 2] = True
    assert mse_loss(Tensor(gt), gt, np.ones((2, 3), dtype=bool)).item() == 0.0
    pred = gt.copy()
    pred[1, 2] = [3.0, 4.0]
    assert mse_loss(Tensor(pred), gt, mask).item() == pytest.approx(25.0)


def test_mse_loss_matches_scalar_loop():
    rng = np.random.default_rng(0)
    pred, gt = rng.normal(size=(4, 5, 2)), rng.normal(size=(4, 5, 2))
    mask = rng.uniform(size=(4, 5)) > 0.3
    total, count = 0.0, 0
    for i in range(4):
        for j in range(5):
            if mask[i, j]:
                total += (pred[i, j, 0] - gt[i, j, 0]) ** 2 + (pred[i, j, 1] - gt[i, j, 1]) ** 2
                count += 1
    assert mse_loss(Tensor(pred), gt, mask).item() == pytest.approx(total / count, rel=1e-12)


def test_mse_loss_rejects_empty_mask_and_bad_shapes():
    with pytest.raises(ContractError):
        mse_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 2)), np.zeros(2, dtype=bool))
    with pytest.raises(DimensionError):
        mse_loss(Tensor(np.zeros((2, 2))), np.zeros((3, 2)), np.ones(3, dtype=bool))


def test_mse_loss_ignores_masked_nan_targets():
    """Absent ground truth never reaches the loss or its gradient."""
    pred = Tensor(np.zeros((2, 2)), requires_grad=True)
    gt = np.array([[1.0, 0.0], [np.nan, np.nan]])
    loss = mse_loss(pred, gt, np.array([True, False]))
    tc.backward(loss)
    assert loss.item() == pytest.approx(1.0)
    assert np.all(np.isfinite(pred.grad))


def test_adam_zero_gradient_is_fixed_point():
    """Weights stay put while the moments decay."""
    weights = ModelWeights.from_arrays({"w": np.array([1.0, -2.0])})
    state = AdamState(step=3, m={"w": np.zeros(2)}, v={"w": np.array([1.0, 4.0])})
    new_weights, new_state = adam_step(weights, {"w": np.zeros(2)}, state, TrainConfig())
    np.testing.assert_array_equal(new_weights["w"].data, [1.0, -2.0])
    np.testing.assert_array_equal(new_state.m["w"], 0.0)
    np.testing.assert_allclose(new_state.v["w"], [0.999, 4 * 0.999])
    assert new_state.step == 4


def test_adam_zero_gradient_from_fresh_state():
    weights = ModelWeights.from_arrays({"w": np.array([1.0, -2.0])})
    new_weights, _ = adam_step(weights, {"w": None}, AdamState.zeros(weights), TrainConfig())
    np.testing.assert_array_equal(new_weights["w"].data, [1.0, -2.0])


def test_adam_constant_gradient_step_is_learning_rate():
    """Under a constant gradient every bias-corrected step moves by about lr against its sign."""
    config = TrainConfig(learning_rate=1e-3)
    weights = ModelWeights.from_arrays({"w": np.array([0.0, 0.0])})
    state = AdamState.zeros(weights)
    for _ in range(50):
        before = weights["w"].data.copy()
        weights, state = adam_step(weights, {"w": np.array([2.0, -0.5])}, state, config)
        step = weights["w"].data - before
        np.testing.assert_allclose(step, [-1e-3, 1e-3], rtol=1e-4)


def test_adam_converges_on_quadratic_bowl():
    """f(x, y) = (x - 3)^2 + 10 (y + 1)^2 reaches its minimum."""
    config = TrainConfig(learning_rate=1e-2)
    weights = ModelWeights.from_arrays({"p": np.array([0.0, 0.0])})
    state = AdamState.zeros(weights)
    for _ in range(5000):
        x, y = weights["p"].data
        grad = np.array([2 * (x - 3), 20 * (y + 1)])
        weights, state = adam_step(weights, {"p": grad}, state, config)
    np.testing.assert_allclose(weights["p"].data, [3.0, -1.0], atol=1e-3)


def test_adam_nan_gradient_names_weight():
    weights = ModelWeights.from_arrays({"a": np.zeros(2), "b": np.zeros(2)})
    with pytest.raises(DivergenceError) as err:
        adam_step(weights, {"a": np.zeros(2), "b": np.array([np.nan, 0.0])}, AdamState.zeros(weights), TrainConfig())
    assert err.value.weight_name == "b"


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(tf_ratio=1.5)
    with pytest.raises(ConfigurationError):
        TrainConfig(learning_rate=0.0)


def test_load_run_config_sections():
    model_config, train_config = load_run_config({"model": {"d_model": 16}, "train": {"epochs": 3}})
    assert model_config.d_model == 16
    assert train_config.epochs == 3
    assert train_config.batch_size == 32
    with pytest.raises(ConfigurationError):
        load_run_config({"optimizer": {}})
    with pytest.raises(ConfigurationError):
        load_run_config({"train": {"momentum": 0.9}})


def test_train_is_deterministic(tmp_path):
    """Two runs with one seed give bit-identical loss curves; a checkpoint is kept."""
    windows = [_line_window(k) for k in range(6)]
    config = TrainConfig(epochs=2, batch_size=4, seed=3, learning_rate=1e-2)

    def run(directory):
        model = TrajectoryModel.create(TOY, fit_scale(windows), np.random.default_rng(3))
        return train(model, windows, config, checkpoint_dir=directory)

    first = run(tmp_path / "a")
    second = run(tmp_path / "b")
    assert first.losses == second.losses
    assert len(first.losses) == 2
    checkpoint = json.loads((tmp_path / "a" / "checkpoint.json").read_text())
    assert checkpoint["epoch"] == 2
    assert first.loss_curve()["epoch"].tolist() == [1, 2]


def test_train_reduces_loss():
    """A few epochs on straight-line windows lower the training loss."""
    windows = [_line_window(k, speed=1.0 + 0.1 * k) for k in range(8)]
    model = TrajectoryModel.create(TOY, fit_scale(windows), np.random.default_rng(0))
    result = train(model, windows, TrainConfig(epochs=40, batch_size=8, seed=0, learning_rate=1e-2, tf_ratio=0.0))
    assert result.losses[-1] < result.losses[0]


def test_train_aborts_on_non_finite_loss(tmp_path):
    """A NaN target stops training with a checkpoint on disk."""
    bad = _line_window(0)
    bad.future[0, 0] = np.nan
    model = TrajectoryModel.create(TOY, ScaleSpec([0.0, 0.0], [0.05, 0.05]), np.random.default_rng(0))
    with pytest.raises(DivergenceError):
        train(model, [bad], TrainConfig(epochs=1, batch_size=1), checkpoint_dir=tmp_path)
    assert (tmp_path / "checkpoint.json").exists()


def test_rmse_examples():
    """Perfect predictions give 0; a constant 1 m lateral offset gives 1 at every horizon."""
    gts = np.random.default_rng(1).normal(size=(3, 10, 2, 2))
    mask = np.ones((3, 10, 2), dtype=bool)
    assert all(v == 0.0 for v in rmse_by_horizon(gts, gts, mask).values())
    shifted = gts + np.array([1.0, 0.0])
    for value in rmse_by_horizon(shifted, gts, mask).values():
        assert value == pytest.approx(1.0)


def test_rmse_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    preds, gts = rng.normal(size=(4, 10, 3, 2)), rng.normal(size=(4, 10, 3, 2))
    mask = rng.uniform(size=(4, 10, 3)) > 0.25
    result = rmse_by_horizon(preds, gts, mask)
    for seconds in (1, 2, 3, 4, 5):
        k = int(seconds / 0.5) - 1
        total, count = 0.0, 0
        for b in range(4):
            for n in range(3):
                if mask[b, k, n]:
                    total += (preds[b, k, n, 0] - gts[b, k, n, 0]) ** 2 + (preds[b, k, n, 1] - gts[b, k, n, 1]) ** 2
                    count += 1
        assert result[seconds] == pytest.approx(math.sqrt(total / count), abs=1e-12)


def test_rmse_horizon_beyond_future_is_nan():
    values = np.zeros((1, 2, 1, 2))
    result = rmse_by_horizon(values, values, np.ones((1, 2, 1), dtype=bool))
    assert result[1] == 0.0
    assert math.isnan(result[2])


def test_constant_velocity_straight_line_is_exact():
    win = _line_window(0, t_steps=6, f_steps=10)
    predicted = constant_velocity_baseline(win.past, win.past_presence, 10)
    np.testing.assert_allclose(predicted, win.future, atol=1e-12)


def test_constant_velocity_error_grows_quadratically():
    """Under constant acceleration a the error k steps ahead is a k (k + 1) / 2."""
    a = 0.4
    t = np.arange(16, dtype=np.float64)
    track = np.stack([np.zeros_like(t), 0.5 * a * t ** 2], axis=-1)[:, None, :]
    predicted = constant_velocity_baseline(track[:6], np.ones((6, 1), dtype=bool), 10)
    errors = np.abs(predicted[:, 0, 1] - track[6:, 0, 1])
    k = np.arange(1, 11)
    np.testing.assert_allclose(errors, 0.5 * a * k * (k + 1))


def test_constant_velocity_single_observation_holds_position():
    past = np.zeros((3, 1, 2))
    past[2, 0] = [1.0, 5.0]
    present = np.array([[False], [False], [True]])
    predicted = constant_velocity_baseline(past, present, 4)
    np.testing.assert_allclose(predicted[:, 0], np.tile([1.0, 5.0], (4, 1)))


def test_constant_velocity_skips_absent_steps():
    """The velocity comes from the last two present samples over their step distance."""
    past = np.array([[[0.0, 0.0]], [[0.0, 2.0]], [[0.0, 0.0]], [[0.0, 6.0]]])
    present = np.array([[True], [True], [False], [True]])
    predicted = constant_velocity_baseline(past, present, 2)
    np.testing.assert_allclose(predicted[:, 0, 1], [8.0, 10.0])


def test_mde_iou_perfect_estimates():
    truths = [Box3D((0.0, 0.6, z), (4.5, 1.8, 1.6), 0.1) for z in (7.0, 12.0, 30.0)]
    table = mde_iou_vs_distance(truths, truths)
    assert table["distance_bin"].tolist() == [5.0, 10.0, 30.0]
    np.testing.assert_allclose(table["mde"], 0.0)
    np.testing.assert_allclose(table["iou"], 1.0)


def test_mde_iou_empty_and_mismatched():
    assert mde_iou_vs_distance([], []).empty
    truth = Box3D((0.0, 0.6, 10.0), (4.5, 1.8, 1.6), 0.0)
    with pytest.raises(ContractError):
        mde_iou_vs_distance([truth], [])


def test_evaluate_unscales_exactly_once():
    """A zero-weight model holds the last position; its RMSE matches a hand computation in metres."""
    windows = [_line_window(k, speed=3.0) for k in range(4)]
    report = evaluate(_zero_model(windows), windows)
    # one second ahead is the second future step: 2 steps of 3 m
    assert report.rmse[1] == pytest.approx(6.0)
    assert report.baseline_rmse[1] == pytest.approx(0.0, abs=1e-12)
    assert math.isnan(report.rmse[2])
    assert report.n_windows == 4


def test_eval_report_write(tmp_path):
    report = EvalReport(rmse={1: 0.5, 2: float("nan")}, baseline_rmse={1: 1.0, 2: 2.0}, n_windows=3)
    report.write(tmp_path)
    payload = json.loads((tmp_path / "eval_report.json").read_text())
    assert payload["rmse"] == {"1": 0.5, "2": None}
    assert (tmp_path / "rmse_by_horizon.csv").read_text().splitlines()[0] == "horizon_s,rmse"


def test_ablation_smoke_all_variants():
    """Every variant trains and evaluates on a 10-window set; EST has fewer parameters."""
    truth = [_line_window(k, speed=1.0 + 0.05 * k) for k in range(10)]
    rng = np.random.default_rng(0)
    observed = []
    for w in truth:
        noisy = w.past + rng.normal(0, 0.3, size=w.past.shape)
        observed.append(TrajectoryWindow(noisy, w.future, w.presence, w.vehicle_ids, w.frames, w.target_id, w.window_id))
    dataset = AblationDataset(truth[:7], truth[7:], observed[:7], observed[7:])
    config = TrainConfig(epochs=1, batch_size=4, seed=0)
    reports = {v: run_ablation(v, dataset, TOY, config) for v in ("control", "tp", "est", "dst", "vlstm")}
    for report in reports.values():
        assert report.n_windows == 3
        assert report.rmse[1] >= 0
    assert reports["est"].parameter_count < reports["control"].parameter_count
    assert reports["vlstm"].parameter_count < reports["dst"].parameter_count

    table = ablation_table(reports)
    control_row = table[table["variant"] == "control"].iloc[0]
    assert control_row["variant_vs_control_pct"] == pytest.approx(0.0)


def test_noisy_geometry_orders_tp_control_and_baseline():
    """
    With pasts corrupted by 20 m of position noise, ground-truth pasts win at
    every horizon, and the trained control model still beats constant-velocity
    extrapolation of the same noisy pasts.
    """
    config = ModelConfig.from_dict({**TOY.to_dict(), "f_steps": 4})
    truth = [_line_window(k, speed=1.0 + 0.1 * k, f_steps=4) for k in range(12)]
    rng = np.random.default_rng(5)
    observed = [
        TrajectoryWindow(w.past + rng.normal(0, 20.0, size=w.past.shape), w.future, w.presence,
                         w.vehicle_ids, w.frames, w.target_id, w.window_id)
        for w in truth
    ]
    dataset = AblationDataset(truth[:9], truth[9:], observed[:9], observed[9:])
    train_config = TrainConfig(epochs=30, batch_size=4, seed=0, learning_rate=1e-2)
    tp = run_ablation("tp", dataset, config, train_config)
    control = run_ablation("control", dataset, config, train_config)

    horizons = [h for h, v in control.rmse.items() if math.isfinite(v)]
    assert horizons == [1, 2]
    for h in horizons:
        assert tp.rmse[h] <= control.rmse[h]
        assert control.rmse[h] < control.baseline_rmse[h]


def test_ablation_table_reports_both_directions():
    """Double the control RMSE reads +100 % one way and -50 % the other."""
    control = EvalReport(rmse={1: 1.0, 2: 2.0}, baseline_rmse={}, n_windows=1)
    worse = EvalReport(rmse={1: 2.0, 2: 4.0}, baseline_rmse={}, n_windows=1, variant="dst")
    table = ablation_table({"control": control, "dst": worse}).set_index("variant")
    assert table.loc["dst", "variant_vs_control_pct"] == pytest.approx(100.0)
    assert table.loc["dst", "control_vs_variant_pct"] == pytest.approx(-50.0)
    with pytest.raises(ContractError):
        ablation_table({"dst": worse})


def test_run_ablation_rejects_unknown_variant():
    truth = [_line_window(0)]
    dataset = AblationDataset(truth, truth, truth, truth)
    with pytest.raises(ConfigurationError):
        run_ablation("xyz", dataset, TOY, TrainConfig(epochs=1))
