"""TP vs control vs constant velocity under noisy geometry.

Mixed scenes (platoons, lane changes, cut-ins, merges) are rendered with
2 px box noise, 0.1 m dimension noise and 0.05 rad yaw noise, localised from
the noisy detections and cut into windows. TP trains and tests on
ground-truth pasts, control on the recovered pasts; both share seeds and the
3/4 train split. Prints RMSE per horizon for TP, control and the
constant-velocity baseline on the control test windows. Exits 1 unless TP is
at or below control at every horizon and control is below the baseline.
Output: analysis/noisy_geometry_benchmark.csv
"""
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import pandas as pd

from logging_config import setup_logging
from pipeline import ablation_dataset, build_windows, estimate_poses, solve_detections
from pose_regressor import NoiseSpec
from stmha_net import ModelConfig
from synth import generate_dataset, load_scenario
from training import TrainConfig, run_ablation

OUT = Path(__file__).resolve().parent
SEED = 7
NOISE = NoiseSpec(pixel_sigma=2.0, dim_sigma=0.1, theta_sigma=0.05)
setup_logging("INFO")

model_config = ModelConfig()
train_config = TrainConfig(epochs=50, learning_rate=1e-3, seed=SEED)

truth, observed = [], []
for name in ("platoon-3", "platoon-8", "lane-change", "cut-in", "merge"):
    dataset = generate_dataset(load_scenario(name), SEED, repeats=3, noise=NOISE)
    estimates = estimate_poses(dataset.detections, "file", dataset.camera)
    recovered = solve_detections(dataset.detections, dataset.camera, estimates)
    t, o = build_windows(dataset.trajectories, model_config.t_steps, model_config.f_steps, recovered, stride=3)
    truth.extend(t)
    observed.extend(o)
split = ablation_dataset(truth, observed, 0.25, SEED)
print(f"{len(split.train_truth)} train / {len(split.test_truth)} test windows")

reports = {}
for variant in ("tp", "control"):
    started = time.perf_counter()
    reports[variant] = run_ablation(variant, split, model_config, train_config)
    print(f"{variant}: {time.perf_counter() - started:.0f} s")

control = reports["control"]
table = pd.DataFrame({
    "horizon_s": list(control.rmse),
    "tp": [reports["tp"].rmse[h] for h in control.rmse],
    "control": list(control.rmse.values()),
    "cv_observed": [control.baseline_rmse[h] for h in control.rmse],
})
print(table.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
table.to_csv(OUT / "noisy_geometry_benchmark.csv", index=False)
print(f"wrote {OUT / 'noisy_geometry_benchmark.csv'}")

ordered = (table["tp"] <= table["control"]).all() and (table["control"] < table["cv_observed"]).all()
if not ordered:
    sys.exit(1)
