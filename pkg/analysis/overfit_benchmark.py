"""Overfit benchmark and constant-velocity comparison on synthetic windows.

Overfit: 32 ground-truth windows from platoon-8, 200 epochs at lr 1e-3,
fixed seed; prints the training RMSE at 1-5 s (targets: < 0.1 m at 1 s,
< 0.5 m at 5 s) and the wall time.
With --baseline: a mixed set of about 500 windows (platoons, lane changes,
cut-ins), 3/4 train and 1/4 test; prints model vs constant-velocity RMSE on
the test part. Output: analysis/overfit_benchmark.csv
"""
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import numpy as np
import pandas as pd

from logging_config import setup_logging
from pipeline import build_windows, split_windows
from stmha_net import ModelConfig, TrajectoryModel
from synth import generate_dataset, load_scenario
from training import TrainConfig, evaluate, fit_scale, train

OUT = Path(__file__).resolve().parent
SEED = 7
setup_logging("INFO")

config = ModelConfig()


def windows_for(name, repeats, stride):
    dataset = generate_dataset(load_scenario(name), SEED, repeats=repeats)
    truth, _ = build_windows(dataset.trajectories, config.t_steps, config.f_steps, stride=stride)
    return truth


def run(train_windows, test_windows, epochs, lr, label):
    model = TrajectoryModel.create(config, fit_scale(train_windows), np.random.default_rng(SEED))
    started = time.perf_counter()
    result = train(model, train_windows, TrainConfig(epochs=epochs, learning_rate=lr, seed=SEED))
    seconds = time.perf_counter() - started
    report = evaluate(result.model, test_windows, variant=label)
    rows = [{"run": label, "horizon_s": h, "model": report.rmse[h], "cv": report.baseline_rmse[h]}
            for h in report.rmse]
    print(f"\n{label}: {len(train_windows)} train / {len(test_windows)} test windows, "
          f"{epochs} epochs in {seconds:.0f} s")
    print(pd.DataFrame(rows).to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    return rows


# ---------------------------------------------------------- overfit
overfit = windows_for("platoon-8", repeats=1, stride=4)[:32]
rows = run(overfit, overfit, epochs=200, lr=1e-3, label="overfit")

# ---------------------------------------------------------- baseline ordering
if "--baseline" in sys.argv:
    mixed = []
    for name in ("platoon-3", "platoon-8", "lane-change", "cut-in", "merge"):
        mixed.extend(windows_for(name, repeats=3, stride=3))
    train_idx, test_idx = split_windows(len(mixed), 0.25, SEED)
    rows += run([mixed[i] for i in train_idx], [mixed[i] for i in test_idx],
                epochs=50, lr=1e-3, label="mixed")

pd.DataFrame(rows).to_csv(OUT / "overfit_benchmark.csv", index=False)
