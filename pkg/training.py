"""
training.py - Loss, Adam, the teacher-forced training loop and evaluation metrics

The loss is computed in scaled space; every reported metric is in metres.
RMSE is the Euclidean displacement error per present (step, vehicle) entry.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

import tensor_core as tc
from config import split_known
from constants import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    BATCH_SIZE,
    DEFAULT_SEED,
    DISTANCE_BIN_M,
    EPOCHS,
    HORIZONS_S,
    LEARNING_RATE,
    SAMPLE_PERIOD_S,
    TEACHER_FORCING_RATIO,
    Files,
)
from exceptions import ConfigurationError, ContractError, DimensionError, DivergenceError
from geometry3d import Box3D, iou3d
from stmha_net import ModelConfig, ModelWeights, TrajectoryModel
from tensor_core import Tensor
from track_assembly import ScaleSpec, TrajectoryWindow, WindowBatch, collate

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = LEARNING_RATE
    adam_beta1: float = ADAM_BETA1
    adam_beta2: float = ADAM_BETA2
    adam_eps: float = ADAM_EPS
    batch_size: int = BATCH_SIZE
    epochs: int = EPOCHS
    tf_ratio: float = TEACHER_FORCING_RATIO
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise ConfigurationError("learning_rate and adam_eps must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigurationError("Adam betas must lie in [0, 1)")
        if self.batch_size <= 0 or self.epochs < 0:
            raise ConfigurationError("batch_size must be positive and epochs non-negative")
        if not 0.0 <= self.tf_ratio <= 1.0:
            raise ConfigurationError(f"tf_ratio must be in [0, 1], got {self.tf_ratio}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**split_known(payload, known, "train"))


def load_run_config(payload: Dict[str, Any]) -> tuple[ModelConfig, TrainConfig]:
    """Split a {"model": ..., "train": ...} run config; missing sections take defaults."""
    split_known(payload, {"model", "train"}, "run")
    return (
        ModelConfig.from_dict(payload.get("model", {})),
        TrainConfig.from_dict(payload.get("train", {})),
    )


# ---------------------------------------------------------------- loss / optimiser

def mse_loss(pred: Tensor, gt: np.ndarray, mask: np.ndarray) -> Tensor:
    """
    Mean over masked-in (step, vehicle) entries of the squared Euclidean error.

    An entry off by (3, 4) contributes 25.

    Raises:
        ContractError: If the mask selects nothing.
    """
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or mask.shape != gt.shape[:-1]:
        raise DimensionError(
            f"Loss shapes disagree: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}",
            shapes=(pred.shape, gt.shape, mask.shape),
        )
    count = int(mask.sum())
    if count == 0:
        raise ContractError("mse_loss: mask selects no entries")
    diff = pred - np.where(mask[..., None], gt, 0.0)
    squared = tc.tensor_sum(diff * diff, axis=-1)
    return tc.tensor_sum(squared * mask.astype(np.float64)) * (1.0 / count)


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, weights: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            step=0,
            m={name: np.zeros(t.shape) for name, t in weights.items()},
            v={name: np.zeros(t.shape) for name, t in weights.items()},
        )


def adam_step(
    weights: ModelWeights,
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
    config: TrainConfig,
) -> tuple[ModelWeights, AdamState]:
    """
    One bias-corrected Adam update. A missing gradient counts as zero.

    Raises:
        DivergenceError: Naming the first weight whose gradient is not finite.
    """
    step = state.step + 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    correction1 = 1.0 - b1 ** step
    correction2 = 1.0 - b2 ** step
    new_arrays: Dict[str, np.ndarray] = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}

    for name, tensor in weights.items():
        g = grads.get(name)
        g = np.zeros(tensor.shape) if g is None else np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"Gradient of {name} is not finite", weight_name=name)
        m = b1 * state.m.get(name, np.zeros(tensor.shape)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros(tensor.shape)) + (1.0 - b2) * g * g
        update = config.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + config.adam_eps)
        new_arrays[name] = tensor.data - update
        new_m[name] = m
        new_v[name] = v

    return ModelWeights.from_arrays(new_arrays), AdamState(step=step, m=new_m, v=new_v)


# ---------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    model: TrajectoryModel
    losses: List[float]
    teacher_flags: List[bool]
    seconds: float = 0.0

    def loss_curve(self) -> pd.DataFrame:
        return pd.DataFrame({"epoch": np.arange(1, len(self.losses) + 1), "loss": self.losses})


def fit_scale(windows: Sequence[TrajectoryWindow]) -> ScaleSpec:
    """Scale fitted on every present past and future position of the corpus."""
    coords = np.concatenate(
        [np.concatenate([w.past, w.future], axis=0)[w.presence] for w in windows], axis=0
    )
    return ScaleSpec.fit(coords)


def _write_checkpoint(path: Path, epoch: int, losses: List[float], weights: ModelWeights) -> None:
    payload = {
        "epoch": epoch,
        "losses": losses,
        "weights": {
            name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in weights.items()
        },
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True))


def _batches(
    windows: Sequence[TrajectoryWindow], order: np.ndarray, size: int, d_near: float
) -> List[WindowBatch]:
    return [
        collate([windows[i] for i in order[start:start + size]], d_near)
        for start in range(0, len(order), size)
    ]


def train(
    model: TrajectoryModel,
    windows: Sequence[TrajectoryWindow],
    config: TrainConfig,
    checkpoint_dir: Optional[Path] = None,
) -> TrainResult:
    """
    Shuffled minibatch Adam with teacher forcing; deterministic under config.seed.

    A checkpoint is written after every epoch when checkpoint_dir is given.

    Raises:
        DivergenceError: On a non-finite loss (after saving a checkpoint) or gradient.
    """
    if not windows:
        raise ContractError("Cannot train on an empty window set")
    rng = np.random.default_rng(config.seed)
    weights = model.weights
    state = AdamState.zeros(weights)
    losses: List[float] = []
    flags: List[bool] = []
    checkpoint = Path(checkpoint_dir) / Files.CHECKPOINT if checkpoint_dir else None
    started = time.perf_counter()

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(windows))
        batch_losses: List[float] = []
        for batch in _batches(windows, order, config.batch_size, model.config.d_near):
            model.weights = weights
            result = model.forward(batch, tf_ratio=config.tf_ratio, rng=rng, use_teacher=True)
            flags.extend(result.teacher_flags)
            loss = mse_loss(result.predictions, model.scale.scale(batch.future), batch.future_presence)
            value = loss.item()
            if not math.isfinite(value):
                if checkpoint is not None:
                    _write_checkpoint(checkpoint, epoch, losses, weights)
                raise DivergenceError(f"Loss became {value} in epoch {epoch}")
            tc.backward(loss)
            weights, state = adam_step(weights, weights.grads(), state, config)
            batch_losses.append(value)

        losses.append(float(np.mean(batch_losses)))
        model.weights = weights
        if checkpoint is not None:
            _write_checkpoint(checkpoint, epoch, losses, weights)
        if epoch == 1 or epoch % 10 == 0 or epoch == config.epochs:
            logger.info(f"Epoch {epoch}/{config.epochs}: loss {losses[-1]:.6f}")

    model.weights = weights
    return TrainResult(model=model, losses=losses, teacher_flags=flags,
                       seconds=time.perf_counter() - started)


# ---------------------------------------------------------------- metrics

def horizon_step(seconds: float, dt: float = SAMPLE_PERIOD_S) -> int:
    """Index into the future axis of the prediction made `seconds` ahead."""
    return int(round(seconds / dt)) - 1


def rmse_by_horizon(
    preds: np.ndarray,
    gts: np.ndarray,
    mask: np.ndarray,
    dt: float = SAMPLE_PERIOD_S,
    horizons: Sequence[float] = HORIZONS_S,
) -> Dict[float, float]:
    """
    sqrt(mean ||pred - gt||^2) over present entries, per horizon in seconds.

    Inputs are (..., F, N, 2) metres with mask (..., F, N). A horizon beyond
    F or with no present entry is NaN.
    """
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if preds.shape != gts.shape or mask.shape != preds.shape[:-1]:
        raise DimensionError(
            f"RMSE shapes disagree: preds {preds.shape}, gts {gts.shape}, mask {mask.shape}",
            shapes=(preds.shape, gts.shape, mask.shape),
        )
    squared = np.sum((preds - gts) ** 2, axis=-1)
    f_steps = preds.shape[-3]
    result: Dict[float, float] = {}
    for h in horizons:
        k = horizon_step(h, dt)
        if not 0 <= k < f_steps:
            result[h] = float("nan")
            continue
        selected = squared[..., k, :][mask[..., k, :]]
        result[h] = float(np.sqrt(selected.mean())) if selected.size else float("nan")
    return result


def constant_velocity_baseline(past: np.ndarray, present: np.ndarray, f_steps: int) -> np.ndarray:
    """
    Extrapolate each vehicle's last observed velocity.

    past (..., T, N, 2), present (..., T, N) -> (..., F, N, 2). The velocity is
    the displacement between the last two present samples divided by their
    step distance; a vehicle seen once keeps its position.
    """
    past = np.asarray(past, dtype=np.float64)
    present = np.asarray(present, dtype=bool)
    steps = past.shape[-3]
    order = np.where(present, np.arange(steps)[:, None], -1)
    ranked = np.sort(order, axis=-2)
    last = ranked[..., -1, :]
    prev = ranked[..., -2, :] if steps > 1 else np.full_like(last, -1)

    def take(index: np.ndarray) -> np.ndarray:
        picked = np.take_along_axis(past, np.maximum(index, 0)[..., None, :, None], axis=-3)
        return picked[..., 0, :, :]

    p_last = np.where((last >= 0)[..., None], take(last), 0.0)
    gap = np.where((prev >= 0) & (last > prev), last - prev, 1)
    velocity = np.where(((prev >= 0) & (last >= 0))[..., None], (p_last - take(prev)) / gap[..., None], 0.0)
    ahead = (steps - 1 - np.maximum(last, 0))[..., None, :, None] + np.arange(1, f_steps + 1)[:, None, None]
    return p_last[..., None, :, :] + velocity[..., None, :, :] * ahead


def mde_iou_vs_distance(
    estimates: Sequence[Box3D],
    truths: Sequence[Box3D],
    bin_m: float = DISTANCE_BIN_M,
) -> pd.DataFrame:
    """
    Mean translation error and mean IoU in ground-plane distance bins.

    Bins are [k*bin_m, (k+1)*bin_m) on hypot(t_x, t_z) of the truth; empty
    bins are absent from the table.
    """
    if len(estimates) != len(truths):
        raise ContractError(f"{len(estimates)} estimates for {len(truths)} truths")
    columns = ["distance_bin", "mde", "iou", "count"]
    if not truths:
        return pd.DataFrame(columns=columns)
    rows = pd.DataFrame({
        "distance": [math.hypot(t.translation[0], t.translation[2]) for t in truths],
        "error": [float(np.linalg.norm(e.translation - t.translation)) for e, t in zip(estimates, truths)],
        "iou": [iou3d(e, t) for e, t in zip(estimates, truths)],
    })
    rows["distance_bin"] = np.floor(rows["distance"] / bin_m) * bin_m
    table = (
        rows.groupby("distance_bin", sort=True)
        .agg(mde=("error", "mean"), iou=("iou", "mean"), count=("error", "size"))
        .reset_index()
    )
    return table[columns]


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    rmse: Dict[float, float]
    baseline_rmse: Dict[float, float]
    n_windows: int
    variant: str = "control"
    parameter_count: int = 0
    distance_bins: Optional[pd.DataFrame] = None

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {
            "variant": self.variant,
            "n_windows": self.n_windows,
            "parameter_count": self.parameter_count,
            "rmse": {f"{h:g}": _json_float(v) for h, v in self.rmse.items()},
            "baseline_rmse": {f"{h:g}": _json_float(v) for h, v in self.baseline_rmse.items()},
        }
        if self.distance_bins is not None:
            payload["distance_bins"] = self.distance_bins.to_dict(orient="records")
        return payload

    def write(self, directory: Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / Files.EVAL_REPORT).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        _horizon_frame(self.rmse).to_csv(directory / Files.RMSE_BY_HORIZON, index=False)
        _horizon_frame(self.baseline_rmse).to_csv(directory / Files.BASELINE_RMSE, index=False)
        if self.distance_bins is not None:
            self.distance_bins[["distance_bin", "mde", "iou"]].to_csv(
                directory / Files.DISTANCE_BINS, index=False
            )


def _json_float(value: float) -> Optional[float]:
    return None if value is None or not math.isfinite(value) else float(value)


def _horizon_frame(values: Dict[float, float]) -> pd.DataFrame:
    return pd.DataFrame({"horizon_s": list(values.keys()), "rmse": list(values.values())})


def predict_windows(
    model: TrajectoryModel,
    windows: Sequence[TrajectoryWindow],
    batch_size: int = BATCH_SIZE,
) -> List[np.ndarray]:
    """Closed-loop predictions in metres, one (F, N, 2) array per window."""
    outputs: List[np.ndarray] = []
    for start in range(0, len(windows), batch_size):
        chunk = list(windows[start:start + batch_size])
        predicted = model.predict(collate(chunk, model.config.d_near))
        outputs.extend(predicted[k, :, : w.n_vehicles] for k, w in enumerate(chunk))
    return outputs


def _stack_padded(arrays: Sequence[np.ndarray], fill_shape_tail: tuple) -> np.ndarray:
    n = max(a.shape[1] for a in arrays)
    out = np.zeros((len(arrays), arrays[0].shape[0], n) + fill_shape_tail, dtype=arrays[0].dtype)
    for k, a in enumerate(arrays):
        out[k, :, : a.shape[1]] = a
    return out


def evaluate(
    model: TrajectoryModel,
    windows: Sequence[TrajectoryWindow],
    variant: str = "control",
    batch_size: int = BATCH_SIZE,
) -> EvalReport:
    """RMSE by horizon of the model and of the constant-velocity baseline on the same windows."""
    if not windows:
        raise ContractError("Cannot evaluate an empty window set")
    preds = _stack_padded(predict_windows(model, windows, batch_size), (2,))
    gts = _stack_padded([w.future for w in windows], (2,))
    mask = _stack_padded([w.future_presence for w in windows], ())
    baseline = _stack_padded(
        [constant_velocity_baseline(w.past, w.past_presence, w.f_steps) for w in windows], (2,)
    )
    dt = model.config.dt
    return EvalReport(
        rmse=rmse_by_horizon(preds, gts, mask, dt),
        baseline_rmse=rmse_by_horizon(baseline, gts, mask, dt),
        n_windows=len(windows),
        variant=variant,
        parameter_count=model.weights.parameter_count(),
    )


# ---------------------------------------------------------------- ablations

VARIANT_SWITCHES = {
    "control": {},
    "tp": {},
    "est": {"encoder_stmha": False},
    "dst": {"decoder_stmha": False},
    "vlstm": {"encoder_stmha": False, "decoder_stmha": False},
}


@dataclass
class AblationDataset:
    """Ground-truth windows and the same windows with geometry-recovered pasts."""

    train_truth: List[TrajectoryWindow]
    test_truth: List[TrajectoryWindow]
    train_observed: List[TrajectoryWindow]
    test_observed: List[TrajectoryWindow]


def run_ablation(
    variant: str,
    dataset: AblationDataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> EvalReport:
    """
    Train and evaluate one variant under identical seeds.

    tp feeds ground-truth pasts (bypassing geometry recovery); est drops the
    encoder STMHA stack; dst drops the decoder STMHA layer; vlstm drops both.
    Every other variant consumes the recovered pasts.
    """
    if variant not in VARIANT_SWITCHES:
        raise ConfigurationError(f"Unknown ablation variant {variant!r}; expected one of {sorted(VARIANT_SWITCHES)}")
    config = ModelConfig.from_dict({**model_config.to_dict(), **VARIANT_SWITCHES[variant]})
    train_windows = dataset.train_truth if variant == "tp" else dataset.train_observed
    test_windows = dataset.test_truth if variant == "tp" else dataset.test_observed

    rng = np.random.default_rng(train_config.seed)
    model = TrajectoryModel.create(config, fit_scale(dataset.train_truth), rng)
    logger.info(f"Ablation {variant}: {model.weights.parameter_count()} parameters, "
                f"{len(train_windows)} training windows")
    result = train(model, train_windows, train_config)
    return evaluate(result.model, test_windows, variant=variant)


def ablation_table(reports: Mapping[str, EvalReport]) -> pd.DataFrame:
    """
    One row per variant: RMSE per horizon and the mean relative change
    against control in both directions (percent).
    """
    if "control" not in reports:
        raise ContractError("Ablation table needs a control report")
    control = reports["control"]
    rows = []
    for variant, report in reports.items():
        row: Dict[str, Any] = {"variant": variant}
        for h, value in report.rmse.items():
            row[f"rmse_{h:g}s"] = value
        pairs = [(report.rmse[h], control.rmse[h]) for h in control.rmse
                 if h in report.rmse and math.isfinite(report.rmse[h]) and math.isfinite(control.rmse[h])]
        vs_control = [(v - c) / c * 100.0 for v, c in pairs if c > 0]
        vs_variant = [(c - v) / v * 100.0 for v, c in pairs if v > 0]
        row["variant_vs_control_pct"] = float(np.mean(vs_control)) if vs_control else float("nan")
        row["control_vs_variant_pct"] = float(np.mean(vs_variant)) if vs_variant else float("nan")
        row["parameter_count"] = report.parameter_count
        rows.append(row)
    return pd.DataFrame(rows)
