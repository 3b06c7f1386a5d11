"""
pose_regressor.py - Dimensions and local orientation for geometry recovery

Two estimators share one output type:
  - oracle_estimate: ground truth plus configurable Gaussian noise
  - imha_regress: a small image multi-head-attention regressor over a 16x16
    grayscale patch (16 tokens of 4x4 pixels plus one box-geometry token)
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

import tensor_core as tc
from config import read_json, split_known
from constants import (
    CAR_MEAN_DIMS,
    IMHA_D_MODEL,
    IMHA_LAYERS,
    N_HEADS,
    PATCH_FEATURE_LEN,
    PATCH_GEOMETRY_LEN,
    PATCH_SIZE,
    PATCH_TOKEN,
    Files,
)
from exceptions import ConfigurationError, ContractError, DimensionError, InputError
from geometry3d import Box2D, Box3D, CameraIntrinsics, global_to_local_yaw, wrap_angle
from stmha_net import ModelWeights, multi_head
from tensor_core import Tensor
from training import AdamState, TrainConfig, adam_step

logger = logging.getLogger(__name__)

N_PATCH_TOKENS = (PATCH_SIZE // PATCH_TOKEN) ** 2


@dataclass
class NoiseSpec:
    """Gaussian perturbation: metres on dimensions, radians on yaw, pixels on box sides."""

    dim_sigma: float = 0.0
    theta_sigma: float = 0.0
    pixel_sigma: float = 0.0

    def __post_init__(self):
        if min(self.dim_sigma, self.theta_sigma, self.pixel_sigma) < 0:
            raise ConfigurationError("Noise sigmas must be non-negative")


@dataclass
class PatchFeatures:
    """16x16 grayscale patch in [0, 1] plus normalised box geometry."""

    pixels: np.ndarray
    aspect: float
    area_fraction: float
    center_offset: float

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(PATCH_SIZE, PATCH_SIZE)

    @classmethod
    def from_box(cls, pixels: np.ndarray, box2d: Box2D, camera: CameraIntrinsics) -> "PatchFeatures":
        return cls(
            pixels=np.clip(pixels, 0.0, 1.0),
            aspect=box2d.width / (box2d.width + box2d.height),
            area_fraction=min(1.0, box2d.width * box2d.height / (camera.width * camera.height)),
            center_offset=(box2d.center_u - camera.cx) / camera.width,
        )

    def vector(self) -> np.ndarray:
        """Flattened pixels then (aspect, area fraction, centre offset); length 259."""
        return np.concatenate([
            self.pixels.reshape(-1),
            [self.aspect, self.area_fraction, self.center_offset],
        ])

    @classmethod
    def from_vector(cls, values: np.ndarray) -> "PatchFeatures":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (PATCH_FEATURE_LEN,):
            raise DimensionError(
                f"Patch features need {PATCH_FEATURE_LEN} values, got {values.shape}",
                shapes=(values.shape,),
            )
        size = PATCH_SIZE * PATCH_SIZE
        return cls(values[:size], *values[size:].tolist())


@dataclass
class PoseEstimate:
    dimensions: np.ndarray
    theta_local: float
    confidence: float = 1.0


def oracle_estimate(
    truth: Box3D,
    noise: Optional[NoiseSpec] = None,
    rng: Optional[np.random.Generator] = None,
    theta_ray: float = 0.0,
) -> PoseEstimate:
    """
    Ground-truth dimensions and local yaw plus Gaussian noise.

    theta_ray is the ray angle the detection is seen under; the returned local
    yaw is relative to it, so local_to_global_yaw restores the truth.
    """
    noise = noise or NoiseSpec()
    if noise.dim_sigma > 0 or noise.theta_sigma > 0:
        if rng is None:
            raise ContractError("oracle_estimate needs an rng when noise is configured")
    dims = truth.dimensions.copy()
    theta = truth.yaw
    if noise.dim_sigma > 0:
        dims = np.maximum(dims + rng.normal(0.0, noise.dim_sigma, size=3), 1e-3)
    if noise.theta_sigma > 0:
        theta = theta + rng.normal(0.0, noise.theta_sigma)
    return PoseEstimate(dimensions=dims, theta_local=global_to_local_yaw(theta, theta_ray), confidence=1.0)


# ---------------------------------------------------------------- IMHA

@dataclass
class RegressorConfig:
    d_model: int = IMHA_D_MODEL
    n_heads: int = N_HEADS
    n_layers: int = IMHA_LAYERS
    use_positions: bool = True
    score_scaling: str = "pre_softmax"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "RegressorConfig":
        return cls(**split_known(payload, {f.name for f in fields(cls)}, "regressor"))


def imha_shapes(config: RegressorConfig) -> Dict[str, Tuple[int, ...]]:
    d = config.d_model
    token_len = PATCH_TOKEN * PATCH_TOKEN
    shapes: Dict[str, Tuple[int, ...]] = {
        "imha.tok.w": (token_len, d),
        "imha.tok.b": (d,),
        "imha.geo.w": (PATCH_GEOMETRY_LEN, d),
        "imha.geo.b": (d,),
        "imha.dims.w": (d, 3),
        "imha.dims.b": (3,),
        "imha.angle.w": (d, 2),
        "imha.angle.b": (2,),
    }
    if config.use_positions:
        shapes["imha.pos"] = (N_PATCH_TOKENS + 1, d)
    for layer in range(config.n_layers):
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[f"imha.{layer}.{proj}"] = (d, d)
        shapes[f"imha.{layer}.bo"] = (d,)
        shapes[f"imha.{layer}.ln.gamma"] = (d,)
        shapes[f"imha.{layer}.ln.beta"] = (d,)
    return shapes


def initialize_regressor(config: RegressorConfig, rng: np.random.Generator) -> ModelWeights:
    return ModelWeights.initialize(imha_shapes(config), rng)


def patch_tokens(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(B, 259) features -> (B, 16, 16) pixel tokens in raster order and (B, 3) geometry."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[None, :]
    if features.shape[-1] != PATCH_FEATURE_LEN:
        raise DimensionError(
            f"Patch features need {PATCH_FEATURE_LEN} values, got {features.shape}",
            shapes=(features.shape,),
        )
    size, grid = PATCH_SIZE, PATCH_SIZE // PATCH_TOKEN
    pixels = features[:, : size * size].reshape(-1, grid, PATCH_TOKEN, grid, PATCH_TOKEN)
    tokens = pixels.transpose(0, 1, 3, 2, 4).reshape(-1, grid * grid, PATCH_TOKEN * PATCH_TOKEN)
    return tokens, features[:, size * size:]


def attend_tokens(x: Tensor, weights: ModelWeights, config: RegressorConfig) -> Tensor:
    """Stacked full-mask MHA layers with residual and norm, then mean pooling over tokens."""
    n_tokens = x.shape[-2]
    mask = np.ones((n_tokens, n_tokens), dtype=bool)
    for layer in range(config.n_layers):
        prefix = f"imha.{layer}"
        attended = multi_head(x, x, mask, weights, prefix, config)
        x = tc.layer_norm(x + attended, weights[f"{prefix}.ln.gamma"], weights[f"{prefix}.ln.beta"])
    return tc.mean(x, axis=-2)


def imha_forward(features: np.ndarray, weights: ModelWeights, config: RegressorConfig) -> Tuple[Tensor, Tensor]:
    """
    Raw heads for a batch of patch features.

    Returns:
        (dimensions (B, 3) in metres, orientation pair (B, 2) as (sin, cos))
    """
    tokens, geometry = patch_tokens(features)
    pixel_tokens = Tensor(tokens) @ weights["imha.tok.w"] + weights["imha.tok.b"]
    geo_token = Tensor(geometry) @ weights["imha.geo.w"] + weights["imha.geo.b"]
    b = geo_token.shape[0]
    x = tc.concat([pixel_tokens, geo_token.reshape(b, 1, config.d_model)], axis=1)
    if config.use_positions:
        x = x + weights["imha.pos"]
    pooled = attend_tokens(x, weights, config)
    prior = np.log(np.expm1(np.asarray(CAR_MEAN_DIMS)))
    dims = tc.softplus(pooled @ weights["imha.dims.w"] + weights["imha.dims.b"] + prior)
    angle = pooled @ weights["imha.angle.w"] + weights["imha.angle.b"]
    return dims, angle


def regress_batch(
    features: np.ndarray, weights: ModelWeights, config: Optional[RegressorConfig] = None
) -> List[PoseEstimate]:
    """
    Raises:
        CorruptedWeightsError: If any weight is not finite.
    """
    config = config or RegressorConfig()
    weights.check_finite()
    with tc.no_grad():
        dims, angle = imha_forward(features, weights, config)
    estimates = []
    for d, (s, c) in zip(dims.data, angle.data):
        estimates.append(PoseEstimate(
            dimensions=d.copy(),
            theta_local=wrap_angle(math.atan2(s, c)),
            confidence=float(np.tanh(math.hypot(s, c))),
        ))
    return estimates


def imha_regress(
    patch: PatchFeatures, weights: ModelWeights, config: Optional[RegressorConfig] = None
) -> PoseEstimate:
    """Dimensions (softplus-positive) and local yaw decoded by atan2 from one patch."""
    return regress_batch(patch.vector()[None, :], weights, config)[0]


def regressor_loss(
    features: np.ndarray,
    dims: np.ndarray,
    thetas: np.ndarray,
    weights: ModelWeights,
    config: RegressorConfig,
) -> Tensor:
    """Mean squared dimension error plus squared error of the (sin, cos) pair."""
    pred_dims, pred_angle = imha_forward(features, weights, config)
    target_angle = np.stack([np.sin(thetas), np.cos(thetas)], axis=-1)
    dim_err = pred_dims - np.asarray(dims, dtype=np.float64)
    angle_err = pred_angle - target_angle
    per_sample = tc.tensor_sum(dim_err * dim_err, axis=-1) + tc.tensor_sum(angle_err * angle_err, axis=-1)
    return tc.mean(per_sample)


def train_regressor(
    features: np.ndarray,
    dims: np.ndarray,
    thetas: np.ndarray,
    train_config: TrainConfig,
    config: Optional[RegressorConfig] = None,
) -> Tuple[ModelWeights, List[float]]:
    """Adam on shuffled minibatches of rendered patches; returns weights and per-epoch loss."""
    config = config or RegressorConfig()
    rng = np.random.default_rng(train_config.seed)
    weights = initialize_regressor(config, rng)
    state = AdamState.zeros(weights)
    features = np.asarray(features, dtype=np.float64)
    dims = np.asarray(dims, dtype=np.float64)
    thetas = np.asarray(thetas, dtype=np.float64)
    losses: List[float] = []
    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(len(features))
        epoch_losses = []
        for start in range(0, len(order), train_config.batch_size):
            idx = order[start:start + train_config.batch_size]
            loss = regressor_loss(features[idx], dims[idx], thetas[idx], weights, config)
            tc.backward(loss)
            weights, state = adam_step(weights, weights.grads(), state, train_config)
            epoch_losses.append(loss.item())
        losses.append(float(np.mean(epoch_losses)))
        if epoch == 1 or epoch % 25 == 0 or epoch == train_config.epochs:
            logger.info(f"IMHA epoch {epoch}/{train_config.epochs}: loss {losses[-1]:.5f}")
    return weights, losses


def save_regressor(directory: Path, weights: ModelWeights, config: RegressorConfig) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    weights.save(directory / Files.REGRESSOR_WEIGHTS)
    (directory / Files.REGRESSOR_CONFIG).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))


def load_regressor(directory: Path) -> Tuple[ModelWeights, RegressorConfig]:
    """
    Raises:
        InputError: If a regressor file is missing or unparsable.
        CorruptedWeightsError: If the weights are not finite or do not fit the config.
    """
    directory = Path(directory)
    config = RegressorConfig.from_dict(read_json(directory / Files.REGRESSOR_CONFIG))
    path = directory / Files.REGRESSOR_WEIGHTS
    if not path.exists():
        raise InputError(f"File not found: {path}")
    weights = ModelWeights.load(path)
    weights.check_shapes(imha_shapes(config))
    return weights, config
