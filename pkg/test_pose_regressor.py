"""Tests for the oracle pose estimator and the patch attention regressor."""
import math

import numpy as np
import pytest

import tensor_core as tc
from constants import PATCH_FEATURE_LEN, PATCH_SIZE
from exceptions import ConfigurationError, ContractError, CorruptedWeightsError, DimensionError, InputError
from geometry3d import Box2D, Box3D, CameraIntrinsics, local_to_global_yaw, wrap_angle
from pose_regressor import (
    NoiseSpec,
    PatchFeatures,
    RegressorConfig,
    imha_forward,
    imha_regress,
    imha_shapes,
    initialize_regressor,
    load_regressor,
    oracle_estimate,
    patch_tokens,
    regress_batch,
    regressor_loss,
    save_regressor,
    train_regressor,
)
from training import TrainConfig

TINY = RegressorConfig(d_model=8, n_heads=2, n_layers=1)


def _features(rng, n):
    return rng.uniform(0, 1, size=(n, PATCH_FEATURE_LEN))


def test_oracle_without_noise_returns_truth():
    """Dimensions are copied and the local yaw restores the global yaw."""
    truth = Box3D((3.0, 0.6, 20.0), (4.4, 1.7, 1.8), 0.9)
    estimate = oracle_estimate(truth, theta_ray=0.15)
    np.testing.assert_array_equal(estimate.dimensions, truth.dimensions)
    assert local_to_global_yaw(estimate.theta_local, 0.15) == pytest.approx(0.9)
    assert estimate.confidence == 1.0


def test_oracle_noise_matches_configured_sigma():
    """The sample spread of yaw errors is close to the configured sigma."""
    truth = Box3D((0.0, 0.6, 20.0), (4.5, 1.8, 1.6), 0.3)
    rng = np.random.default_rng(0)
    sigma = math.radians(5)
    errors = [
        wrap_angle(oracle_estimate(truth, NoiseSpec(theta_sigma=sigma, dim_sigma=0.1), rng).theta_local - 0.3)
        for _ in range(2000)
    ]
    assert np.std(errors) == pytest.approx(sigma, rel=0.1)


def test_oracle_noise_requires_rng():
    """Noise without a generator is a contract violation."""
    truth = Box3D((0.0, 0.6, 20.0), (4.5, 1.8, 1.6), 0.0)
    with pytest.raises(ContractError):
        oracle_estimate(truth, NoiseSpec(dim_sigma=0.1))


def test_negative_noise_rejected():
    with pytest.raises(ConfigurationError):
        NoiseSpec(theta_sigma=-0.1)


def test_patch_features_vector_layout():
    """Pixels then aspect, area fraction and centre offset."""
    camera = CameraIntrinsics()
    pixels = np.linspace(0, 1, PATCH_SIZE * PATCH_SIZE).reshape(PATCH_SIZE, PATCH_SIZE)
    patch = PatchFeatures.from_box(pixels, Box2D(960, 500, 1060, 550), camera)
    vector = patch.vector()
    assert vector.shape == (PATCH_FEATURE_LEN,)
    assert vector[-3] == pytest.approx(100 / 150)
    assert vector[-1] == pytest.approx(50 / camera.width)
    np.testing.assert_allclose(PatchFeatures.from_vector(vector).pixels, pixels)


def test_patch_features_wrong_length():
    with pytest.raises(DimensionError):
        PatchFeatures.from_vector(np.zeros(10))


def test_patch_tokens_are_raster_blocks():
    """Token 0 is the top-left 4x4 block and token 1 the block to its right."""
    values = np.zeros(PATCH_FEATURE_LEN)
    values[: PATCH_SIZE * PATCH_SIZE] = np.arange(PATCH_SIZE * PATCH_SIZE)
    tokens, geometry = patch_tokens(values)
    image = np.arange(PATCH_SIZE * PATCH_SIZE).reshape(PATCH_SIZE, PATCH_SIZE)
    assert tokens.shape == (1, 16, 16)
    np.testing.assert_array_equal(tokens[0, 0], image[:4, :4].reshape(-1))
    np.testing.assert_array_equal(tokens[0, 1], image[:4, 4:8].reshape(-1))
    assert geometry.shape == (1, 3)


def test_regress_batch_outputs_are_well_formed():
    """Positive dimensions, wrapped yaw and a confidence in [0, 1]."""
    rng = np.random.default_rng(1)
    weights = initialize_regressor(TINY, rng)
    estimates = regress_batch(_features(rng, 5), weights, TINY)
    assert len(estimates) == 5
    for est in estimates:
        assert np.all(est.dimensions > 0)
        assert -math.pi < est.theta_local <= math.pi
        assert 0.0 <= est.confidence <= 1.0


def test_regress_rejects_non_finite_weights():
    rng = np.random.default_rng(2)
    weights = initialize_regressor(TINY, rng)
    weights["imha.dims.b"].data[0] = np.nan
    with pytest.raises(CorruptedWeightsError):
        regress_batch(_features(rng, 1), weights, TINY)


def test_regressor_loss_gradient():
    """Backward through the regressor agrees with finite differences on every weight."""
    rng = np.random.default_rng(3)
    config = RegressorConfig(d_model=4, n_heads=2, n_layers=2)
    weights = initialize_regressor(config, rng)
    features = _features(rng, 2)
    dims = np.array([[4.5, 1.8, 1.6], [4.0, 1.5, 1.7]])
    thetas = np.array([0.3, -2.0])

    loss = regressor_loss(features, dims, thetas, weights, config)
    tc.backward(loss)
    assert set(weights) == set(imha_shapes(config))
    for name in weights:
        tensor = weights[name]
        numeric = tc.numerical_gradient(
            lambda: regressor_loss(features, dims, thetas, weights, config).item(), tensor, h=1e-5
        )
        np.testing.assert_allclose(tensor.grad, numeric, rtol=1e-4, atol=1e-6, err_msg=name)


def test_train_regressor_reduces_loss():
    """A few epochs on a small patch set lower the training loss."""
    rng = np.random.default_rng(4)
    features = _features(rng, 24)
    dims = np.tile([4.5, 1.8, 1.6], (24, 1)) + rng.normal(0, 0.1, size=(24, 3))
    thetas = rng.uniform(-math.pi, math.pi, size=24)
    train_config = TrainConfig(learning_rate=1e-2, epochs=30, batch_size=8, seed=0)
    weights, losses = train_regressor(features, dims, thetas, train_config, TINY)
    assert len(losses) == 30
    assert losses[-1] < losses[0]
    weights.check_finite()


def test_save_load_regressor(tmp_path):
    """Weights and config survive a save/load cycle."""
    weights = initialize_regressor(TINY, np.random.default_rng(5))
    save_regressor(tmp_path, weights, TINY)
    loaded, config = load_regressor(tmp_path)
    assert config == TINY
    for name in weights:
        np.testing.assert_array_equal(loaded[name].data, weights[name].data)


def test_load_regressor_missing_files(tmp_path):
    with pytest.raises(InputError):
        load_regressor(tmp_path)


def test_load_regressor_shape_mismatch(tmp_path):
    """Weights saved for one config do not load under another."""
    save_regressor(tmp_path, initialize_regressor(TINY, np.random.default_rng(6)), TINY)
    (tmp_path / "regressor_config.json").write_text('{"d_model": 16, "n_heads": 2, "n_layers": 1}')
    with pytest.raises(CorruptedWeightsError):
        load_regressor(tmp_path)


def test_regressor_config_rejects_indivisible_heads():
    with pytest.raises(ConfigurationError):
        RegressorConfig(d_model=10, n_heads=4)


def _permute_blocks(features, order):
    """Rearrange the 4x4 pixel blocks of each patch so that token i becomes token order[i]."""
    tokens, geometry = patch_tokens(features)
    grid = PATCH_SIZE // 4
    permuted = tokens[:, order]
    pixels = permuted.reshape(-1, grid, grid, 4, 4).transpose(0, 1, 3, 2, 4).reshape(len(features), -1)
    return np.concatenate([pixels, geometry], axis=1)


def test_block_permutation_round_trips_through_tokens():
    rng = np.random.default_rng(7)
    features = _features(rng, 2)
    order = rng.permutation(16)
    tokens, _ = patch_tokens(_permute_blocks(features, order))
    np.testing.assert_array_equal(tokens, patch_tokens(features)[0][:, order])


def test_regressor_without_positions_ignores_token_order():
    """Without position embeddings the pooled attention is blind to where a block sits."""
    rng = np.random.default_rng(8)
    config = RegressorConfig(d_model=8, n_heads=2, n_layers=2, use_positions=False)
    weights = initialize_regressor(config, rng)
    features = _features(rng, 3)
    shuffled = _permute_blocks(features, rng.permutation(16))
    assert not np.allclose(shuffled, features)

    with tc.no_grad():
        dims, angle = imha_forward(features, weights, config)
        dims_shuffled, angle_shuffled = imha_forward(shuffled, weights, config)
    np.testing.assert_allclose(dims_shuffled.data, dims.data, atol=1e-12)
    np.testing.assert_allclose(angle_shuffled.data, angle.data, atol=1e-12)


def test_regressor_with_positions_sees_token_order():
    rng = np.random.default_rng(8)
    config = RegressorConfig(d_model=8, n_heads=2, n_layers=2)
    weights = initialize_regressor(config, rng)
    features = _features(rng, 3)
    shuffled = _permute_blocks(features, rng.permutation(16))

    with tc.no_grad():
        _, angle = imha_forward(features, weights, config)
        _, angle_shuffled = imha_forward(shuffled, weights, config)
    assert not np.allclose(angle_shuffled.data, angle.data)


def test_imha_regress_matches_batch_on_one_patch():
    """Single-patch regression decodes the same estimate as the batched path."""
    rng = np.random.default_rng(9)
    weights = initialize_regressor(TINY, rng)
    camera = CameraIntrinsics()
    pixels = rng.uniform(0, 1, size=(PATCH_SIZE, PATCH_SIZE))
    patch = PatchFeatures.from_box(pixels, Box2D(900, 480, 1020, 560), camera)

    estimate = imha_regress(patch, weights, TINY)
    batched = regress_batch(patch.vector(), weights, TINY)[0]
    np.testing.assert_allclose(estimate.dimensions, batched.dimensions)
    assert estimate.theta_local == pytest.approx(batched.theta_local)
    assert estimate.confidence == pytest.approx(batched.confidence)
    assert np.all(estimate.dimensions > 0)
    assert -math.pi < estimate.theta_local <= math.pi


def test_imha_regress_rejects_non_finite_weights():
    rng = np.random.default_rng(10)
    weights = initialize_regressor(TINY, rng)
    weights["imha.angle.w"].data[0, 0] = np.inf
    patch = PatchFeatures.from_vector(_features(rng, 1)[0])
    with pytest.raises(CorruptedWeightsError):
        imha_regress(patch, weights, TINY)
