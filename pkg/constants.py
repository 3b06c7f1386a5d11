"""
constants.py - Centralized constants for trajsight
"""

from pathlib import Path

PROJECT_ROOT = Path(__file__).parent
DATA_DIR = PROJECT_ROOT / "data"
SCENARIOS_DIR = DATA_DIR / "scenarios"

VERSION = "0.3.0"


# Output file names
class Files:
    DETECTIONS = "detections.csv"
    TRAJECTORIES = "trajectories.csv"
    GROUND_TRUTH = "ground_truth.json"
    CAMERA = "camera.json"
    PATCHES = "patches.csv"
    RECOVERED = "recovered.csv"
    MANIFEST = "manifest.json"
    WEIGHTS = "weights.json"
    CHECKPOINT = "checkpoint.json"
    MODEL_CONFIG = "model_config.json"
    SCALE = "scale.json"
    LOSS_CURVE = "loss_curve.csv"
    EVAL_REPORT = "eval_report.json"
    RMSE_BY_HORIZON = "rmse_by_horizon.csv"
    BASELINE_RMSE = "baseline_rmse.csv"
    DISTANCE_BINS = "distance_bins.csv"
    TEST_WINDOWS = "test_windows.json"
    PREDICTIONS = "predictions.csv"
    ABLATION_TABLE = "ablation.csv"
    REGRESSOR_WEIGHTS = "regressor_weights.json"
    REGRESSOR_CONFIG = "regressor_config.json"
    REGRESSOR_LOSS = "regressor_loss.csv"


# Camera (typical dashcam; fx = fy = 1000 px on a 1920x1080 sensor)
DEFAULT_FX = 1000.0
DEFAULT_FY = 1000.0
DEFAULT_CX = 960.0
DEFAULT_CY = 540.0
DEFAULT_IMAGE_WIDTH = 1920
DEFAULT_IMAGE_HEIGHT = 1080
DEFAULT_MOUNT_HEIGHT_M = 1.5
MIN_VISIBLE_DEPTH_M = 0.5

# Vehicle class "car": (length, height, width) in metres
CAR_MEAN_DIMS = (4.5, 1.8, 1.6)

# Scene / windowing
SAMPLE_PERIOD_S = 0.5
PAST_SECONDS = 3.0
FUTURE_SECONDS = 5.0
PAST_STEPS = int(round(PAST_SECONDS / SAMPLE_PERIOD_S))
FUTURE_STEPS = int(round(FUTURE_SECONDS / SAMPLE_PERIOD_S))
OBSERVABLE_RADIUS_M = 30.0
D_NEAR_M = 15.0
MAX_NEIGHBORS = 16
MAX_INTERPOLATED_GAP = 2
MIN_VEHICLE_GAP_M = 2.0
EMBED_INPUT_LIMIT = 1.5

# Network
D_MODEL = 32
N_HEADS = 4
STMHA_LAYERS = 2
D_FF = 64
LSTM_HIDDEN = 32
PE_HIDDEN = 16
PE_INDEX_SCALE = 10.0
LAYER_NORM_EPS = 1e-5

# Training (Adam; lr from the explicit learning-rate sentence, beta2 = 0.999)
LEARNING_RATE = 1e-4
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
BATCH_SIZE = 32
EPOCHS = 50
TEACHER_FORCING_RATIO = 0.5
DEFAULT_SEED = 7

# Evaluation
HORIZONS_S = (1, 2, 3, 4, 5)
DISTANCE_BIN_M = 5.0

# Pose regressor (IMHA)
PATCH_SIZE = 16
PATCH_TOKEN = 4
PATCH_RENDER_SIZE = 64
PATCH_GEOMETRY_LEN = 3
PATCH_FEATURE_LEN = PATCH_SIZE * PATCH_SIZE + PATCH_GEOMETRY_LEN
IMHA_D_MODEL = 16
IMHA_LAYERS = 2

# Shading per local box face (front = +x, the vehicle nose)
FACE_SHADES = {
    "front": 250,
    "back": 60,
    "left": 150,
    "right": 110,
    "top": 200,
    "bottom": 30,
}

# Scenario presets shipped in data/scenarios
SCENARIO_PRESETS = (
    "platoon-3",
    "platoon-8",
    "cut-in",
    "lane-change",
    "merge",
    "sparse",
)

ABLATION_VARIANTS = ("tp", "est", "dst", "control")
