import copy
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

import yaml

from exceptions import ConfigError

# Application Settings
APP_NAME = "Desk-Scale VLA Recipe"
APP_VERSION = "1.0.0"

# Output Settings
OUTPUT_ROOT_ENV = "VLA_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = Path("runs")

# Format Versions
DATASET_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
REPORT_FORMAT_VERSION = 1
VOCAB_VERSION = 1

# Numerics
DEFAULT_DTYPE = "float32"
DEBUG_FINITE_CHECKS = False  # Scan every forward output for NaN/Inf
INIT_STD = 0.02

# Optimizer Defaults
ADAMW_LR = 3e-4
ADAMW_BETAS = (0.9, 0.999)
ADAMW_EPS = 1e-8
ADAMW_WEIGHT_DECAY = 0.01

# Rendering Settings
IMAGE_SIZE = 32
IMAGE_CHANNELS = 3
PIXEL_LEVELS = 255  # Rendered pixels are multiples of 1/PIXEL_LEVELS

SHAPES = ["square", "circle", "triangle"]

PALETTE = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.75, 0.20),
    "blue": (0.15, 0.30, 0.90),
    "yellow": (0.95, 0.85, 0.10),
    "purple": (0.55, 0.20, 0.75),
    "orange": (0.95, 0.55, 0.10),
    "cyan": (0.10, 0.80, 0.85),
    "pink": (0.95, 0.50, 0.70),
}
COLORS = list(PALETTE)

# Background id -> (base color, stripe period in pixels, stripe strength)
BACKGROUNDS = {
    0: ((0.45, 0.42, 0.38), 0, 0.00),
    1: ((0.35, 0.38, 0.42), 8, 0.06),
    2: ((0.50, 0.47, 0.40), 6, 0.05),
    3: ((0.40, 0.40, 0.40), 0, 0.00),
    4: ((0.22, 0.30, 0.22), 4, 0.12),
    5: ((0.60, 0.35, 0.30), 5, 0.10),
    6: ((0.28, 0.25, 0.45), 3, 0.15),
    7: ((0.62, 0.60, 0.30), 7, 0.12),
}

# Texture id -> (checker cell size in pixels, modulation amplitude)
TEXTURES = {
    0: (0, 0.00),
    1: (4, 0.03),
    2: (2, 0.10),
    3: (3, 0.14),
}

MASK_COLOR = (0.0, 0.0, 0.0)
EFFECTOR_COLOR = (1.0, 1.0, 1.0)

# Visual pools: Matching draws from "train", every other variant from "holdout"
VISUAL_POOLS = {
    "train": {
        "backgrounds": [0, 1, 2, 3],
        "textures": [0, 1],
        "lighting": (1.0, 1.0),
        "camera_jitter": 0.0,
    },
    "holdout": {
        "backgrounds": [4, 5, 6, 7],
        "textures": [2, 3],
        "lighting": (0.6, 0.8),
        "camera_jitter": 0.06,
    },
}

# Environment Settings
OBJECT_SIZE_RANGE = (0.13, 0.17)
SPAWN_MARGIN = 0.1
SPAWN_SEPARATION = 0.15
SPAWN_MAX_TRIES = 200
OBJECTS_PER_SCENE = (2, 3)
GRASP_RADIUS = 0.05
REACH_SUCCESS_RADIUS = 0.05
PLACE_SUCCESS_RADIUS = 0.1
PLACE_OFFSET = 0.07
EXPERT_GAIN = 0.8
EXPERT_MAX_DELTA = 0.1
ACTION_DECIMALS = 4
MAX_HORIZON = 4
TASK_KINDS = ["Reach", "Pick", "PlaceNear"]

# Vision-Language Question Kinds
VL_QUESTION_KINDS = ["relation", "attribute", "counting", "pointing", "effector"]
POINT_DECIMALS = 2

# Logging Configuration
LOG_DIR = Path("logs")
LOG_BACKUP_COUNT = 4  # Number of weeks to keep log backups
LOG_ROTATION = 'W0'  # Weekly rotation on Monday
LOG_EVERY = 50

# Results registry (SQLite file under the output root)
REGISTRY_FILE = "results.db"

# Experiment defaults; configs/default.yaml mirrors this tree
DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "data": {
        "robot_episodes": 2000,
        "vl_samples": 8000,
        "class_samples": 3000,
        "class_holdout_samples": 1000,
        "task_mix": {"Reach": 1.0, "Pick": 1.0, "PlaceNear": 1.0},
        "vl_question_kinds": list(VL_QUESTION_KINDS),
        "max_episode_steps": 30,
        "horizon": 2,
        "gate_episodes": 1000,
    },
    "encoder": {
        "patch_size": 4,
        "embed_dim": 64,
        "num_layers": 2,
        "num_heads": 4,
    },
    "pretrain": {
        "steps": 3000,
        "batch_size": 32,
        "lr": 1e-3,
        "target_accuracy": 0.9,
    },
    "policy": {
        "width": 128,
        "layers": 4,
        "heads": 4,
        "max_seq_len": 160,
        "horizon": 2,
        "encoder_mode": "dual",
        "codec_mode": "string",
    },
    "codec": {
        "decimals": ACTION_DECIMALS,
        "num_bins": 256,
    },
    "train": {
        "steps": 20000,
        "batch_size": 16,
        "robot_fraction": 0.5,
        "cotrain": True,
        "lr": ADAMW_LR,
        "betas": list(ADAMW_BETAS),
        "weight_decay": ADAMW_WEIGHT_DECAY,
        "eval_every": 2000,
        "checkpoint_every": 2000,
        "log_every": LOG_EVERY,
        "instruction_augmentation": False,
        "augment_prob": 0.5,
        "dataset_dir": "data",
        "encoder_checkpoint": "data/encoder.ckpt",
        "snapshot_samples": 8,
    },
    "eval": {
        "tasks": list(TASK_KINDS),
        "variants": [
            {"kind": "Matching"},
            {"kind": "MaskedBackground"},
            {"kind": "RandomBackground"},
            {"kind": "RandomTexture"},
            {"kind": "Distractors", "n": 2},
            {"kind": "Distractors", "n": 2, "similar": True},
            {"kind": "CameraJitter"},
            {"kind": "LightingShift"},
            {"kind": "Paraphrase"},
        ],
        "episodes_per_cell": 100,
        "max_steps": 30,
        "seeds": [1000],
        "batch_size": 25,
        "jobs": 1,
    },
    "probe": {
        "max_iter": 1000,
        "c": 1.0,
    },
}


def output_root() -> Path:
    """Output root, overridable through the VLA_OUTPUT_ROOT environment variable."""
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))


def _merge(base: Dict[str, Any], update: Dict[str, Any], path: str = "") -> Dict[str, Any]:
    for key, value in update.items():
        dotted = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"Unknown config key: {dotted}")
        if isinstance(base[key], dict) and isinstance(value, dict) and key != "task_mix":
            _merge(base[key], value, dotted + ".")
        else:
            base[key] = value
    return base


def parse_override(override: str) -> Dict[str, Any]:
    """
    Turn a ``key.sub=value`` flag into a nested dictionary.

    Args:
        override (str): Dotted key and a YAML scalar value

    Returns:
        Dict[str, Any]: Nested dictionary holding the single value
    """
    if "=" not in override:
        raise ConfigError(f"Override must look like key=value, got {override!r}")
    key, raw = override.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"Override has an empty key: {override!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse override value {raw!r}: {e}") from e
    nested: Dict[str, Any] = {}
    cursor = nested
    parts = key.split(".")
    for part in parts[:-1]:
        cursor = cursor.setdefault(part, {})
    cursor[parts[-1]] = value
    return nested


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Iterable[str] = (),
    seed: Optional[int] = None,
) -> Dict[str, Any]:
    """
    Build the experiment configuration: defaults, then the YAML file, then flag overrides.

    Args:
        path: Optional YAML key-value file
        overrides: Repeatable ``key=value`` strings, applied last
        seed: Master seed; replaces the file's ``seed`` when given

    Returns:
        Dict[str, Any]: Fully merged configuration tree
    """
    merged = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as fh:
                loaded = yaml.safe_load(fh) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Invalid YAML in {path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"Config file {path} must hold a mapping")
        _merge(merged, loaded)
    for override in overrides:
        _merge(merged, parse_override(override))
    if seed is not None:
        merged["seed"] = int(seed)
    check_horizons(merged)
    return merged


def check_horizons(cfg: Dict[str, Any]) -> None:
    """Label chunks and generated chunks must have the same length."""
    data_h, policy_h = cfg["data"]["horizon"], cfg["policy"]["horizon"]
    if int(data_h) != int(policy_h):
        raise ConfigError(f"data.horizon={data_h} and policy.horizon={policy_h} must match")
