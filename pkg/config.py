import os
from dataclasses import dataclass, fields, replace, asdict
from typing import Optional

from dotenv import dotenv_values

from errors import ConfigError

# --- UNIFIED PATH CONFIGURATION ---
APP_DIR = os.path.dirname(os.path.abspath(__file__))
LOCAL_DATA_PATH = os.path.join(APP_DIR, "data")
# Use the path from the environment if it is set, otherwise the local default
DATA_PATH = os.environ.get("DEFE_DATA_PATH", LOCAL_DATA_PATH)
DEFAULT_CONFIG_PATH = os.environ.get("DEFE_CONFIG_PATH", os.path.join(DATA_PATH, "defe.conf"))

CONTROLLER_KINDS = ("nn", "tree")
FEATURE_SETS = ("all", "primitive")


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a DEFE run. Defaults reproduce the reference configuration."""

    seed: int = 0
    validation_fraction: float = 0.2

    # --- Event weights and significance ---
    normalize_weights: bool = True
    n_s_expected: float = 100.0
    n_b_expected: float = 1000.0
    b_regular: float = 10.0

    # --- Discriminative partition ---
    partition_depth: int = 1
    alpha: float = 0.05
    controller_kind: str = "nn"
    controller_hidden: int = 30
    controller_epochs: int = 5
    controller_threshold: float = 0.5
    controller_tree_depth: int = 3
    balance_floor: float = 0.2

    # --- Feature learners ---
    feature_set: str = "all"
    schedule_s1: tuple = (250, 200, 150, 100, 50)
    schedule_s2: tuple = (200, 200, 150, 100, 50)
    schedule_s3: tuple = (300, 250, 200, 200, 50)
    top_width: int = 50
    noise_rate: float = 0.1
    pretrain_epochs: int = 10
    finetune_epochs: int = 10
    finetune_weighted: bool = True
    workers: int = 1

    # --- PCA and final classifier ---
    pca_enabled: bool = True
    pca_components: int = 300
    final_layers: tuple = (200, 100, 50)
    final_epochs: int = 150

    # --- Shared SGD settings ---
    batch_size: int = 100
    momentum: float = 0.5
    lr0: float = 0.1
    lr_decay: float = 0.997
    early_stop_rise: float = 0.002
    early_stop_cost_eps: float = 0.0001
    early_stop_patience: int = 10

    # --- Exports ---
    histogram_bins: int = 50

    @property
    def schedules(self) -> tuple:
        return (self.schedule_s1, self.schedule_s2, self.schedule_s3)

    def to_lines(self) -> list:
        """Flat `key = value` lines, the same grammar `load_config` reads."""
        return [f"{key} = {_format_value(value)}" for key, value in asdict(self).items()]


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key: str, raw: Optional[str], default):
    if raw is None or raw.strip() == "":
        raise ConfigError(f"Config key '{key}' has no value.", source=__name__)
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"Config key '{key}' has invalid value '{text}'.", source=__name__) from None
    return text


def validate_config(config: RunConfig) -> RunConfig:
    def check(condition: bool, message: str):
        if not condition:
            raise ConfigError(message, source=__name__)

    check(0.0 < config.validation_fraction < 1.0, "validation_fraction must lie in (0, 1).")
    check(config.n_s_expected > 0 and config.n_b_expected > 0, "n_s_expected and n_b_expected must be positive.")
    check(config.b_regular >= 0, "b_regular must be nonnegative.")
    check(config.partition_depth in (1, 2), "partition_depth must be 1 or 2.")
    check(0.0 <= config.alpha <= 1.0, "alpha must lie in [0, 1].")
    check(config.controller_kind in CONTROLLER_KINDS, f"controller_kind must be one of {CONTROLLER_KINDS}.")
    check(config.controller_hidden >= 1, "controller_hidden must be at least 1.")
    check(config.controller_epochs >= 0, "controller_epochs must be nonnegative.")
    check(0.0 < config.controller_threshold < 1.0, "controller_threshold must lie in (0, 1).")
    check(config.controller_tree_depth >= 1, "controller_tree_depth must be at least 1.")
    check(0.0 <= config.balance_floor < 0.5, "balance_floor must lie in [0, 0.5).")
    check(config.feature_set in FEATURE_SETS, f"feature_set must be one of {FEATURE_SETS}.")
    check(config.top_width >= 1, "top_width must be at least 1.")
    for name, schedule in zip(("schedule_s1", "schedule_s2", "schedule_s3"), config.schedules):
        check(len(schedule) >= 1 and all(size >= 1 for size in schedule), f"{name} must list positive layer sizes.")
        check(schedule[-1] == config.top_width, f"{name} must end in top_width ({config.top_width}).")
    check(0.0 <= config.noise_rate <= 1.0, "noise_rate must lie in [0, 1].")
    check(config.pretrain_epochs >= 0, "pretrain_epochs must be nonnegative.")
    check(config.finetune_epochs >= 0, "finetune_epochs must be nonnegative.")
    check(config.workers >= 1, "workers must be at least 1.")
    check(config.pca_components >= 1, "pca_components must be at least 1.")
    check(all(size >= 1 for size in config.final_layers), "final_layers must list positive layer sizes.")
    check(config.final_epochs >= 0, "final_epochs must be nonnegative.")
    check(config.batch_size >= 1, "batch_size must be at least 1.")
    check(0.0 <= config.momentum < 1.0, "momentum must lie in [0, 1).")
    check(config.lr0 > 0.0, "lr0 must be positive.")
    check(0.0 < config.lr_decay <= 1.0, "lr_decay must lie in (0, 1].")
    check(config.early_stop_rise >= 0 and config.early_stop_cost_eps >= 0, "early-stop tolerances must be nonnegative.")
    check(config.early_stop_patience >= 1, "early_stop_patience must be at least 1.")
    check(config.histogram_bins >= 1, "histogram_bins must be at least 1.")
    return config


def config_from_mapping(values: dict, base: RunConfig = None) -> RunConfig:
    """Builds a validated RunConfig from raw string values; unknown keys are rejected."""
    base = base or RunConfig()
    known = {f.name: getattr(base, f.name) for f in fields(RunConfig)}
    updates = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"Unknown config key '{key}'.", source=__name__)
        updates[key] = _parse_value(key, raw, known[key])
    return validate_config(replace(base, **updates))


def load_config(path: Optional[str] = None, seed: Optional[int] = None) -> RunConfig:
    """
    Loads a flat `key = value` config file on top of the defaults.

    Args:
        path (str, optional): Config file. Falls back to DEFAULT_CONFIG_PATH when it exists.
        seed (int, optional): Overrides the `seed` key (the CLI `--seed` flag).
    Returns:
        RunConfig: The validated configuration.
    """
    if path is None and os.path.exists(DEFAULT_CONFIG_PATH):
        path = DEFAULT_CONFIG_PATH
    values = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"Config file '{path}' was not found.", source=__name__)
        values = dict(dotenv_values(path))
    config = config_from_mapping(values)
    if seed is not None:
        config = validate_config(replace(config, seed=int(seed)))
    return config
