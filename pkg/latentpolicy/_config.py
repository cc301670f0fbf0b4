"""Module with configuration variables and the run configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import os
from contextvars import ContextVar
from pathlib import Path
from typing import Any

from dotenv import dotenv_values

from latentpolicy._errors import ConfigError

AnyType = Any  # Alias for any type

config_logger = logging.getLogger("Config")

# Run log
CURRENT_EXECUTION_LOG: ContextVar[list[dict] | None] = ContextVar(
    "_CURRENT_EXECUTION_LOG",
    default=None,
)
CURRENT_LOG_CONTAINER_STACK: ContextVar[list[list[dict]] | None] = ContextVar(
    "_CURRENT_LOG_CONTAINER_STACK",
    default=None,
)
ATTACH_LIMIT_BYTES: int | None = None  # None = unlimited

# Constants
ENV_PREFIX = "LATENTPOLICY_"
CONFIG_FILENAME = "config.env"
CHECKPOINT_FORMAT_VERSION = 1
EPISODE_FORMAT_VERSION = 1
ATA_ENCODER_LAYERS = 3
ATA_DECODER_LAYERS = 6
OBS_MLP_LAYERS = 3
TASK_IDS = ("reach", "push", "pick_place", "press", "open_slider", "pick_place_tight")
DEFAULT_TASKS = ("reach", "push", "pick_place", "press", "open_slider")
VIEW_IDS = ("front", "top")
SKILL_LABELS = ("approach", "grasp", "transport", "press", "pull", "release", "hold")
VARIANTS = ("full", "non_diffusion_lpg", "task_aware_ata", "obs_agnostic_ata", "no_pretrain", "prior_latent")
SAMPLERS = ("ddpm", "ddim")
NOISE_SCHEDULES = ("linear",)
QUALITY_FLAGS = ("navigation", "bimanual", "ambiguous_actions", "erratic_control")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Resolved settings of one run.

    Every field can be set in a flat `key=value` config file, through a
    `LATENTPOLICY_<KEY>` environment variable, or programmatically with
    `dataclasses.replace`.
    """

    # Model
    h: int = 16
    d_z: int = 64
    d_model: int = 256
    n_heads: int = 8
    dim_feedforward: int = 1024
    dropout: float = 0.0
    lpg_layers: int = 6
    d_s: int = 3
    d_a: int = 0  # canonical action width, 0 = widest embodiment in the data
    image_size: int = 64
    crop_size: int = 56
    feature_grid: int = 4
    # Optimisation
    w: float = 0.01  # KL weight
    lr_peak: float = 1e-4
    warmup_steps: int = 1000
    weight_decay: float = 1e-4
    batch_size: int = 64
    pretrain_epochs: int = 10
    ata_epochs: int = 200
    lpg_epochs: int = 100
    epoch_scale: float = 1.0
    # Diffusion
    T: int = 1000
    noise_schedule: str = "linear"
    sampler: str = "ddpm"
    sampler_steps: int = 1000
    # Data
    clip_quantile: float = 0.005
    val_fraction: float = 0.05
    mixture: tuple[tuple[str, float], ...] = ()
    tasks: tuple[str, ...] = DEFAULT_TASKS
    embodiment: str = "arm7"
    pretrain_embodiments: int = 3
    episodes_per_task: int = 50
    pretrain_episodes_per_task: int = 20
    demo_noise: float = 0.02
    demo_quality: str = "ph"
    # Evaluation
    step_limit: int = 400
    n_trials: int = 50
    execute_steps: int = 0  # 0 = execute the whole chunk
    variant: str = "full"
    # Runtime
    seed: int = 0
    device: str = "cpu"
    deterministic: bool = True

    @property
    def execution_horizon(self) -> int:
        return self.execute_steps or self.h

    def mixture_weights(self) -> dict[str, float]:
        return dict(self.mixture)

    def scaled_epochs(self, epochs: int) -> int:
        """Scales a phase's epoch count by `epoch_scale`, keeping at least one epoch."""
        return max(1, round(epochs * self.epoch_scale))


_FIELDS = {field.name: field for field in dataclasses.fields(RunConfig)}
_FIELD_BY_KEY = {name.lower(): name for name in _FIELDS}
_DEFAULTS = RunConfig()

_POSITIVE_INT = (
    "h", "d_z", "d_model", "n_heads", "dim_feedforward", "lpg_layers", "d_s", "image_size", "crop_size",
    "feature_grid", "batch_size", "T", "sampler_steps", "step_limit", "n_trials", "episodes_per_task",
    "pretrain_episodes_per_task",
)
_NON_NEGATIVE_INT = ("d_a", "warmup_steps", "pretrain_epochs", "ata_epochs", "lpg_epochs", "execute_steps", "seed")
_CHOICES = {
    "sampler": SAMPLERS,
    "noise_schedule": NOISE_SCHEDULES,
    "variant": VARIANTS,
    "demo_quality": ("ph", "mh"),
}


def _parse_bool(key: str, raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in {"1", "true", "yes", "on"}:
        return True
    if lowered in {"0", "false", "no", "off"}:
        return False
    raise ConfigError(key, f"expected a boolean, got {raw!r}")


def _parse_mixture(key: str, raw: str) -> tuple[tuple[str, float], ...]:
    entries = []
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        dataset_id, sep, weight = item.rpartition(":")
        if not sep or not dataset_id:
            raise ConfigError(key, f"expected 'dataset_id:weight', got {item!r}")
        try:
            entries.append((dataset_id.strip(), float(weight)))
        except ValueError as e:
            raise ConfigError(key, f"weight of {dataset_id!r} is not a number: {weight!r}") from e
    return tuple(entries)


def _parse_value(name: str, raw: str) -> AnyType:
    default = getattr(_DEFAULTS, name)
    try:
        if name == "mixture":
            return _parse_mixture(name, raw)
        if isinstance(default, bool):
            return _parse_bool(name, raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(item.strip() for item in raw.split(",") if item.strip())
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(name, f"cannot parse {raw!r} as {type(default).__name__}") from e
    return raw.strip()


def _format_value(value: AnyType) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(f"{item[0]}:{item[1]!r}" if isinstance(item, tuple) else str(item) for item in value)
    return str(value)


def validate_config(config: RunConfig) -> RunConfig:
    """Checks every field of `config` against its domain.

    Raises:
        ConfigError: Naming the first offending key.
    """
    for key in _POSITIVE_INT:
        if getattr(config, key) < 1:
            raise ConfigError(key, f"must be a positive integer, got {getattr(config, key)}")
    for key in _NON_NEGATIVE_INT:
        if getattr(config, key) < 0:
            raise ConfigError(key, f"must be non-negative, got {getattr(config, key)}")
    for key, choices in _CHOICES.items():
        if getattr(config, key) not in choices:
            raise ConfigError(key, f"must be one of {', '.join(choices)}, got {getattr(config, key)!r}")

    if config.w < 0:
        raise ConfigError("w", f"KL weight must be >= 0, got {config.w}")
    if config.lr_peak <= 0:
        raise ConfigError("lr_peak", f"must be > 0, got {config.lr_peak}")
    if config.weight_decay < 0:
        raise ConfigError("weight_decay", f"must be >= 0, got {config.weight_decay}")
    if not 0 <= config.dropout < 1:
        raise ConfigError("dropout", f"must lie in [0, 1), got {config.dropout}")
    if config.epoch_scale <= 0:
        raise ConfigError("epoch_scale", f"must be > 0, got {config.epoch_scale}")
    if not 0 <= config.clip_quantile < 0.5:
        raise ConfigError("clip_quantile", f"must lie in [0, 0.5), got {config.clip_quantile}")
    if not 0 <= config.val_fraction < 1:
        raise ConfigError("val_fraction", f"must lie in [0, 1), got {config.val_fraction}")
    if config.demo_noise < 0:
        raise ConfigError("demo_noise", f"must be >= 0, got {config.demo_noise}")
    if config.d_model % config.n_heads:
        raise ConfigError("n_heads", f"d_model={config.d_model} is not divisible by n_heads={config.n_heads}")
    if config.sampler_steps > config.T:
        raise ConfigError("sampler_steps", f"{config.sampler_steps} exceeds T={config.T}")
    if config.crop_size > config.image_size:
        raise ConfigError("crop_size", f"{config.crop_size} exceeds image_size={config.image_size}")
    if config.execute_steps > config.h:
        raise ConfigError("execute_steps", f"{config.execute_steps} exceeds h={config.h}")
    if config.pretrain_embodiments < 2:
        raise ConfigError("pretrain_embodiments", f"need at least 2, got {config.pretrain_embodiments}")
    if not config.tasks:
        raise ConfigError("tasks", "at least one task is required")
    for task_id in config.tasks:
        if task_id not in TASK_IDS:
            raise ConfigError("tasks", f"unknown task {task_id!r}")
    for dataset_id, weight in config.mixture:
        if weight <= 0:
            raise ConfigError("mixture", f"weight of {dataset_id!r} must be > 0, got {weight}")
    return config


def config_from_mapping(values: dict[str, str | None], base: RunConfig | None = None) -> RunConfig:
    """Builds a config from raw `key -> text` pairs layered over `base`.

    Raises:
        ConfigError: For an unknown key or an unparsable/out-of-domain value.
    """
    updates: dict[str, AnyType] = {}
    for key, raw in values.items():
        name = _FIELD_BY_KEY.get(key.strip().lower())
        if name is None:
            raise ConfigError(key, "unknown configuration key")
        updates[name] = _parse_value(name, raw or "")
    return validate_config(dataclasses.replace(base or _DEFAULTS, **updates))


def _environment_overrides() -> dict[str, str | None]:
    overrides = {}
    for name in _FIELDS:
        env_name = f"{ENV_PREFIX}{name.upper()}"
        if env_name in os.environ:
            overrides[name] = os.environ[env_name]
    return overrides


def load_config(
    path: str | Path | None = None,
    *,
    overrides: dict[str, str | None] | None = None,
    echo_dir: str | Path | None = None,
    use_environment: bool = True,
) -> RunConfig:
    """Loads a run configuration from a flat `key=value` file.

    Keys left out of the file keep their defaults. Values are layered as
    defaults < file < `LATENTPOLICY_<KEY>` environment variables < `overrides`.

    Args:
        path: Config file to read. `None` starts from the defaults.
        overrides: Raw values applied last (the CLI passes `--seed` here).
        echo_dir: When given, the resolved config is written there as `config.env`.
        use_environment: Whether `LATENTPOLICY_<KEY>` variables are applied.

    Returns:
        RunConfig: The fully resolved and validated configuration.

    Raises:
        FileNotFoundError: If `path` does not exist.
        ConfigError: For an unknown key or a value outside its domain.

    ---
    ### Example usage:

    ```python
    config = load_config("runs/base.env", overrides={"seed": "3"}, echo_dir="runs/seed3")
    assert config.h == 16
    ```
    """
    values: dict[str, str | None] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Config file not found: {path}")
        values.update(dotenv_values(path))
    config = config_from_mapping(values)
    if use_environment and (env_values := _environment_overrides()):
        config = config_from_mapping(env_values, base=config)
    if overrides:
        config = config_from_mapping(overrides, base=config)

    config_logger.info(f"Resolved config {config_hash(config)[:12]} from {path or 'defaults'}")
    if echo_dir is not None:
        save_config(config, Path(echo_dir) / CONFIG_FILENAME)
    return config


def config_items(config: RunConfig) -> dict[str, str]:
    return {name: _format_value(getattr(config, name)) for name in sorted(_FIELDS)}


def dump_config(config: RunConfig) -> str:
    """Returns the canonical text form of `config` (sorted `key=value` lines)."""
    lines = [f"{name}={value}" for name, value in config_items(config).items()]
    return "\n".join(lines) + "\n"


def save_config(config: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(config), encoding="utf-8")
    return path


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(dump_config(config).encode("utf-8")).hexdigest()


def diff_configs(left: RunConfig, right: RunConfig) -> dict[str, tuple[AnyType, AnyType]]:
    """Returns `name -> (left value, right value)` for every field that differs."""
    return {
        name: (getattr(left, name), getattr(right, name))
        for name in _FIELDS
        if getattr(left, name) != getattr(right, name)
    }
