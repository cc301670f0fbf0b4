"""latentpolicy trains and evaluates latent diffusion policies for robot manipulation.

An action trajectory auto-encoder (ATA) compresses chunks of actions into a
latent variable; a latent policy generator (LPG) learns to denoise that
latent from camera images and the task instruction.
"""

import logging
from typing import TYPE_CHECKING, Any

from latentpolicy._attach import attach
from latentpolicy._check import check
from latentpolicy._config import RunConfig, config_hash, load_config, save_config
from latentpolicy._errors import (
    CheckpointError,
    ConfigError,
    DemoFailure,
    DivergenceError,
    FrozenWeightsError,
    LatentPolicyError,
)
from latentpolicy._json_validation import validate_json
from latentpolicy._step import run_log, step
from latentpolicy._types import ActionChunk, ConditioningBundle, LatentVariable, NoiseSchedule, ObservationFrame

if TYPE_CHECKING:
    from latentpolicy._ata import AtaModel
    from latentpolicy._evaluation import EvalReport, evaluate
    from latentpolicy._harness import (
        benchmark_inference,
        export_latents,
        horizon_sweep,
        measure_pretrain_gain,
        run_ablation,
        run_pipeline,
        silhouette_permutation_test,
    )
    from latentpolicy._lpg import LpgModel
    from latentpolicy._policy import LatentPolicy, generate_actions, load_latent_policy
    from latentpolicy._training import train_ata, train_lpg

logging.getLogger("diffusers").setLevel(logging.WARNING)

__all__ = [
    "ActionChunk",
    "AtaModel",
    "CheckpointError",
    "ConditioningBundle",
    "ConfigError",
    "DemoFailure",
    "DivergenceError",
    "EvalReport",
    "FrozenWeightsError",
    "LatentPolicy",
    "LatentPolicyError",
    "LatentVariable",
    "LpgModel",
    "NoiseSchedule",
    "ObservationFrame",
    "RunConfig",
    "attach",
    "benchmark_inference",
    "check",
    "config_hash",
    "evaluate",
    "export_latents",
    "generate_actions",
    "horizon_sweep",
    "load_config",
    "load_latent_policy",
    "measure_pretrain_gain",
    "run_ablation",
    "run_log",
    "run_pipeline",
    "save_config",
    "silhouette_permutation_test",
    "step",
    "train_ata",
    "train_lpg",
    "validate_json",
]

_LAZY = {
    "AtaModel": "latentpolicy._ata",
    "EvalReport": "latentpolicy._evaluation",
    "evaluate": "latentpolicy._evaluation",
    "LpgModel": "latentpolicy._lpg",
    "LatentPolicy": "latentpolicy._policy",
    "generate_actions": "latentpolicy._policy",
    "load_latent_policy": "latentpolicy._policy",
    "train_ata": "latentpolicy._training",
    "train_lpg": "latentpolicy._training",
    "benchmark_inference": "latentpolicy._harness",
    "export_latents": "latentpolicy._harness",
    "horizon_sweep": "latentpolicy._harness",
    "measure_pretrain_gain": "latentpolicy._harness",
    "run_ablation": "latentpolicy._harness",
    "run_pipeline": "latentpolicy._harness",
    "silhouette_permutation_test": "latentpolicy._harness",
}


def __getattr__(name: str) -> Any:  # noqa: ANN401
    if name in _LAZY:
        import importlib

        return getattr(importlib.import_module(_LAZY[name]), name)

    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
