"""Module with the inference-time policies and their construction from checkpoints."""

from __future__ import annotations

import dataclasses
import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import torch

from latentpolicy import _config as cfg
from latentpolicy import _internal as utils
from latentpolicy._ata import AtaModel
from latentpolicy._checkpoint import CheckpointState, load_checkpoint
from latentpolicy._datapipe import ActionStats, center_crop, choose_view_id, denormalize_actions
from latentpolicy._encoders import FrozenEncoders, build_frozen_encoders, encode_image, encode_instruction
from latentpolicy._errors import CheckpointError
from latentpolicy._lpg import LatentRegressor, LpgModel, make_noise_schedule, sample_latent
from latentpolicy._types import ActionChunk, ObservationFrame

policy_logger = logging.getLogger("Sampler")


@dataclasses.dataclass(frozen=True, eq=False)
class FrameInputs:
    """Model inputs extracted from a batch of observation frames."""

    features: torch.Tensor
    proprio: torch.Tensor
    present: torch.Tensor
    f_text: torch.Tensor


def frame_inputs(
    encoders: FrozenEncoders,
    frames: Sequence[ObservationFrame],
    crop_size: int,
    d_s: int,
    instructions: Sequence[str] | None = None,
) -> FrameInputs:
    """Encodes frames with the evaluation view, centre-cropped, and their instructions."""
    device = next(encoders.parameters()).device
    views = [frame.view(choose_view_id(frame.view_ids, None, training=False)) for frame in frames]
    images = np.stack([center_crop(image, crop_size) for image in views])
    proprio = np.stack([frame.proprio if frame.proprio is not None else np.zeros(d_s, np.float32) for frame in frames])
    texts = list(instructions) if instructions is not None else [frame.task_instruction for frame in frames]
    return FrameInputs(
        features=encode_image(encoders.image, images),
        proprio=torch.as_tensor(proprio, dtype=torch.float32, device=device),
        present=torch.tensor([frame.proprio is not None for frame in frames], device=device),
        f_text=encode_instruction(encoders.instruction, texts),
    )


def dataset_stats_from_extra(extra: dict) -> dict[str, ActionStats]:
    """Action statistics per dataset id stored with a checkpoint."""
    return {dataset_id: ActionStats.from_dict(data) for dataset_id, data in extra.get("stats", {}).items()}


def stats_from_extra(extra: dict) -> dict[str, ActionStats]:
    """Action statistics per embodiment id, as used to denormalize generated actions.

    Raises:
        CheckpointError: If an embodiment maps to a dataset without statistics.
    """
    by_dataset = dataset_stats_from_extra(extra)
    by_embodiment = {}
    for embodiment_id, dataset_id in extra.get("embodiment_datasets", {}).items():
        if dataset_id not in by_dataset:
            raise CheckpointError(f"Embodiment {embodiment_id!r} maps to dataset {dataset_id!r} without statistics")
        by_embodiment[embodiment_id] = by_dataset[dataset_id]
    return by_embodiment


def _to_chunks(
    actions: np.ndarray,
    frames: Sequence[ObservationFrame],
    stats: dict[str, ActionStats],
) -> list[ActionChunk]:
    chunks = []
    for values, frame in zip(actions, frames, strict=True):
        if frame.embodiment_id not in stats:
            raise ValueError(f"No action statistics for embodiment {frame.embodiment_id!r}")
        embodiment_stats = stats[frame.embodiment_id]
        native = denormalize_actions(np.clip(values[:, : embodiment_stats.action_dim], -1.0, 1.0), embodiment_stats)
        chunks.append(ActionChunk(values=native, pad_mask=np.ones(len(native), dtype=bool), normalized=False))
    return chunks


class LatentPolicy:
    """Frozen encoders, the ATA decoder and a latent generator.

    `mode` selects how the latent is produced: `diffusion` samples it with the
    LPG, `regression` predicts it with a plain transformer, and `prior` uses
    the prior mean `z = 0`.
    """

    def __init__(
        self,
        config: cfg.RunConfig,
        encoders: FrozenEncoders,
        ata: AtaModel,
        stats: dict[str, ActionStats],
        generator: LpgModel | LatentRegressor | None = None,
        *,
        mode: str = "diffusion",
        sampler: str | None = None,
        steps: int | None = None,
    ) -> None:
        if mode not in ("diffusion", "regression", "prior"):
            raise ValueError(f"Unknown latent policy mode {mode!r}")
        if mode != "prior" and generator is None:
            raise ValueError(f"Mode {mode!r} needs a latent generator")
        self.config = config
        self.encoders = encoders
        self.ata = ata.eval()
        self.generator = generator.eval() if generator is not None else None
        self.stats = stats
        self.mode = mode
        self.sampler = sampler or config.sampler
        self.steps = steps or config.sampler_steps
        self.schedule = make_noise_schedule(config.T, config.noise_schedule)

    @property
    def name(self) -> str:
        return f"latent-{self.mode}" + (f"-{self.sampler}{self.steps}" if self.mode == "diffusion" else "")

    @torch.no_grad()
    def latents(self, inputs: FrameInputs, rng: torch.Generator | None = None) -> torch.Tensor:
        batch = inputs.features.shape[0]
        if self.mode == "prior":
            return torch.zeros(batch, self.ata.d_z, device=inputs.features.device)
        condition = self.generator.condition(inputs.features, inputs.f_text, inputs.proprio, inputs.present)
        if self.mode == "regression":
            return self.generator(condition)
        steps = self.steps if self.sampler == "ddim" else None
        return sample_latent(self.generator, condition, self.schedule, self.sampler, steps, rng)

    @torch.no_grad()
    def plan(
        self,
        frames: Sequence[ObservationFrame],
        rng: torch.Generator | None = None,
        *,
        instructions: Sequence[str] | None = None,
    ) -> list[ActionChunk]:
        """Generates one native action chunk per frame."""
        inputs = frame_inputs(self.encoders, frames, self.config.crop_size, self.config.d_s, instructions)
        z = self.latents(inputs, rng)
        f_obs = self.ata.obs_encoder(inputs.features, inputs.proprio, inputs.present) if self.ata.obs_aware else None
        actions = self.ata.decode(z, f_obs, inputs.f_text if self.ata.task_aware else None)
        return _to_chunks(actions.cpu().numpy(), frames, self.stats)


class TrajectoryDiffusionPolicy:
    """Baseline that diffuses whole normalized action chunks instead of latents."""

    def __init__(
        self,
        config: cfg.RunConfig,
        encoders: FrozenEncoders,
        model: LpgModel,
        stats: dict[str, ActionStats],
        *,
        sampler: str | None = None,
        steps: int | None = None,
    ) -> None:
        if model.target != "trajectory":
            raise ValueError("TrajectoryDiffusionPolicy needs a trajectory-space model")
        self.config = config
        self.encoders = encoders
        self.model = model.eval()
        self.stats = stats
        self.sampler = sampler or config.sampler
        self.steps = steps or config.sampler_steps
        self.schedule = make_noise_schedule(config.T, config.noise_schedule)

    @property
    def name(self) -> str:
        return f"trajectory-{self.sampler}{self.steps}"

    @torch.no_grad()
    def plan(
        self,
        frames: Sequence[ObservationFrame],
        rng: torch.Generator | None = None,
        *,
        instructions: Sequence[str] | None = None,
    ) -> list[ActionChunk]:
        inputs = frame_inputs(self.encoders, frames, self.config.crop_size, self.config.d_s, instructions)
        condition = self.model.condition(inputs.features, inputs.f_text, inputs.proprio, inputs.present)
        steps = self.steps if self.sampler == "ddim" else None
        actions = sample_latent(self.model, condition, self.schedule, self.sampler, steps, rng)
        return _to_chunks(actions.cpu().numpy(), frames, self.stats)


class RandomPolicy:
    """Uniformly random normalized actions, mapped into each embodiment's action range."""

    name = "random"

    def __init__(self, h: int, stats: dict[str, ActionStats]) -> None:
        self.h = h
        self.stats = stats

    def plan(
        self,
        frames: Sequence[ObservationFrame],
        rng: torch.Generator | None = None,
        *,
        instructions: Sequence[str] | None = None,  # noqa: ARG002
    ) -> list[ActionChunk]:
        width = max(stats.action_dim for stats in self.stats.values())
        actions = torch.rand(len(frames), self.h, width, generator=rng, dtype=torch.float64) * 2.0 - 1.0
        return _to_chunks(actions.numpy(), frames, self.stats)


def generate_actions(
    policy: LatentPolicy | TrajectoryDiffusionPolicy | RandomPolicy,
    frame: ObservationFrame,
    rng: torch.Generator | None = None,
    *,
    instruction: str | None = None,
) -> ActionChunk:
    """Observation to native action chunk for a single frame.

    `instruction` replaces the frame's own instruction when given.

    ---
    ### Example usage:

    ```python
    policy = load_latent_policy(run_dir / "ata.pt", run_dir / "lpg.pt", sampler="ddim", steps=50)
    chunk = generate_actions(policy, frame, seeded_torch_rng(0, "demo"))
    for action in chunk.values:
        state, frame, success, done = step(state, action)
    ```
    """
    return policy.plan([frame], rng, instructions=None if instruction is None else [instruction])[0]


def restore_ata(state: CheckpointState, device: str | torch.device = "cpu") -> tuple[FrozenEncoders, AtaModel]:
    """Rebuilds the frozen encoders and the ATA stored in an `ata` checkpoint."""
    if state.kind != "ata":
        raise CheckpointError(f"Expected an ata checkpoint, got {state.kind!r}")
    extra = state.extra
    encoders = build_frozen_encoders(state.config)
    encoders.load_state_dict(state.models["encoders"])
    ata = AtaModel(
        state.config,
        extra["action_dim"],
        encoders.feature_dim,
        task_aware=extra.get("task_aware", False),
        obs_aware=extra.get("obs_aware", True),
    )
    ata.load_state_dict(state.models["ata"])
    return encoders.to(device), utils.freeze(ata.to(device))


def restore_generator(
    state: CheckpointState,
    feature_dim: int,
    device: str | torch.device = "cpu",
) -> LpgModel | LatentRegressor:
    """Rebuilds the model stored in an `lpg`, `regressor` or `trajectory` checkpoint."""
    if state.kind == "lpg":
        model: LpgModel | LatentRegressor = LpgModel(state.config, feature_dim)
    elif state.kind == "regressor":
        model = LatentRegressor(state.config, feature_dim)
    elif state.kind == "trajectory":
        model = LpgModel(state.config, feature_dim, target="trajectory", action_dim=state.extra["action_dim"])
    else:
        raise CheckpointError(f"Checkpoint of kind {state.kind!r} holds no latent generator")
    model.load_state_dict(state.models[state.kind])
    return model.to(device).eval()


def check_compatible(ata_config: cfg.RunConfig, generator_config: cfg.RunConfig) -> None:
    for key in ("h", "d_z", "d_model"):
        if getattr(ata_config, key) != getattr(generator_config, key):
            raise CheckpointError(
                f"Incompatible checkpoints: {key}={getattr(ata_config, key)} in the ATA, "
                f"{getattr(generator_config, key)} in the generator",
            )


def load_latent_policy(
    ata_path: str | Path,
    generator_path: str | Path | None = None,
    *,
    sampler: str | None = None,
    steps: int | None = None,
    device: str = "cpu",
) -> LatentPolicy:
    """Loads a latent policy; without `generator_path` it decodes the prior mean."""
    device_ = utils.resolve_device(device)
    ata_state = load_checkpoint(ata_path)
    encoders, ata = restore_ata(ata_state, device_)
    stats = stats_from_extra(ata_state.extra)
    if generator_path is None:
        return LatentPolicy(ata_state.config, encoders, ata, stats, mode="prior", sampler=sampler, steps=steps)
    generator_state = load_checkpoint(generator_path)
    if generator_state.kind not in ("lpg", "regressor"):
        raise CheckpointError(f"{generator_path} holds a {generator_state.kind!r} checkpoint, not lpg or regressor")
    check_compatible(ata_state.config, generator_state.config)
    generator = restore_generator(generator_state, encoders.feature_dim, device_)
    mode = "regression" if generator_state.kind == "regressor" else "diffusion"
    policy_logger.info(f"Loaded {mode} policy from {ata_path} and {generator_path}")
    config = generator_state.config
    return LatentPolicy(config, encoders, ata, stats, generator, mode=mode, sampler=sampler, steps=steps)


def load_trajectory_policy(
    path: str | Path,
    *,
    sampler: str | None = None,
    steps: int | None = None,
    device: str = "cpu",
) -> TrajectoryDiffusionPolicy:
    device_ = utils.resolve_device(device)
    state = load_checkpoint(path)
    if state.kind != "trajectory":
        raise CheckpointError(f"Expected a trajectory checkpoint at {path}, got {state.kind!r}")
    encoders = build_frozen_encoders(state.config)
    encoders.load_state_dict(state.models["encoders"])
    encoders = encoders.to(device_)
    model = restore_generator(state, encoders.feature_dim, device_)
    return TrajectoryDiffusionPolicy(
        state.config,
        encoders,
        model,
        stats_from_extra(state.extra),
        sampler=sampler,
        steps=steps,
    )
