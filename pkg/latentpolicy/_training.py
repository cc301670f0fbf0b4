"""Module with the two training stages: the ATA first, then the LPG on its frozen latents."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from collections.abc import Callable, Sequence
from pathlib import Path

import torch
from diffusers.optimization import get_cosine_schedule_with_warmup
from torch import nn

from latentpolicy import _config as cfg
from latentpolicy import _internal as utils
from latentpolicy._ata import AtaModel, ata_loss
from latentpolicy._checkpoint import CheckpointReceipt, CheckpointState, load_checkpoint, save_checkpoint
from latentpolicy._datapipe import Batch, TrainingStream, build_training_stream
from latentpolicy._encoders import FrozenEncoders, build_frozen_encoders, encode_image, encode_instruction
from latentpolicy._episodes import EpisodeManifest
from latentpolicy._errors import CheckpointError, DivergenceError
from latentpolicy._lpg import FrozenGuard, LatentRegressor, LpgModel, lpg_loss, make_noise_schedule, regression_loss
from latentpolicy._policy import restore_ata, restore_generator

trainer_logger = logging.getLogger("Trainer")

BatchLoss = Callable[["TensorBatch", torch.Generator], tuple[torch.Tensor, dict[str, float]]]


@dataclasses.dataclass(frozen=True, eq=False)
class TensorBatch:
    features: torch.Tensor
    proprio: torch.Tensor
    present: torch.Tensor
    actions: torch.Tensor
    pad_mask: torch.Tensor
    dim_mask: torch.Tensor
    f_text: torch.Tensor


def batch_tensors(batch: Batch, encoders: FrozenEncoders, device: torch.device) -> TensorBatch:
    """Moves a batch onto `device` and runs the frozen encoders on its images and instructions."""
    return TensorBatch(
        features=encode_image(encoders.image, batch.images),
        proprio=torch.as_tensor(batch.proprio, device=device),
        present=torch.as_tensor(batch.proprio_present, device=device),
        actions=torch.as_tensor(batch.actions, device=device),
        pad_mask=torch.as_tensor(batch.pad_mask, device=device),
        dim_mask=torch.as_tensor(batch.dim_mask, device=device),
        f_text=encode_instruction(encoders.instruction, batch.instructions),
    )


@dataclasses.dataclass(frozen=True)
class TrainingResult:
    """Outcome of one training phase.

    Attributes:
        checkpoint: Path of the best-validation checkpoint.
        receipt: Receipt of the last write of that checkpoint.
        history: Per-epoch `epoch`, `train_loss`, `val_loss` and `lr`.
        best_val_loss: Validation loss of the retained checkpoint.
        best_epoch: Epoch the retained checkpoint comes from.
        steps: Optimizer steps taken.
    """

    checkpoint: Path
    receipt: CheckpointReceipt
    history: list[dict[str, float]]
    best_val_loss: float
    best_epoch: int
    steps: int


def make_optimizer(
    parameters: Sequence[nn.Parameter],
    config: cfg.RunConfig,
    total_steps: int,
) -> tuple[torch.optim.AdamW, torch.optim.lr_scheduler.LambdaLR]:
    """AdamW with a linear warmup to `lr_peak` over `warmup_steps`, then cosine decay to zero at `total_steps`."""
    optimizer = torch.optim.AdamW(parameters, lr=config.lr_peak, weight_decay=config.weight_decay)
    scheduler = get_cosine_schedule_with_warmup(
        optimizer,
        num_warmup_steps=config.warmup_steps,
        num_training_steps=max(total_steps, config.warmup_steps),
    )
    return optimizer, scheduler


def learning_rate(config: cfg.RunConfig, step: int, total_steps: int) -> float:
    """Learning rate the schedule of `make_optimizer` applies at optimizer step `step`."""
    _, scheduler = make_optimizer([nn.Parameter(torch.zeros(1))], config, total_steps)
    return config.lr_peak * scheduler.lr_lambdas[0](step)


def _seed_torch(config: cfg.RunConfig, label: str) -> None:
    torch.manual_seed(int(utils.seeded_rng(config.seed, label).integers(2**62)))


def _ensure_finite(phase: str, epoch: int, step: int, loss: torch.Tensor, components: dict[str, float]) -> None:
    if not bool(torch.isfinite(loss)):
        trainer_logger.error(f"{phase} loss is not finite at epoch {epoch}, step {step}: {components}")
        raise DivergenceError(phase, epoch, step, components)


def _validate(
    phase: str,
    stream: TrainingStream,
    encoders: FrozenEncoders,
    device: torch.device,
    batch_loss: BatchLoss,
    config: cfg.RunConfig,
) -> float | None:
    rng = utils.seeded_torch_rng(config.seed, f"{phase}/validation", device)
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in stream.validation_batches():
            loss, _ = batch_loss(batch_tensors(batch, encoders, device), rng)
            total += float(loss) * len(batch)
            count += len(batch)
    return total / count if count else None


def _fit(
    phase: str,
    modules: Sequence[nn.Module],
    stream: TrainingStream,
    encoders: FrozenEncoders,
    epochs: int,
    config: cfg.RunConfig,
    batch_loss: BatchLoss,
    save_best: Callable[[int, int, float, list[dict[str, float]], dict], CheckpointReceipt],
    epoch_end: Callable[[], None] | None = None,
) -> TrainingResult:
    device = utils.resolve_device(config.device)
    parameters = [p for module in modules for p in module.parameters() if p.requires_grad]
    total_steps = epochs * stream.batches_per_epoch
    optimizer, scheduler = make_optimizer(parameters, config, total_steps)
    rng = utils.seeded_torch_rng(config.seed, f"{phase}/train", device)
    trainer_logger.info(f"{phase}: {epochs} epochs x {stream.batches_per_epoch} batches, {len(parameters)} tensors")

    history: list[dict[str, float]] = []
    best_val, best_epoch, receipt, step = math.inf, 0, None, 0
    for epoch in range(1, epochs + 1):
        for module in modules:
            module.train()
        losses = []
        for batch in stream:
            loss, components = batch_loss(batch_tensors(batch, encoders, device), rng)
            _ensure_finite(phase, epoch, step, loss, components)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            scheduler.step()
            step += 1
            losses.append(components["loss"])
            trainer_logger.debug(f"{phase} step {step}: {components}")
        for module in modules:
            module.eval()
        train_loss = sum(losses) / len(losses)
        val_loss = _validate(phase, stream, encoders, device, batch_loss, config)
        val_loss = train_loss if val_loss is None else val_loss
        if not math.isfinite(val_loss):
            raise DivergenceError(phase, epoch, step, {"val_loss": val_loss})
        if epoch_end is not None:
            epoch_end()
        lr = scheduler.get_last_lr()[0]
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
        trainer_logger.info(f"{phase} epoch {epoch}/{epochs}: train {train_loss:.5f}, val {val_loss:.5f}")
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            receipt = save_best(epoch, step, val_loss, history, optimizer.state_dict())
    trainer_logger.info(f"{phase} done: best val {best_val:.5f} at epoch {best_epoch}")
    return TrainingResult(
        checkpoint=receipt.path,
        receipt=receipt,
        history=history,
        best_val_loss=best_val,
        best_epoch=best_epoch,
        steps=step,
    )


def _canonical_width(config: cfg.RunConfig, manifests: Sequence[EpisodeManifest], init: CheckpointState | None) -> int:
    if config.d_a:
        return config.d_a
    if init is not None:
        return int(init.extra["action_dim"])
    return max(manifest.native_action_dim for manifest in manifests)


def stats_extra(stream: TrainingStream) -> dict[str, cfg.AnyType]:
    """Checkpoint entries holding per-dataset action statistics and the dataset used per embodiment."""
    return {
        "stats": {dataset_id: stats.to_dict() for dataset_id, stats in stream.stats.items()},
        "embodiment_datasets": stream.embodiment_datasets,
    }


def _epochs(config: cfg.RunConfig, mode: str, finetune_epochs: int) -> int:
    return config.scaled_epochs(config.pretrain_epochs if mode == "pretrain" else finetune_epochs)


def train_ata(
    config: cfg.RunConfig,
    manifests: Sequence[EpisodeManifest],
    run_dir: str | Path,
    *,
    mode: str = "finetune",
    init: str | Path | None = None,
    name: str | None = None,
) -> TrainingResult:
    """Trains the ATA and keeps the best-validation checkpoint.

    Args:
        config: Run config; `variant` selects the task-aware or obs-agnostic ATA.
        manifests: Datasets to train on.
        run_dir: Directory receiving the checkpoint.
        mode: `pretrain` (no proprio, `pretrain_epochs`) or `finetune` (`ata_epochs`).
        init: ATA checkpoint whose encoders and weights seed this phase.
        name: Checkpoint file stem, `ata` or `ata_pretrain` by default.

    Raises:
        DivergenceError: If a training loss becomes NaN or infinite.

    ---
    ### Example usage:

    ```python
    pretrained = train_ata(config, pretrain_manifests, run_dir, mode="pretrain")
    result = train_ata(config, [downstream], run_dir, init=pretrained.checkpoint)
    ```
    """
    device = utils.resolve_device(config.device)
    utils.set_deterministic(config.deterministic)
    phase = f"ata-{mode}"
    init_state = load_checkpoint(init, expected_config=config) if init is not None else None
    width = _canonical_width(config, manifests, init_state)
    stream = build_training_stream(
        manifests,
        config,
        utils.seeded_rng(config.seed, f"stream/{phase}"),
        mode=mode,
        action_width=width,
    )

    _seed_torch(config, f"init/{phase}")
    if init_state is not None:
        encoders, ata = restore_ata(init_state, device)
        if ata.action_dim != width:
            raise CheckpointError(f"Pre-trained ATA has action width {ata.action_dim}, this run needs {width}")
        ata.requires_grad_(True)
    else:
        encoders = build_frozen_encoders(config).to(device)
        ata = AtaModel(
            config,
            width,
            encoders.feature_dim,
            task_aware=config.variant == "task_aware_ata",
            obs_aware=config.variant != "obs_agnostic_ata",
        ).to(device)

    def batch_loss(tensors: TensorBatch, rng: torch.Generator) -> tuple[torch.Tensor, dict[str, float]]:
        f_obs = ata.obs_encoder(tensors.features, tensors.proprio, tensors.present) if ata.obs_aware else None
        return ata_loss(
            ata,
            tensors.actions,
            f_obs,
            config.w,
            rng,
            pad_mask=tensors.pad_mask,
            dim_mask=tensors.dim_mask,
            f_text=tensors.f_text if ata.task_aware else None,
        )

    path = Path(run_dir) / f"{name or ('ata_pretrain' if mode == 'pretrain' else 'ata')}.pt"
    stats = stats_extra(stream)

    def save_best(epoch: int, step: int, val_loss: float, history: list, optimizer: dict) -> CheckpointReceipt:
        state = CheckpointState(
            kind="ata",
            models={"ata": copy.deepcopy(ata.state_dict()), "encoders": encoders.state_dict()},
            config=config,
            step=step,
            epoch=epoch,
            optimizer=optimizer,
            extra={
                "action_dim": width,
                "feature_dim": encoders.feature_dim,
                "task_aware": ata.task_aware,
                "obs_aware": ata.obs_aware,
                **stats,
                "val_loss": val_loss,
                "history": list(history),
                "mode": mode,
            },
        )
        return save_checkpoint(state, path)

    epochs = _epochs(config, mode, config.ata_epochs)
    return _fit(phase, [ata], stream, encoders, epochs, config, batch_loss, save_best)


@torch.no_grad()
def latent_targets(ata: AtaModel, tensors: TensorBatch) -> torch.Tensor:
    """Posterior means of the frozen ATA, the clean targets of the latent generator."""
    f_obs = ata.obs_encoder(tensors.features, tensors.proprio, tensors.present) if ata.obs_aware else None
    f_text = tensors.f_text if ata.task_aware else None
    mu, _ = ata.encode(tensors.actions, f_obs, tensors.pad_mask, f_text)
    return mu


def train_lpg(
    config: cfg.RunConfig,
    manifests: Sequence[EpisodeManifest],
    ata_checkpoint: str | Path,
    run_dir: str | Path,
    *,
    mode: str = "finetune",
    init: str | Path | None = None,
    name: str | None = None,
) -> TrainingResult:
    """Trains the latent generator on posterior means of the frozen ATA.

    With `variant=non_diffusion_lpg` the generator is a `LatentRegressor`
    fitted by L2 regression; otherwise it is the diffusion `LpgModel`. The ATA
    and encoder weights are checksummed before training and verified after
    every epoch.

    Raises:
        FrozenWeightsError: If the ATA becomes trainable or its weights change.
        DivergenceError: If a training loss becomes NaN or infinite.
    """
    device = utils.resolve_device(config.device)
    utils.set_deterministic(config.deterministic)
    regression = config.variant == "non_diffusion_lpg"
    kind = "regressor" if regression else "lpg"
    phase = f"{kind}-{mode}"
    ata_state = load_checkpoint(ata_checkpoint, expected_config=config)
    encoders, ata = restore_ata(ata_state, device)
    guard = FrozenGuard(ata, encoders)
    stream = build_training_stream(
        manifests,
        config,
        utils.seeded_rng(config.seed, f"stream/{phase}"),
        mode=mode,
        action_width=ata.action_dim,
    )

    _seed_torch(config, f"init/{phase}")
    model: LpgModel | LatentRegressor = (
        LatentRegressor(config, encoders.feature_dim) if regression else LpgModel(config, encoders.feature_dim)
    )
    if init is not None:
        init_state = load_checkpoint(init, expected_config=config)
        if init_state.kind != kind:
            raise CheckpointError(f"Cannot initialise a {kind} model from a {init_state.kind} checkpoint")
        model = restore_generator(init_state, encoders.feature_dim)
    model = model.to(device)
    schedule = make_noise_schedule(config.T, config.noise_schedule)

    def batch_loss(tensors: TensorBatch, rng: torch.Generator) -> tuple[torch.Tensor, dict[str, float]]:
        z0 = latent_targets(ata, tensors)
        condition = model.condition(tensors.features, tensors.f_text, tensors.proprio, tensors.present)
        if regression:
            guard.assert_frozen()
            loss = regression_loss(model, z0, condition)
        else:
            loss = lpg_loss(model, z0, condition, schedule, rng, frozen=guard)
        return loss, {"loss": float(loss.detach())}

    path = Path(run_dir) / f"{name or (kind + '_pretrain' if mode == 'pretrain' else kind)}.pt"

    def save_best(epoch: int, step: int, val_loss: float, history: list, optimizer: dict) -> CheckpointReceipt:
        state = CheckpointState(
            kind=kind,
            models={kind: copy.deepcopy(model.state_dict())},
            config=config,
            step=step,
            epoch=epoch,
            optimizer=optimizer,
            extra={"ata_checksum": guard.checksum, "val_loss": val_loss, "history": list(history), "mode": mode},
        )
        return save_checkpoint(state, path)

    epochs = _epochs(config, mode, config.lpg_epochs)
    result = _fit(phase, [model], stream, encoders, epochs, config, batch_loss, save_best, epoch_end=guard.verify)
    trainer_logger.info(f"ATA weights unchanged during {phase} (checksum {guard.checksum[:12]})")
    return result


def train_trajectory_baseline(
    config: cfg.RunConfig,
    manifests: Sequence[EpisodeManifest],
    run_dir: str | Path,
    *,
    name: str = "trajectory",
) -> TrainingResult:
    """Trains the trajectory-space diffusion baseline on normalized action chunks.

    It shares the LPG's width, depth, schedule and epoch budget, so the
    latent and trajectory models differ only in what they denoise.
    """
    device = utils.resolve_device(config.device)
    utils.set_deterministic(config.deterministic)
    phase = "trajectory"
    width = _canonical_width(config, manifests, None)
    stream = build_training_stream(
        manifests,
        config,
        utils.seeded_rng(config.seed, f"stream/{phase}"),
        mode="finetune",
        action_width=width,
    )
    _seed_torch(config, f"init/{phase}")
    encoders = build_frozen_encoders(config).to(device)
    model = LpgModel(config, encoders.feature_dim, target="trajectory", action_dim=width).to(device)
    schedule = make_noise_schedule(config.T, config.noise_schedule)

    def batch_loss(tensors: TensorBatch, rng: torch.Generator) -> tuple[torch.Tensor, dict[str, float]]:
        condition = model.condition(tensors.features, tensors.f_text, tensors.proprio, tensors.present)
        loss = lpg_loss(model, tensors.actions, condition, schedule, rng)
        return loss, {"loss": float(loss.detach())}

    path = Path(run_dir) / f"{name}.pt"
    stats = stats_extra(stream)

    def save_best(epoch: int, step: int, val_loss: float, history: list, optimizer: dict) -> CheckpointReceipt:
        state = CheckpointState(
            kind="trajectory",
            models={"trajectory": copy.deepcopy(model.state_dict()), "encoders": encoders.state_dict()},
            config=config,
            step=step,
            epoch=epoch,
            optimizer=optimizer,
            extra={"action_dim": width, **stats, "val_loss": val_loss, "history": list(history)},
        )
        return save_checkpoint(state, path)

    epochs = config.scaled_epochs(config.lpg_epochs)
    return _fit(phase, [model], stream, encoders, epochs, config, batch_loss, save_best)
