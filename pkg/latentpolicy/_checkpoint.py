"""Module for saving and loading versioned training checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import logging
from pathlib import Path

import torch
from dotenv import dotenv_values

from latentpolicy import _config as cfg
from latentpolicy._errors import CheckpointError

checkpoint_logger = logging.getLogger("Checkpoint")


@dataclasses.dataclass
class CheckpointState:
    """Everything needed to resume or reuse a training phase.

    Attributes:
        kind: What the checkpoint holds (`ata`, `lpg`, `regressor`, `trajectory`).
        models: `name -> state_dict` for every module in the checkpoint.
        config: The run config the weights were trained under.
        step: Optimizer steps taken so far.
        epoch: Epochs completed so far.
        optimizer: Optimizer state dict, if the phase can be resumed.
        extra: Plain data needed at inference time (action statistics, widths, validation loss).
        config_hash: Hash stored in the file; filled in by `load_checkpoint`.
    """

    kind: str
    models: dict[str, dict[str, torch.Tensor]]
    config: cfg.RunConfig
    step: int = 0
    epoch: int = 0
    optimizer: dict | None = None
    extra: dict = dataclasses.field(default_factory=dict)
    config_hash: str = ""


@dataclasses.dataclass(frozen=True)
class CheckpointReceipt:
    path: Path
    sha256: str
    size_bytes: int
    config_hash: str
    step: int


def save_checkpoint(state: CheckpointState, path: str | Path) -> CheckpointReceipt:
    """Writes `state` to `path` and returns a receipt describing the file.

    The file embeds the checkpoint format version, the resolved config text and
    its hash next to the weights, so a checkpoint is self-describing.

    ---
    ### Example usage:

    ```python
    receipt = save_checkpoint(CheckpointState("ata", {"ata": model.state_dict()}, config), run_dir / "ata.pt")
    ```
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = cfg.config_hash(state.config)
    payload = {
        "format_version": cfg.CHECKPOINT_FORMAT_VERSION,
        "kind": state.kind,
        "models": state.models,
        "optimizer": state.optimizer,
        "config_text": cfg.dump_config(state.config),
        "config_hash": digest,
        "step": state.step,
        "epoch": state.epoch,
        "extra": state.extra,
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    data = buffer.getvalue()
    path.write_bytes(data)
    receipt = CheckpointReceipt(
        path=path,
        sha256=hashlib.sha256(data).hexdigest(),
        size_bytes=len(data),
        config_hash=digest,
        step=state.step,
    )
    checkpoint_logger.info(f"Saved {state.kind} checkpoint to {path} (step {state.step}, {len(data)} bytes)")
    return receipt


def load_checkpoint(path: str | Path, expected_config: cfg.RunConfig | None = None) -> CheckpointState:
    """Loads a checkpoint written by `save_checkpoint`.

    When `expected_config` is given and its hash differs from the embedded one,
    a warning naming the differing keys is logged and loading continues, so
    pre-trained weights can seed a fine-tuning run.

    Raises:
        FileNotFoundError: If `path` does not exist.
        CheckpointError: If the file is truncated, corrupt or of an unknown format.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        checkpoint_logger.error(f"Failed to read checkpoint {path}: {e}")
        raise CheckpointError(f"Corrupt checkpoint {path}: {e}") from e

    if not isinstance(payload, dict) or payload.get("format_version") != cfg.CHECKPOINT_FORMAT_VERSION:
        version = payload.get("format_version") if isinstance(payload, dict) else None
        raise CheckpointError(f"Unsupported checkpoint format in {path}: version {version!r}")
    try:
        config = cfg.config_from_mapping(dotenv_values(stream=io.StringIO(payload["config_text"])))
        state = CheckpointState(
            kind=payload["kind"],
            models=payload["models"],
            config=config,
            step=int(payload["step"]),
            epoch=int(payload["epoch"]),
            optimizer=payload["optimizer"],
            extra=payload["extra"],
            config_hash=payload["config_hash"],
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Malformed checkpoint {path}: {e}") from e

    if expected_config is not None and cfg.config_hash(expected_config) != state.config_hash:
        changed = ", ".join(sorted(cfg.diff_configs(config, expected_config))) or "unknown"
        checkpoint_logger.warning(f"Config of {path} differs from the current run ({changed}); loading anyway")
    checkpoint_logger.info(f"Loaded {state.kind} checkpoint {path} (step {state.step})")
    return state
