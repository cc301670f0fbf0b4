"""Module with the domain types shared across the package."""

from __future__ import annotations

import dataclasses

import numpy as np
import torch

_RANGE_TOLERANCE = 1e-6


@dataclasses.dataclass(frozen=True, eq=False)
class ActionChunk:
    """An `h x d_a` block of actions, the unit the ATA encodes.

    `pad_mask[i]` is `True` for real steps and `False` for the repeated-tail
    padding added when an episode ends before the chunk does. Chunks built
    for training hold normalized actions in [-1, 1]; chunks returned by the
    policy hold denormalized native actions and set `normalized=False`.
    """

    values: np.ndarray
    pad_mask: np.ndarray
    normalized: bool = True

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise ValueError(f"Action chunk must be a h x d_a matrix, got shape {self.values.shape}")
        if self.pad_mask.shape != (self.values.shape[0],):
            raise ValueError(f"pad_mask shape {self.pad_mask.shape} does not match horizon {self.values.shape[0]}")
        real = int(self.pad_mask.sum())
        if not self.pad_mask[:real].all():
            raise ValueError("pad_mask must be a run of real steps followed by padding")
        if self.normalized and np.abs(self.values).max(initial=0.0) > 1.0 + _RANGE_TOLERANCE:
            raise ValueError("Normalized action values must lie in [-1, 1]")

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    @property
    def action_dim(self) -> int:
        return self.values.shape[1]

    @property
    def n_real(self) -> int:
        return int(self.pad_mask.sum())


@dataclasses.dataclass(frozen=True, eq=False)
class ObservationFrame:
    """One timestep of what the policy sees.

    Carries images and robot state only, never object or target poses.
    """

    images: tuple[tuple[str, np.ndarray], ...]
    proprio: np.ndarray | None
    embodiment_id: str
    task_instruction: str

    def __post_init__(self) -> None:
        if not self.images:
            raise ValueError("An observation frame needs at least one camera view")

    @property
    def view_ids(self) -> tuple[str, ...]:
        return tuple(view_id for view_id, _ in self.images)

    def view(self, view_id: str) -> np.ndarray:
        for candidate, image in self.images:
            if candidate == view_id:
                return image
        raise ValueError(f"Unknown view {view_id!r}, available: {', '.join(self.view_ids)}")


@dataclasses.dataclass(frozen=True, eq=False)
class LatentVariable:
    mu: torch.Tensor
    sigma: torch.Tensor
    sample: torch.Tensor

    def __post_init__(self) -> None:
        if not bool((self.sigma > 0).all()):
            raise ValueError("Latent sigma must be strictly positive")


@dataclasses.dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-timestep diffusion tables; index `t - 1` holds the values of timestep `t`."""

    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor

    def __post_init__(self) -> None:
        if self.beta.ndim != 1 or not len(self.beta):
            raise ValueError("A noise schedule needs at least one timestep")
        if not bool(((self.beta > 0) & (self.beta < 1)).all()):
            raise ValueError("Every beta must lie in (0, 1)")
        if len(self.alpha_bar) > 1 and not bool((self.alpha_bar[1:] < self.alpha_bar[:-1]).all()):
            raise ValueError("alpha_bar must be strictly decreasing")

    @property
    def T(self) -> int:  # noqa: N802
        return len(self.beta)

    def at(self, table: torch.Tensor, t: int | torch.Tensor) -> torch.Tensor:
        """Looks up `table` at timestep(s) `t` in `[1, T]`."""
        index = torch.as_tensor(t, dtype=torch.long, device=table.device) - 1
        return table[index]


@dataclasses.dataclass(frozen=True, eq=False)
class ConditioningBundle:
    """The conditioning tokens of the latent denoiser, each `(batch, d_model)`.

    `f_t` depends on the timestep and is filled in by the sampler per step.
    """

    f_obs: torch.Tensor
    f_text: torch.Tensor
    f_t: torch.Tensor | None = None

    def __post_init__(self) -> None:
        for name in ("f_obs", "f_text", "f_t"):
            value = getattr(self, name)
            if value is not None and not bool(torch.isfinite(value).all()):
                raise ValueError(f"Conditioning feature {name} contains non-finite values")

    @property
    def batch_size(self) -> int:
        return self.f_obs.shape[0]
