"""Module with the latent policy generator (LPG): noise schedules, denoisers and samplers."""

from __future__ import annotations

import dataclasses
import logging
import math
from collections.abc import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F  # noqa: N812
from diffusers import DDPMScheduler
from torch import nn

from latentpolicy import _config as cfg
from latentpolicy import _internal as utils
from latentpolicy._ata import sinusoidal_positions, transformer_encoder
from latentpolicy._encoders import ObsEncoder, TimestepEncoder
from latentpolicy._errors import FrozenWeightsError
from latentpolicy._types import ConditioningBundle, NoiseSchedule

sampler_logger = logging.getLogger("Sampler")

EpsFn = Callable[[torch.Tensor, int], torch.Tensor]


def make_noise_schedule(
    T: int,  # noqa: N803
    kind: str = "linear",
    beta_start: float = 1e-4,
    beta_end: float = 2e-2,
) -> NoiseSchedule:
    """Builds the diffusion schedule; `linear` spaces beta evenly from `beta_start` to `beta_end`.

    Raises:
        ValueError: If `T < 1` or `kind` is not supported.
    """
    if T < 1:
        raise ValueError(f"T must be at least 1, got {T}")
    if kind not in cfg.NOISE_SCHEDULES:
        raise ValueError(f"Unsupported noise schedule {kind!r}, expected one of {', '.join(cfg.NOISE_SCHEDULES)}")
    scheduler = DDPMScheduler(num_train_timesteps=T, beta_start=beta_start, beta_end=beta_end, beta_schedule=kind)
    beta = scheduler.betas.to(torch.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=torch.cumprod(alpha, dim=0))


def _check_timesteps(t: int | torch.Tensor, T: int, *, allow_zero: bool = False) -> None:  # noqa: N803
    low = 0 if allow_zero else 1
    values = torch.as_tensor(t)
    if bool((values < low).any()) or bool((values > T).any()):
        raise ValueError(f"Timestep out of range [{low}, {T}]: {values.tolist()}")


def _broadcast(table: torch.Tensor, t: int | torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    index = torch.as_tensor(t, dtype=torch.long, device=table.device) - 1
    value = table[index].to(device=like.device, dtype=like.dtype)
    if value.ndim:
        value = value.reshape(-1, *([1] * (like.ndim - 1)))
    return value


def forward_noise(z0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Samples `q(z^t | z^0)` in closed form for timestep(s) `t` in `[1, T]`."""
    _check_timesteps(t, schedule.T)
    alpha_bar = _broadcast(schedule.alpha_bar, t, z0)
    return alpha_bar.sqrt() * z0 + (1.0 - alpha_bar).sqrt() * eps


def ddpm_step(
    z_t: torch.Tensor,
    t: int,
    eps_hat: torch.Tensor,
    schedule: NoiseSchedule,
    rng: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """One ancestral DDPM step from `t` to `t - 1` with `sigma_t = sqrt(beta_t)`; no noise is added at `t = 1`."""
    _check_timesteps(t, schedule.T)
    beta = float(schedule.beta[t - 1])
    alpha = float(schedule.alpha[t - 1])
    alpha_bar = float(schedule.alpha_bar[t - 1])
    mean = (z_t - beta / math.sqrt(1.0 - alpha_bar) * eps_hat) / math.sqrt(alpha)
    if t == 1:
        return mean
    zeta = noise if noise is not None else utils.standard_normal(z_t.shape, z_t, rng)
    return mean + math.sqrt(beta) * zeta


def ddim_step(
    z_t: torch.Tensor,
    t: int,
    t_prev: int,
    eps_hat: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Deterministic DDIM update from `t` to `t_prev`; `t_prev = 0` lands on the clean estimate."""
    if t_prev >= t:
        raise ValueError(f"DDIM steps must go backwards in time, got t={t} -> t_prev={t_prev}")
    _check_timesteps(t, schedule.T)
    _check_timesteps(t_prev, schedule.T, allow_zero=True)
    alpha_bar = float(schedule.alpha_bar[t - 1])
    alpha_bar_prev = float(schedule.alpha_bar[t_prev - 1]) if t_prev > 0 else 1.0
    z0_hat = (z_t - math.sqrt(1.0 - alpha_bar) * eps_hat) / math.sqrt(alpha_bar)
    return math.sqrt(alpha_bar_prev) * z0_hat + math.sqrt(1.0 - alpha_bar_prev) * eps_hat


def ddim_timesteps(T: int, steps: int) -> list[int]:  # noqa: N803
    """Uniformly spaced descending timesteps of length `steps`, always including `T` and 1 (for `steps >= 2`)."""
    if not 1 <= steps <= T:
        raise ValueError(f"DDIM steps must lie in [1, T={T}], got {steps}")
    if steps == 1:
        return [T]
    grid = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    return [int(t) for t in grid[::-1]]


@torch.no_grad()
def run_sampler(
    eps_fn: EpsFn,
    shape: Sequence[int],
    schedule: NoiseSchedule,
    sampler: str,
    steps: int | None,
    rng: torch.Generator | None,
    *,
    like: torch.Tensor | None = None,
) -> torch.Tensor:
    """Denoises standard normal noise into a sample with the chosen sampler.

    Args:
        eps_fn: Noise predictor called as `eps_fn(z_t, t)`.
        shape: Shape of the sample, batch axis first.
        schedule: Diffusion schedule.
        sampler: `ddpm` (all `T` steps) or `ddim` (`steps` steps).
        steps: Number of DDIM steps; must not exceed `T`.
        rng: Stream for the initial noise and the DDPM noise.
        like: Tensor giving device and dtype (CPU float32 by default).

    Raises:
        ValueError: For an unknown sampler or `steps > T`.
    """
    if steps is not None and steps > schedule.T:
        raise ValueError(f"Sampler steps {steps} exceed T={schedule.T}")
    like = like if like is not None else torch.empty(0)
    z = utils.standard_normal(tuple(shape), like, rng)
    if sampler == "ddpm":
        for t in range(schedule.T, 0, -1):
            z = ddpm_step(z, t, eps_fn(z, t), schedule, rng)
        return z
    if sampler == "ddim":
        timesteps = ddim_timesteps(schedule.T, steps or schedule.T)
        for t, t_prev in zip(timesteps, [*timesteps[1:], 0], strict=True):
            z = ddim_step(z, t, t_prev, eps_fn(z, t), schedule)
        return z
    raise ValueError(f"Unknown sampler {sampler!r}, expected one of {', '.join(cfg.SAMPLERS)}")


class EpsNet(nn.Module):
    """Noise predictor over the token sequence `[z^t, f_obs, f_text, f_t]`."""

    def __init__(self, config: cfg.RunConfig) -> None:
        super().__init__()
        d_model = config.d_model
        self.sample_shape: tuple[int, ...] = (config.d_z,)
        self.z_in = nn.Linear(config.d_z, d_model)
        self.obs_in = nn.Linear(d_model, d_model)
        self.text_in = nn.Linear(d_model, d_model)
        self.token_type = nn.Parameter(torch.randn(4, d_model) * 0.02)
        self.encoder = transformer_encoder(config, config.lpg_layers)
        self.z_out = nn.Linear(d_model, config.d_z)

    def forward(self, z_t: torch.Tensor, cond: ConditioningBundle) -> torch.Tensor:
        tokens = torch.stack([self.z_in(z_t), self.obs_in(cond.f_obs), self.text_in(cond.f_text), cond.f_t], dim=1)
        return self.z_out(self.encoder(tokens + self.token_type)[:, 0])


class TrajectoryEpsNet(nn.Module):
    """Noise predictor of matched width and depth that denoises whole `h x d_a` action chunks.

    Each action step is one token, followed by the three conditioning tokens.
    """

    def __init__(self, config: cfg.RunConfig, action_dim: int) -> None:
        super().__init__()
        d_model = config.d_model
        self.h = config.h
        self.sample_shape = (config.h, action_dim)
        self.action_in = nn.Linear(action_dim, d_model)
        self.obs_in = nn.Linear(d_model, d_model)
        self.text_in = nn.Linear(d_model, d_model)
        self.token_type = nn.Parameter(torch.randn(3, d_model) * 0.02)
        self.encoder = transformer_encoder(config, config.lpg_layers)
        self.action_out = nn.Linear(d_model, action_dim)
        self.register_buffer("action_pos", sinusoidal_positions(config.h, d_model), persistent=False)

    def forward(self, x_t: torch.Tensor, cond: ConditioningBundle) -> torch.Tensor:
        actions = self.action_in(x_t) + self.action_pos.to(x_t.dtype)
        condition = torch.stack([self.obs_in(cond.f_obs), self.text_in(cond.f_text), cond.f_t], dim=1)
        encoded = self.encoder(torch.cat([actions, condition + self.token_type], dim=1))
        return self.action_out(encoded[:, : self.h])


class LpgModel(nn.Module):
    """Conditional diffusion model: its own observation MLP, a timestep encoder and a noise predictor.

    `target="latent"` denoises ATA latents; `target="trajectory"` builds the
    trajectory-space baseline that denoises normalized action chunks directly.
    """

    def __init__(
        self,
        config: cfg.RunConfig,
        feature_dim: int,
        *,
        target: str = "latent",
        action_dim: int | None = None,
    ) -> None:
        super().__init__()
        if target not in ("latent", "trajectory"):
            raise ValueError(f"Unknown diffusion target {target!r}")
        self.target = target
        self.obs_encoder = ObsEncoder(feature_dim, config.d_s, config.d_model)
        self.time_encoder = TimestepEncoder(config.d_model, config.T)
        if target == "latent":
            self.eps_net: EpsNet | TrajectoryEpsNet = EpsNet(config)
        else:
            if action_dim is None:
                raise ValueError("The trajectory-space model needs action_dim")
            self.eps_net = TrajectoryEpsNet(config, action_dim)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.eps_net.sample_shape

    def condition(
        self,
        features: torch.Tensor,
        f_text: torch.Tensor,
        proprio: torch.Tensor | None = None,
        present: torch.Tensor | None = None,
    ) -> ConditioningBundle:
        return ConditioningBundle(f_obs=self.obs_encoder(features, proprio, present), f_text=f_text)

    def predict_noise(self, x_t: torch.Tensor, t: torch.Tensor, cond: ConditioningBundle) -> torch.Tensor:
        return self.eps_net(x_t, dataclasses.replace(cond, f_t=self.time_encoder(t)))


class FrozenGuard:
    """Asserts that the modules handed to it are neither trainable nor modified."""

    def __init__(self, *modules: nn.Module) -> None:
        self.modules = modules
        self.assert_frozen()
        self.checksum = self._checksum()

    def _checksum(self) -> str:
        return utils.param_checksum(t for m in self.modules for _, t in sorted(m.state_dict().items()))

    def assert_frozen(self) -> None:
        for module in self.modules:
            if module.training or any(p.requires_grad for p in module.parameters()):
                raise FrozenWeightsError(f"{type(module).__name__} must be frozen (eval mode, no gradients)")

    def verify(self) -> None:
        self.assert_frozen()
        if self._checksum() != self.checksum:
            raise FrozenWeightsError("Frozen weights changed during training")


def lpg_loss(
    model: LpgModel,
    z0: torch.Tensor,
    cond: ConditioningBundle,
    schedule: NoiseSchedule,
    rng: torch.Generator | None = None,
    frozen: FrozenGuard | None = None,
) -> torch.Tensor:
    """Noise-prediction loss: mean squared error between the drawn noise and its prediction.

    Args:
        model: The diffusion model being trained.
        z0: Clean targets, the ATA posterior means for latent models.
        cond: Conditioning without `f_t`.
        schedule: Diffusion schedule.
        rng: Stream for timesteps and noise.
        frozen: Guard over the ATA; raises if it became trainable.

    Raises:
        FrozenWeightsError: If `frozen` detects a trainable ATA.
    """
    if frozen is not None:
        frozen.assert_frozen()
    t = utils.uniform_timesteps(z0.shape[0], schedule.T, z0, rng)
    eps = utils.standard_normal(z0.shape, z0, rng)
    z_t = forward_noise(z0, t, eps, schedule)
    return F.mse_loss(model.predict_noise(z_t, t, cond), eps)


def sample_latent(
    model: LpgModel,
    cond: ConditioningBundle,
    schedule: NoiseSchedule,
    sampler: str = "ddpm",
    steps: int | None = None,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Samples `(B, *model.sample_shape)` from the model for the given conditioning."""
    batch = cond.batch_size

    def eps_fn(z_t: torch.Tensor, t: int) -> torch.Tensor:
        timesteps = torch.full((batch,), t, dtype=torch.long, device=z_t.device)
        return model.predict_noise(z_t, timesteps, cond)

    return run_sampler(eps_fn, (batch, *model.sample_shape), schedule, sampler, steps, rng, like=cond.f_obs)


class LatentRegressor(nn.Module):
    """Transformer of LPG size that regresses the latent directly from the conditioning."""

    def __init__(self, config: cfg.RunConfig, feature_dim: int) -> None:
        super().__init__()
        d_model = config.d_model
        self.sample_shape = (config.d_z,)
        self.obs_encoder = ObsEncoder(feature_dim, config.d_s, d_model)
        self.obs_in = nn.Linear(d_model, d_model)
        self.text_in = nn.Linear(d_model, d_model)
        self.query = nn.Parameter(torch.randn(1, d_model) * 0.02)
        self.token_type = nn.Parameter(torch.randn(3, d_model) * 0.02)
        self.encoder = transformer_encoder(config, config.lpg_layers)
        self.z_out = nn.Linear(d_model, config.d_z)

    def condition(
        self,
        features: torch.Tensor,
        f_text: torch.Tensor,
        proprio: torch.Tensor | None = None,
        present: torch.Tensor | None = None,
    ) -> ConditioningBundle:
        return ConditioningBundle(f_obs=self.obs_encoder(features, proprio, present), f_text=f_text)

    def forward(self, cond: ConditioningBundle) -> torch.Tensor:
        query = self.query.expand(cond.batch_size, -1)
        tokens = torch.stack([query, self.obs_in(cond.f_obs), self.text_in(cond.f_text)], dim=1)
        return self.z_out(self.encoder(tokens + self.token_type)[:, 0])


def regression_loss(model: LatentRegressor, z0: torch.Tensor, cond: ConditioningBundle) -> torch.Tensor:
    return F.mse_loss(model(cond), z0)
