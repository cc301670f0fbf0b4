"""Module with the action trajectory autoencoder (ATA).

The ATA is an observation-conditioned CVAE over action chunks. Its encoder
reads `[cls, f_obs, a_1..a_h]` and predicts a diagonal Gaussian over the
latent; its decoder turns fixed position queries into actions while
cross-attending to `[f_obs, z]`. It never sees the task instruction unless
built task-aware.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from latentpolicy import _config as cfg
from latentpolicy import _internal as utils
from latentpolicy._encoders import ObsEncoder, timestep_embedding
from latentpolicy._types import LatentVariable

SIGMA_MIN, SIGMA_MAX = 1e-8, 1e3
_LOGVAR_MIN, _LOGVAR_MAX = 2 * math.log(SIGMA_MIN), 2 * math.log(SIGMA_MAX)


def sinusoidal_positions(n_positions: int, dim: int) -> torch.Tensor:
    return timestep_embedding(torch.arange(n_positions), dim)


def transformer_encoder(config: cfg.RunConfig, n_layers: int) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        config.d_model,
        config.n_heads,
        dim_feedforward=config.dim_feedforward,
        dropout=config.dropout,
        activation="gelu",
        batch_first=True,
        norm_first=True,
    )
    return nn.TransformerEncoder(layer, n_layers, norm=nn.LayerNorm(config.d_model), enable_nested_tensor=False)


def transformer_decoder(config: cfg.RunConfig, n_layers: int) -> nn.TransformerDecoder:
    layer = nn.TransformerDecoderLayer(
        config.d_model,
        config.n_heads,
        dim_feedforward=config.dim_feedforward,
        dropout=config.dropout,
        activation="gelu",
        batch_first=True,
        norm_first=True,
    )
    return nn.TransformerDecoder(layer, n_layers, norm=nn.LayerNorm(config.d_model))


class AtaModel(nn.Module):
    """Action trajectory autoencoder.

    Args:
        config: Run config providing `h`, `d_z`, `d_model`, heads and widths.
        action_dim: Canonical action width `d_a`.
        feature_dim: Width of the frozen image features fed to `obs_encoder`.
        task_aware: Also condition encoder and decoder on the instruction feature.
        obs_aware: Condition on the observation feature (disabled for the obs-agnostic ablation).
    """

    def __init__(
        self,
        config: cfg.RunConfig,
        action_dim: int,
        feature_dim: int,
        *,
        task_aware: bool = False,
        obs_aware: bool = True,
    ) -> None:
        super().__init__()
        d_model = config.d_model
        self.h, self.action_dim, self.d_z, self.d_model = config.h, action_dim, config.d_z, d_model
        self.task_aware, self.obs_aware = task_aware, obs_aware

        self.obs_encoder = ObsEncoder(feature_dim, config.d_s, d_model)
        self.obs_in = nn.Linear(d_model, d_model)
        self.text_in = nn.Linear(d_model, d_model) if task_aware else None
        self.action_in = nn.Linear(action_dim, d_model)
        self.cls_embed = nn.Parameter(torch.randn(1, 1, d_model) * 0.02)
        self.encoder = transformer_encoder(config, cfg.ATA_ENCODER_LAYERS)
        self.latent_head = nn.Linear(d_model, 2 * config.d_z)

        self.latent_in = nn.Linear(config.d_z, d_model)
        self.memory_type = nn.Parameter(torch.randn(3, d_model) * 0.02)
        self.decoder = transformer_decoder(config, cfg.ATA_DECODER_LAYERS)
        self.action_out = nn.Linear(d_model, action_dim)

        self.register_buffer("encoder_pos", sinusoidal_positions(config.h + 3, d_model), persistent=False)
        self.register_buffer("query_pos", sinusoidal_positions(config.h, d_model), persistent=False)

        if len(self.encoder.layers) != cfg.ATA_ENCODER_LAYERS or len(self.decoder.layers) != cfg.ATA_DECODER_LAYERS:
            raise RuntimeError("ATA must have a 3-layer encoder and a 6-layer decoder")
        if self.latent_head.out_features != 2 * self.d_z:
            raise RuntimeError("ATA latent head must output 2 * d_z values")

    def _check_inputs(self, f_obs: torch.Tensor | None, f_text: torch.Tensor | None) -> None:
        if self.obs_aware and (f_obs is None or f_obs.shape[-1] != self.d_model):
            shape = None if f_obs is None else tuple(f_obs.shape)
            raise ValueError(f"ATA needs f_obs of width {self.d_model}, got {shape}")
        if self.task_aware and (f_text is None or f_text.shape[-1] != self.d_model):
            raise ValueError(f"Task-aware ATA needs f_text of width {self.d_model}")

    def _condition_tokens(self, f_obs: torch.Tensor | None, f_text: torch.Tensor | None) -> list[torch.Tensor]:
        tokens = []
        if self.obs_aware:
            tokens.append(self.obs_in(f_obs)[:, None])
        if self.task_aware:
            tokens.append(self.text_in(f_text)[:, None])
        return tokens

    def encode(
        self,
        actions: torch.Tensor,
        f_obs: torch.Tensor | None,
        pad_mask: torch.Tensor | None = None,
        f_text: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if actions.ndim != 3 or tuple(actions.shape[1:]) != (self.h, self.action_dim):
            raise ValueError(f"Expected actions of shape (B, {self.h}, {self.action_dim}), got {tuple(actions.shape)}")
        self._check_inputs(f_obs, f_text)
        batch = actions.shape[0]
        condition = self._condition_tokens(f_obs, f_text)
        tokens = torch.cat([self.cls_embed.expand(batch, -1, -1), *condition, self.action_in(actions)], dim=1)
        tokens = tokens + self.encoder_pos[: tokens.shape[1]].to(tokens.dtype)

        padding = None
        if pad_mask is not None:
            keep_prefix = torch.ones(batch, 1 + len(condition), dtype=torch.bool, device=actions.device)
            padding = ~torch.cat([keep_prefix, pad_mask.to(torch.bool)], dim=1)
        cls_feature = self.encoder(tokens, src_key_padding_mask=padding)[:, 0]
        mu, log_var = self.latent_head(cls_feature).chunk(2, dim=-1)
        sigma = torch.exp(0.5 * log_var.clamp(_LOGVAR_MIN, _LOGVAR_MAX))
        return mu, sigma

    def decode(
        self,
        z: torch.Tensor,
        f_obs: torch.Tensor | None,
        f_text: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if z.ndim != 2 or z.shape[-1] != self.d_z:
            raise ValueError(f"Expected z of shape (B, {self.d_z}), got {tuple(z.shape)}")
        self._check_inputs(f_obs, f_text)
        memory = [*self._condition_tokens(f_obs, f_text), self.latent_in(z)[:, None]]
        memory = torch.cat(memory, dim=1) + self.memory_type[: len(memory)].to(z.dtype)
        queries = self.query_pos.to(z.dtype).expand(z.shape[0], -1, -1)
        return torch.tanh(self.action_out(self.decoder(queries, memory)))


def ata_encode(
    model: AtaModel,
    actions: torch.Tensor,
    f_obs: torch.Tensor | None,
    pad_mask: torch.Tensor | None = None,
    f_text: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns `(mu, sigma)` of the latent posterior for a batch of normalized chunks."""
    return model.encode(actions, f_obs, pad_mask, f_text)


def reparameterize(mu: torch.Tensor, sigma: torch.Tensor, rng: torch.Generator | None = None) -> torch.Tensor:
    """Draws `z = mu + sigma * eps` with `eps` from `rng`."""
    eps = utils.standard_normal(mu.shape, mu, rng)
    return mu + sigma.clamp_min(SIGMA_MIN) * eps


def encode_latent(
    model: AtaModel,
    actions: torch.Tensor,
    f_obs: torch.Tensor | None,
    rng: torch.Generator | None = None,
    pad_mask: torch.Tensor | None = None,
) -> LatentVariable:
    mu, sigma = model.encode(actions, f_obs, pad_mask)
    return LatentVariable(mu=mu, sigma=sigma, sample=reparameterize(mu, sigma, rng))


def ata_decode(
    model: AtaModel,
    z: torch.Tensor,
    f_obs: torch.Tensor | None,
    f_text: torch.Tensor | None = None,
) -> torch.Tensor:
    """Decodes latents into `(B, h, d_a)` normalized actions in [-1, 1]."""
    return model.decode(z, f_obs, f_text)


def kl_diag_gaussian(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)), summed over latent dims and averaged over the batch."""
    kl = 0.5 * (mu.pow(2) + sigma.pow(2) - 1.0 - 2.0 * torch.log(sigma))
    return kl.sum(dim=-1).mean()


def masked_reconstruction_error(
    actions: torch.Tensor,
    reconstruction: torch.Tensor,
    pad_mask: torch.Tensor | None = None,
    dim_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean squared error over real steps and valid action dims."""
    weights = torch.ones_like(actions)
    if pad_mask is not None:
        weights = weights * pad_mask.to(actions.dtype)[:, :, None]
    if dim_mask is not None:
        weights = weights * dim_mask.to(actions.dtype)[:, None, :]
    return ((actions - reconstruction).pow(2) * weights).sum() / weights.sum().clamp_min(1.0)


def ata_objective(
    actions: torch.Tensor,
    reconstruction: torch.Tensor,
    mu: torch.Tensor,
    sigma: torch.Tensor,
    w: float,
    pad_mask: torch.Tensor | None = None,
    dim_mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Combines the masked reconstruction error with the weighted KL term."""
    if w < 0:
        raise ValueError(f"KL weight must be >= 0, got {w}")
    reconstruction_term = masked_reconstruction_error(actions, reconstruction, pad_mask, dim_mask)
    kl_term = kl_diag_gaussian(mu, sigma)
    loss = reconstruction_term + w * kl_term
    components = {
        "loss": float(loss.detach()),
        "reconstruction": float(reconstruction_term.detach()),
        "kl": float(kl_term.detach()),
    }
    return loss, components


def ata_loss(
    model: AtaModel,
    actions: torch.Tensor,
    f_obs: torch.Tensor | None,
    w: float,
    rng: torch.Generator | None = None,
    *,
    pad_mask: torch.Tensor | None = None,
    dim_mask: torch.Tensor | None = None,
    f_text: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Training loss of the ATA on one batch.

    Returns:
        The scalar loss and its `loss`/`reconstruction`/`kl` components as floats.

    ---
    ### Example usage:

    ```python
    f_obs = model.obs_encoder(features, proprio, present)
    loss, components = ata_loss(model, actions, f_obs, config.w, rng, pad_mask=pad_mask, dim_mask=dim_mask)
    loss.backward()
    ```
    """
    mu, sigma = model.encode(actions, f_obs, pad_mask, f_text)
    z = reparameterize(mu, sigma, rng)
    reconstruction = model.decode(z, f_obs, f_text)
    return ata_objective(actions, reconstruction, mu, sigma, w, pad_mask, dim_mask)
