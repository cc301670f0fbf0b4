"""Module producing the observation, instruction and timestep conditioning features."""

from __future__ import annotations

import hashlib
import math
from collections.abc import Sequence

import numpy as np
import torch
from einops import rearrange
from torch import nn

from latentpolicy import _config as cfg
from latentpolicy import _internal as utils

_CONV_CHANNELS = 32
_INSTRUCTION_BUCKETS = 4096


class _Frozen(nn.Module):
    """A module that stays in eval mode with gradients disabled."""

    def train(self, mode: bool = True) -> _Frozen:  # noqa: ARG002
        return super().train(False)


class ImageEncoder(_Frozen):
    """Small convolutional feature extractor with frozen random weights.

    Two strided convolutions followed by average pooling onto a
    `grid x grid` map keep coarse spatial layout in the feature vector.
    """

    def __init__(self, image_size: int, grid: int) -> None:
        super().__init__()
        self.image_size = image_size
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, kernel_size=5, stride=2, padding=2),
            nn.ReLU(),
            nn.Conv2d(16, _CONV_CHANNELS, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(grid),
            nn.Flatten(),
        )
        self.feature_dim = _CONV_CHANNELS * grid * grid
        utils.freeze(self)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or tuple(images.shape[1:]) != (self.image_size, self.image_size, 3):
            raise ValueError(
                f"Expected images of shape (B, {self.image_size}, {self.image_size}, 3), got {tuple(images.shape)}",
            )
        return self.net(rearrange(images, "b h w c -> b c h w"))


def _token_bucket(token: str) -> int:
    return int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little") % _INSTRUCTION_BUCKETS


class InstructionEncoder(_Frozen):
    """Whitespace tokenizer plus a frozen hashed embedding table, mean-pooled over tokens."""

    def __init__(self, d_model: int) -> None:
        super().__init__()
        self.table = nn.Embedding(_INSTRUCTION_BUCKETS, d_model)
        utils.freeze(self)

    @staticmethod
    def tokenize(text: str) -> list[int]:
        tokens = text.split()
        if not tokens:
            raise ValueError("Instruction must contain at least one token")
        return [_token_bucket(token) for token in tokens]

    def forward(self, texts: Sequence[str]) -> torch.Tensor:
        device = self.table.weight.device
        return torch.stack(
            [self.table(torch.tensor(self.tokenize(text), device=device)).mean(dim=0) for text in texts],
        )


class FrozenEncoders(_Frozen):
    """The image and instruction encoders, shared by every training phase of a run."""

    def __init__(self, config: cfg.RunConfig) -> None:
        super().__init__()
        self.image = ImageEncoder(config.crop_size, config.feature_grid)
        self.instruction = InstructionEncoder(config.d_model)

    @property
    def feature_dim(self) -> int:
        return self.image.feature_dim


def build_frozen_encoders(config: cfg.RunConfig) -> FrozenEncoders:
    """Initialises the frozen encoders from the run seed, independently of the global torch RNG."""
    seed = int(utils.seeded_rng(config.seed, "frozen-encoders").integers(2**62))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return FrozenEncoders(config)


class ObsEncoder(nn.Module):
    """Trainable 3-layer MLP over the image feature concatenated with proprio.

    Frames without proprio use a learned placeholder vector in its place.
    """

    def __init__(self, feature_dim: int, d_s: int, d_model: int) -> None:
        super().__init__()
        self.d_s = d_s
        self.absent_state = nn.Parameter(torch.randn(d_s) * 0.02)
        self.mlp = nn.Sequential(
            nn.Linear(feature_dim + d_s, d_model),
            nn.Mish(),
            nn.Linear(d_model, d_model),
            nn.Mish(),
            nn.Linear(d_model, d_model),
        )

    def forward(
        self,
        features: torch.Tensor,
        proprio: torch.Tensor | None = None,
        present: torch.Tensor | None = None,
    ) -> torch.Tensor:
        placeholder = self.absent_state.expand(features.shape[0], -1)
        if proprio is None:
            state = placeholder
        else:
            if proprio.shape[-1] != self.d_s:
                raise ValueError(f"Proprio width {proprio.shape[-1]} does not match d_s={self.d_s}")
            state = proprio if present is None else torch.where(present[:, None], proprio, placeholder)
        return self.mlp(torch.cat([features, state], dim=-1))


def encode_image(encoder: ImageEncoder, images: torch.Tensor | np.ndarray) -> torch.Tensor:
    """Frozen image features for a batch of `S x S x 3` images in [0, 1]."""
    device = next(encoder.parameters()).device
    with torch.no_grad():
        return encoder(torch.as_tensor(images, dtype=torch.float32, device=device))


def encode_obs(
    encoder: ObsEncoder,
    features: torch.Tensor,
    proprio: torch.Tensor | None = None,
    present: torch.Tensor | None = None,
) -> torch.Tensor:
    return encoder(features, proprio, present)


def encode_instruction(encoder: InstructionEncoder, texts: str | Sequence[str]) -> torch.Tensor:
    """Mean hashed-token embedding per instruction; a single string yields a batch of one."""
    with torch.no_grad():
        return encoder([texts] if isinstance(texts, str) else list(texts))


def timestep_embedding(t: int | torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal timestep embedding with interleaved sin/cos over geometric frequencies.

    Args:
        t: Timestep(s), scalar or shape `(B,)`.
        dim: Even embedding width.

    Returns:
        `(B, dim)` tensor (`(1, dim)` for a scalar) with entries in [-1, 1];
        even columns hold sines and odd columns cosines.
    """
    if dim % 2:
        raise ValueError(f"Timestep embedding width must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    exponents = torch.arange(dim // 2, dtype=torch.float32, device=t.device) * 2 / dim
    frequencies = torch.exp(-math.log(10000.0) * exponents)
    angles = t[:, None] * frequencies[None, :]
    return rearrange(torch.stack([angles.sin(), angles.cos()], dim=-1), "b k two -> b (k two)")


class TimestepEncoder(nn.Module):
    """Sinusoidal embedding followed by a trainable 2-layer projection to `d_model`."""

    def __init__(self, d_model: int, T: int, embed_dim: int = 128) -> None:  # noqa: N803
        super().__init__()
        self.T = T
        self.embed_dim = embed_dim
        self.proj = nn.Sequential(nn.Linear(embed_dim, d_model), nn.Mish(), nn.Linear(d_model, d_model))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        if bool((t < 0).any()) or bool((t > self.T).any()):
            raise ValueError(f"Timesteps must lie in [0, {self.T}]")
        embedding = timestep_embedding(t, self.embed_dim).to(device=t.device, dtype=self.proj[0].weight.dtype)
        return self.proj(embedding)
