import dataclasses
import os
from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest
import torch
from torch import nn

from latentpolicy import _config as cfg
from latentpolicy._episodes import Episode, EpisodeEntry, EpisodeManifest, write_episode, write_manifest


def pytest_addoption(parser: pytest.Parser) -> None:
    group = parser.getgroup("latentpolicy", "latentpolicy test options")
    group.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="Run training-heavy acceptance tests marked as slow.",
    )


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_config() -> cfg.RunConfig:
    """A configuration small enough to train in seconds on CPU."""
    return dataclasses.replace(
        cfg.RunConfig(),
        h=4,
        d_z=8,
        d_model=16,
        n_heads=2,
        dim_feedforward=32,
        lpg_layers=2,
        image_size=32,
        crop_size=28,
        feature_grid=2,
        batch_size=8,
        pretrain_epochs=1,
        ata_epochs=2,
        lpg_epochs=2,
        warmup_steps=2,
        T=20,
        sampler_steps=5,
        tasks=("reach", "press"),
        episodes_per_task=3,
        pretrain_episodes_per_task=2,
        pretrain_embodiments=2,
        step_limit=200,
        n_trials=2,
    )


@pytest.fixture(autouse=True)
def _clean_environment(monkeypatch: pytest.MonkeyPatch) -> None:
    for key in list(os.environ):
        if key.startswith(cfg.ENV_PREFIX):
            monkeypatch.delenv(key)


def random_episode(
    length: int = 6,
    action_dim: int = 4,
    *,
    seed: int = 0,
    image_size: int = 32,
    views: tuple[str, ...] = ("front", "top"),
    task_id: str = "reach",
    embodiment_id: str = "arm4",
) -> Episode:
    rng = np.random.default_rng(seed)
    return Episode(
        actions=rng.uniform(-2.0, 2.0, size=(length, action_dim)).astype(np.float32),
        proprio=rng.uniform(-1.0, 1.0, size=(length, 3)).astype(np.float32),
        images={view: rng.integers(0, 256, size=(length, image_size, image_size, 3), dtype=np.uint8) for view in views},
        instruction=f"{task_id} the target",
        skills=rng.integers(0, 3, size=length).astype(np.int16),
        task_id=task_id,
        embodiment_id=embodiment_id,
        seed=seed,
    )


def write_dataset(
    root: Path,
    dataset_id: str,
    episodes: list[Episode],
    *,
    quality_flags: frozenset[str] = frozenset(),
) -> EpisodeManifest:
    entries = []
    for index, episode in enumerate(episodes):
        relative = f"episodes/{index:04d}.npz"
        write_episode(episode, root / dataset_id / relative)
        entries.append(
            EpisodeEntry(
                path=relative,
                length=episode.length,
                instruction=episode.instruction,
                view_ids=episode.view_ids,
                task_id=episode.task_id,
            ),
        )
    manifest = EpisodeManifest(
        dataset_id=dataset_id,
        embodiment_id=episodes[0].embodiment_id,
        native_action_dim=episodes[0].actions.shape[1],
        episodes=tuple(entries),
        quality_flags=quality_flags,
        root=root / dataset_id,
    )
    write_manifest(manifest, root / dataset_id / "manifest.json")
    return manifest


@pytest.fixture
def episode_factory() -> Callable[..., Episode]:
    return random_episode


@pytest.fixture
def toy_manifest(tmp_path: Path) -> EpisodeManifest:
    """A ten-episode, two-task dataset written to disk."""
    episodes = [
        random_episode(length=5 + i % 3, seed=i, task_id=("reach", "press")[i % 2]) for i in range(10)
    ]
    return write_dataset(tmp_path / "data", "toy", episodes)


@pytest.fixture
def dataset_writer() -> Callable[..., EpisodeManifest]:
    return write_dataset


class _LossOf(nn.Module):
    def __init__(self, module: nn.Module, loss_of: Callable[[nn.Module], torch.Tensor]) -> None:
        super().__init__()
        self.module = module
        self.loss_of = loss_of

    def forward(self) -> torch.Tensor:
        return self.loss_of(self.module)


def gradcheck_parameters(
    module: nn.Module,
    loss_of: Callable[[nn.Module], torch.Tensor],
    *,
    fast_mode: bool = False,
) -> bool:
    """Compares analytic gradients of `loss_of(module)` with central differences for every trainable parameter.

    `module` must be in float64 and `loss_of` must draw its randomness from a
    freshly seeded stream so that repeated calls see the same timesteps and noise.
    """
    wrapper = _LossOf(module, loss_of)
    trainable = [(name, parameter) for name, parameter in module.named_parameters() if parameter.requires_grad]
    names = [name for name, _ in trainable]
    values = tuple(parameter.detach().clone().requires_grad_() for _, parameter in trainable)

    def loss_at(*parameters: torch.Tensor) -> torch.Tensor:
        replaced = {f"module.{name}": value for name, value in zip(names, parameters, strict=True)}
        return torch.func.functional_call(wrapper, replaced, ())

    return torch.autograd.gradcheck(loss_at, values, eps=1e-6, atol=1e-5, rtol=1e-3, fast_mode=fast_mode)


@pytest.fixture
def parameter_gradcheck() -> Callable[..., bool]:
    return gradcheck_parameters
