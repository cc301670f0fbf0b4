"""Module turning episode datasets into normalized training batches."""

from __future__ import annotations

import dataclasses
import logging
import math
from collections import Counter
from collections.abc import Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from latentpolicy import _config as cfg
from latentpolicy._episodes import Episode, EpisodeManifest, load_episodes
from latentpolicy._types import ActionChunk, ObservationFrame

datapipe_logger = logging.getLogger("Datapipe")

_IRRELEVANT_FLAGS = ("navigation", "bimanual")
_LOW_QUALITY_FLAGS = ("ambiguous_actions", "erratic_control")


@dataclasses.dataclass(frozen=True, eq=False)
class ActionStats:
    """Per-dimension clipping quantiles and post-clip range of one dataset's actions."""

    low: np.ndarray
    high: np.ndarray
    min: np.ndarray
    max: np.ndarray
    dataset_id: str = ""

    def __post_init__(self) -> None:
        if not (np.all(self.low <= self.high) and np.all(self.min <= self.max)):
            raise ValueError(f"Inconsistent action statistics for {self.dataset_id!r}")

    @property
    def action_dim(self) -> int:
        return self.low.shape[0]

    def to_dict(self) -> dict[str, cfg.AnyType]:
        return {
            "dataset_id": self.dataset_id,
            "low": self.low.tolist(),
            "high": self.high.tolist(),
            "min": self.min.tolist(),
            "max": self.max.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, cfg.AnyType]) -> ActionStats:
        return cls(
            low=np.asarray(data["low"], dtype=np.float64),
            high=np.asarray(data["high"], dtype=np.float64),
            min=np.asarray(data["min"], dtype=np.float64),
            max=np.asarray(data["max"], dtype=np.float64),
            dataset_id=data["dataset_id"],
        )


def filter_manifests(manifests: Sequence[EpisodeManifest]) -> tuple[list[EpisodeManifest], dict[str, str]]:
    """Drops datasets that are irrelevant to tabletop manipulation or of poor quality.

    The first rule removes navigation and bimanual datasets, the second removes
    datasets flagged for ambiguous actions or erratic control.

    Returns:
        The kept manifests in their original order, and `dataset_id -> reason`
        for every excluded one.
    """
    kept, report = [], {}
    for manifest in manifests:
        irrelevant = [flag for flag in _IRRELEVANT_FLAGS if flag in manifest.quality_flags]
        low_quality = [flag for flag in _LOW_QUALITY_FLAGS if flag in manifest.quality_flags]
        if irrelevant:
            report[manifest.dataset_id] = f"irrelevant: {', '.join(irrelevant)}"
        elif low_quality:
            report[manifest.dataset_id] = f"low quality: {', '.join(low_quality)}"
        else:
            kept.append(manifest)
    for dataset_id, reason in report.items():
        datapipe_logger.info(f"Excluded dataset {dataset_id} ({reason})")
    return kept, report


def compute_action_stats(
    episodes: Sequence[Episode] | Sequence[np.ndarray],
    clip_quantile: float,
    dataset_id: str = "",
) -> ActionStats:
    """Computes outlier-clipping quantiles and the post-clip range per action dimension.

    Args:
        episodes: Episodes, or raw `L x d_a` action arrays, of one dataset.
        clip_quantile: `q` in `[0, 0.5)`; values below the `q` and above the
            `1 - q` quantile are treated as outliers.
        dataset_id: Recorded on the returned stats.

    Raises:
        ValueError: If there are no actions or `q` is out of range.
    """
    if not 0 <= clip_quantile < 0.5:
        raise ValueError(f"clip_quantile must lie in [0, 0.5), got {clip_quantile}")
    arrays = [episode.actions if isinstance(episode, Episode) else np.asarray(episode) for episode in episodes]
    if not arrays or sum(len(a) for a in arrays) == 0:
        raise ValueError(f"Cannot compute action statistics for empty dataset {dataset_id!r}")
    values = np.concatenate(arrays, axis=0).astype(np.float64)
    low, high = np.quantile(values, [clip_quantile, 1.0 - clip_quantile], axis=0)
    clipped = np.clip(values, low, high)
    return ActionStats(low=low, high=high, min=clipped.min(axis=0), max=clipped.max(axis=0), dataset_id=dataset_id)


def normalize_actions(raw: np.ndarray, stats: ActionStats) -> np.ndarray:
    """Clips to the outlier quantiles, then maps `[min, max]` onto `[-1, 1]`; constant dims map to 0."""
    clipped = np.clip(np.asarray(raw, dtype=np.float64), stats.low, stats.high)
    span = stats.max - stats.min
    safe_span = np.where(span > 0, span, 1.0)
    normalized = np.where(span > 0, 2.0 * (clipped - stats.min) / safe_span - 1.0, 0.0)
    return np.clip(normalized, -1.0, 1.0).astype(np.float32)


def denormalize_actions(normalized: np.ndarray, stats: ActionStats) -> np.ndarray:
    """Inverts the affine part of `normalize_actions`; clipped outliers are not recoverable."""
    values = np.asarray(normalized, dtype=np.float64)
    span = stats.max - stats.min
    return ((values + 1.0) / 2.0 * span + stats.min).astype(np.float32)


def pad_action_dims(actions: np.ndarray, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pads the last axis of `actions` to `width` and returns the per-dimension validity mask."""
    native = actions.shape[-1]
    if native > width:
        raise ValueError(f"Actions of width {native} do not fit canonical width {width}")
    pad = [(0, 0)] * (actions.ndim - 1) + [(0, width - native)]
    return np.pad(actions, pad), np.arange(width) < native


def chunk_bounds(length: int, index: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Returns the action row indices of the chunk starting at `index` and its pad mask."""
    rows = np.minimum(np.arange(index, index + h), length - 1)
    return rows, np.arange(index, index + h) < length


def chunk_episode(
    episode: Episode,
    h: int,
    stats: ActionStats | None = None,
) -> list[tuple[ObservationFrame, ActionChunk]]:
    """Pairs every frame of `episode` with the `h` actions that follow it.

    When fewer than `h` actions remain, the final action is repeated and the
    pad mask marks the repeated slots. Actions are normalized with `stats`
    when given, otherwise they must already be normalized.
    """
    actions = episode.actions if stats is None else normalize_actions(episode.actions, stats)
    pairs = []
    for index in range(episode.length):
        rows, pad_mask = chunk_bounds(episode.length, index, h)
        pairs.append((episode.frame(index), ActionChunk(values=actions[rows], pad_mask=pad_mask)))
    return pairs


def choose_view_id(view_ids: Sequence[str], rng: np.random.Generator | None, *, training: bool = True) -> str:
    """Picks a camera view: uniformly at random when training, else the lexicographically first one."""
    if not view_ids:
        raise ValueError("No camera views to choose from")
    if not training or rng is None:
        return min(view_ids)
    return view_ids[int(rng.integers(len(view_ids)))]


def select_view(frame: ObservationFrame, rng: np.random.Generator | None, *, training: bool = True) -> np.ndarray:
    return frame.view(choose_view_id(frame.view_ids, rng, training=training))


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    """Returns the centred `size x size` window of `image` without resampling."""
    height, width = image.shape[:2]
    if size > min(height, width):
        raise ValueError(f"Crop size {size} exceeds image size {height}x{width}")
    top, left = (height - size) // 2, (width - size) // 2
    return image[top : top + size, left : left + size]


def split_episodes(n_episodes: int, val_fraction: float, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    """Splits episode indices into disjoint train/validation sets."""
    order = rng.permutation(n_episodes)
    n_val = min(n_episodes - 1, max(1, round(n_episodes * val_fraction))) if n_episodes > 1 and val_fraction else 0
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def preview(manifest: EpisodeManifest, episodes: Sequence[Episode] | None = None) -> dict[str, cfg.AnyType]:
    """Summarises a dataset for quick inspection."""
    episodes = load_episodes(manifest) if episodes is None else episodes
    actions = np.concatenate([episode.actions for episode in episodes], axis=0)
    return {
        "dataset_id": manifest.dataset_id,
        "embodiment_id": manifest.embodiment_id,
        "episodes": len(episodes),
        "mean_length": float(np.mean([episode.length for episode in episodes])),
        "tasks": dict(Counter(entry.task_id for entry in manifest.episodes)),
        "views": sorted({view for entry in manifest.episodes for view in entry.view_ids}),
        "action_min": actions.min(axis=0).round(4).tolist(),
        "action_max": actions.max(axis=0).round(4).tolist(),
        "quality_flags": sorted(manifest.quality_flags),
    }


@dataclasses.dataclass(frozen=True, eq=False)
class Batch:
    """A training batch; array fields share the leading batch axis."""

    images: np.ndarray  # B x S x S x 3, float32 in [0, 1]
    proprio: np.ndarray  # B x d_s, zeros where absent
    proprio_present: np.ndarray  # B, bool
    actions: np.ndarray  # B x h x d_a, normalized, zero-padded to the canonical width
    pad_mask: np.ndarray  # B x h
    dim_mask: np.ndarray  # B x d_a
    instructions: tuple[str, ...]
    dataset_ids: tuple[str, ...]
    embodiment_ids: tuple[str, ...]
    task_ids: tuple[str, ...]
    skills: np.ndarray  # B, majority skill label over the chunk's real steps

    def __len__(self) -> int:
        return self.images.shape[0]

    def frames(self) -> list[ObservationFrame]:
        return [
            ObservationFrame(
                images=(("selected", self.images[i]),),
                proprio=self.proprio[i] if self.proprio_present[i] else None,
                embodiment_id=self.embodiment_ids[i],
                task_instruction=self.instructions[i],
            )
            for i in range(len(self))
        ]


@dataclasses.dataclass(frozen=True)
class _Dataset:
    manifest: EpisodeManifest
    episodes: list[Episode]
    stats: ActionStats
    normalized: list[np.ndarray]
    train_index: list[tuple[int, int]]
    val_index: list[tuple[int, int]]
    dim_mask: np.ndarray


class TrainingStream:
    """Iterable of training batches over one or more datasets.

    Each dataset is split 95/5 (by default) at episode granularity with the run
    seed; action statistics come from that dataset's own training episodes.
    Every pass over the stream is one epoch. Batches draw a dataset per sample
    according to the mixture weights, then a chunk uniformly within it.
    Batch assembly may run ahead on a worker thread while the consumer still
    receives batches in a fixed order.

    ---
    ### Example usage:

    ```python
    stream = build_training_stream(manifests, config, seeded_rng(config.seed, "stream"), mode="finetune")
    for epoch in range(epochs):
        for batch in stream:
            ...
        val_loss = mean(loss(b) for b in stream.validation_batches())
    ```
    """

    def __init__(
        self,
        datasets: dict[str, _Dataset],
        config: cfg.RunConfig,
        rng: np.random.Generator,
        *,
        mode: str,
        action_width: int,
        prefetch: int = 2,
    ) -> None:
        self.datasets = datasets
        self.config = config
        self.rng = rng
        self.mode = mode
        self.action_width = action_width
        self.prefetch = prefetch
        weights = config.mixture_weights() or {dataset_id: 1.0 for dataset_id in datasets}
        unknown = sorted(set(weights) - set(datasets))
        if unknown:
            raise ValueError(f"Mixture weight given for unknown dataset(s): {', '.join(unknown)}")
        self.dataset_order = [dataset_id for dataset_id in datasets if weights.get(dataset_id, 0.0) > 0]
        total = sum(weights[d] for d in self.dataset_order)
        self.weights = np.array([weights[d] / total for d in self.dataset_order])

    @property
    def stats(self) -> dict[str, ActionStats]:
        return {dataset_id: dataset.stats for dataset_id, dataset in self.datasets.items()}

    @property
    def embodiment_datasets(self) -> dict[str, str]:
        """Dataset whose statistics denormalize actions of each embodiment: the first one listed."""
        mapping: dict[str, str] = {}
        for dataset_id, dataset in self.datasets.items():
            mapping.setdefault(dataset.manifest.embodiment_id, dataset_id)
        return mapping

    @property
    def n_train_chunks(self) -> int:
        return sum(len(self.datasets[d].train_index) for d in self.dataset_order)

    @property
    def batches_per_epoch(self) -> int:
        return max(1, math.ceil(self.n_train_chunks / self.config.batch_size))

    def _sample_indices(self) -> list[tuple[str, int, int]]:
        picks = self.rng.choice(len(self.dataset_order), size=self.config.batch_size, p=self.weights)
        samples = []
        for pick in picks:
            dataset_id = self.dataset_order[int(pick)]
            index = self.datasets[dataset_id].train_index
            episode_index, frame_index = index[int(self.rng.integers(len(index)))]
            samples.append((dataset_id, episode_index, frame_index))
        return samples

    def _assemble(self, samples: list[tuple[str, int, int]], view_picks: np.ndarray | None) -> Batch:
        config = self.config
        images, proprio, present, actions, pad_masks, dim_masks, skills = [], [], [], [], [], [], []
        instructions, dataset_ids, embodiment_ids, task_ids = [], [], [], []
        for i, (dataset_id, episode_index, frame_index) in enumerate(samples):
            dataset = self.datasets[dataset_id]
            episode = dataset.episodes[episode_index]
            view_ids = episode.view_ids
            view_id = view_ids[int(view_picks[i]) % len(view_ids)] if view_picks is not None else min(view_ids)
            images.append(center_crop(episode.image(frame_index, view_id), config.crop_size))
            keep_proprio = self.mode == "finetune"
            proprio.append(episode.proprio[frame_index] if keep_proprio else np.zeros(config.d_s, dtype=np.float32))
            present.append(keep_proprio)
            rows, pad_mask = chunk_bounds(episode.length, frame_index, config.h)
            padded, _ = pad_action_dims(dataset.normalized[episode_index][rows], self.action_width)
            actions.append(padded)
            pad_masks.append(pad_mask)
            dim_masks.append(dataset.dim_mask)
            labels = episode.skills[rows[pad_mask]]
            skills.append(Counter(labels.tolist()).most_common(1)[0][0])
            instructions.append(episode.instruction)
            dataset_ids.append(dataset_id)
            embodiment_ids.append(dataset.manifest.embodiment_id)
            task_ids.append(episode.task_id)
        return Batch(
            images=np.stack(images).astype(np.float32),
            proprio=np.stack(proprio).astype(np.float32),
            proprio_present=np.array(present, dtype=bool),
            actions=np.stack(actions).astype(np.float32),
            pad_mask=np.stack(pad_masks),
            dim_mask=np.stack(dim_masks),
            instructions=tuple(instructions),
            dataset_ids=tuple(dataset_ids),
            embodiment_ids=tuple(embodiment_ids),
            task_ids=tuple(task_ids),
            skills=np.array(skills, dtype=np.int64),
        )

    def __iter__(self) -> Iterator[Batch]:
        plans = []
        for _ in range(self.batches_per_epoch):
            samples = self._sample_indices()
            plans.append((samples, self.rng.integers(0, 2**16, size=len(samples))))
        with ThreadPoolExecutor(max_workers=1) as pool:
            pending = [pool.submit(self._assemble, *plan) for plan in plans[: self.prefetch]]
            for next_index in range(len(plans)):
                batch = pending.pop(0).result()
                if next_index + self.prefetch < len(plans):
                    pending.append(pool.submit(self._assemble, *plans[next_index + self.prefetch]))
                yield batch

    def _ordered_batches(self, split: str) -> Iterator[Batch]:
        samples = [
            (dataset_id, episode_index, frame_index)
            for dataset_id in self.dataset_order
            for episode_index, frame_index in getattr(self.datasets[dataset_id], f"{split}_index")
        ]
        for start in range(0, len(samples), self.config.batch_size):
            yield self._assemble(samples[start : start + self.config.batch_size], None)

    def validation_batches(self) -> Iterator[Batch]:
        """Deterministic pass over every validation chunk, using the evaluation view."""
        return self._ordered_batches("val")

    def training_batches_in_order(self) -> Iterator[Batch]:
        """Deterministic pass over every training chunk, used for latent export."""
        return self._ordered_batches("train")

    def split(self, dataset_id: str) -> tuple[list[int], list[int]]:
        dataset = self.datasets[dataset_id]
        train = sorted({episode for episode, _ in dataset.train_index})
        val = sorted({episode for episode, _ in dataset.val_index})
        return train, val


def build_training_stream(
    manifests: Sequence[EpisodeManifest],
    config: cfg.RunConfig,
    rng: np.random.Generator,
    *,
    mode: str = "finetune",
    action_width: int | None = None,
    episodes: dict[str, list[Episode]] | None = None,
    stats: dict[str, ActionStats] | None = None,
) -> TrainingStream:
    """Builds the training stream over filtered manifests.

    Args:
        manifests: Datasets to draw from, already filtered.
        config: Run config (horizon, batch size, crop size, mixture, split fraction).
        rng: Stream owning the split, the mixture draws and the view draws.
        mode: `pretrain` drops proprio from every frame, `finetune` keeps it.
        action_width: Canonical action width; defaults to `config.d_a` or the
            widest embodiment among `manifests`.
        episodes: Already loaded episodes per dataset id, to skip reading files.
        stats: Action statistics per dataset id to normalize with instead of
            computing them from the training split, e.g. those stored in a checkpoint.
            Datasets without an entry get their own statistics.

    Raises:
        ValueError: For an unknown mode, an empty dataset list, or a mixture
            weight naming a dataset that is not present.
    """
    if mode not in ("pretrain", "finetune"):
        raise ValueError(f"Unknown stream mode {mode!r}")
    if not manifests:
        raise ValueError("No datasets to build a training stream from")
    width = action_width or config.d_a or max(manifest.native_action_dim for manifest in manifests)
    datasets = {}
    for manifest in manifests:
        loaded = (episodes or {}).get(manifest.dataset_id) or load_episodes(manifest)
        train_episodes, val_episodes = split_episodes(len(loaded), config.val_fraction, rng)
        if stats is not None and manifest.dataset_id in stats:
            dataset_stats = stats[manifest.dataset_id]
        else:
            train_actions = [loaded[i] for i in train_episodes]
            dataset_stats = compute_action_stats(train_actions, config.clip_quantile, manifest.dataset_id)
        datasets[manifest.dataset_id] = _Dataset(
            manifest=manifest,
            episodes=loaded,
            stats=dataset_stats,
            normalized=[normalize_actions(episode.actions, dataset_stats) for episode in loaded],
            train_index=[(e, f) for e in train_episodes for f in range(loaded[e].length)],
            val_index=[(e, f) for e in val_episodes for f in range(loaded[e].length)],
            dim_mask=manifest.dim_mask(width),
        )
        datapipe_logger.info(
            f"Dataset {manifest.dataset_id}: {len(train_episodes)} train / {len(val_episodes)} val episodes",
        )
    stream = TrainingStream(datasets, config, rng, mode=mode, action_width=width)
    for embodiment_id, dataset_id in stream.embodiment_datasets.items():
        sharing = [d for d, dataset in datasets.items() if dataset.manifest.embodiment_id == embodiment_id]
        if len(sharing) > 1:
            datapipe_logger.info(
                f"Datasets {', '.join(sharing)} share embodiment {embodiment_id}; "
                f"inference denormalizes with the statistics of {dataset_id}",
            )
    return stream
