"""Module for the canonical episode container and dataset manifests.

An episode file is a zip archive of `.npy` members written in a fixed order:
`version`, `actions` (<f4, L x d_a), `proprio` (<f4, L x d_s), one
`images__<view>` member per view (uint8, L x S x S x 3, views sorted),
`instruction` (unicode), `skill` (<i2, L), `task_id` and `embodiment_id`
(unicode), and `seed` (<i8, the environment reset seed, -1 when unknown).
Members carry a fixed timestamp so equal content gives equal bytes.

A manifest is a JSON document describing one dataset; episode paths are
relative to the manifest's directory.
"""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import zipfile
from pathlib import Path

import numpy as np

from latentpolicy import _config as cfg
from latentpolicy._json_validation import validate_json
from latentpolicy._types import ObservationFrame

datapipe_logger = logging.getLogger("Datapipe")

_FIXED_TIMESTAMP = (1980, 1, 1, 0, 0, 0)
_IMAGE_PREFIX = "images__"
MANIFEST_SCHEMA = "manifest.schema.json"


@dataclasses.dataclass(frozen=True, eq=False)
class Episode:
    """One demonstration: frame-aligned actions, robot state, camera images and skill labels."""

    actions: np.ndarray
    proprio: np.ndarray
    images: dict[str, np.ndarray]
    instruction: str
    skills: np.ndarray
    task_id: str = ""
    embodiment_id: str = ""
    seed: int = -1

    def __post_init__(self) -> None:
        length = self.actions.shape[0]
        if length < 1:
            raise ValueError("An episode needs at least one frame")
        if not self.images:
            raise ValueError("An episode needs at least one camera view")
        if self.proprio.shape[0] != length or self.skills.shape[0] != length:
            raise ValueError("proprio and skills must have one row per action")
        for view_id, frames in self.images.items():
            if frames.shape[0] != length or frames.ndim != 4 or frames.shape[-1] != 3:
                raise ValueError(f"View {view_id!r} must be L x H x W x 3 with L={length}, got {frames.shape}")

    @property
    def length(self) -> int:
        return self.actions.shape[0]

    @property
    def view_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.images))

    def image(self, index: int, view_id: str) -> np.ndarray:
        return self.images[view_id][index].astype(np.float32) / 255.0

    def frame(self, index: int, *, with_proprio: bool = True) -> ObservationFrame:
        return ObservationFrame(
            images=tuple((view_id, self.image(index, view_id)) for view_id in self.view_ids),
            proprio=self.proprio[index].copy() if with_proprio else None,
            embodiment_id=self.embodiment_id,
            task_instruction=self.instruction,
        )


@dataclasses.dataclass(frozen=True)
class EpisodeEntry:
    path: str
    length: int
    instruction: str
    view_ids: tuple[str, ...]
    task_id: str = ""


@dataclasses.dataclass(frozen=True)
class EpisodeManifest:
    """Dataset-level description of a set of episode files."""

    dataset_id: str
    embodiment_id: str
    native_action_dim: int
    episodes: tuple[EpisodeEntry, ...]
    quality_flags: frozenset[str] = frozenset()
    proprio_dim: int = 3
    root: Path = Path()

    def episode_path(self, entry: EpisodeEntry) -> Path:
        return self.root / entry.path

    def dim_mask(self, width: int) -> np.ndarray:
        """Validity mask of the first `native_action_dim` dims within a canonical `width`."""
        if width < self.native_action_dim:
            raise ValueError(f"Canonical width {width} is narrower than {self.dataset_id}'s {self.native_action_dim}")
        return np.arange(width) < self.native_action_dim

    def to_dict(self) -> dict[str, cfg.AnyType]:
        return {
            "format_version": cfg.EPISODE_FORMAT_VERSION,
            "dataset_id": self.dataset_id,
            "embodiment_id": self.embodiment_id,
            "native_action_dim": self.native_action_dim,
            "proprio_dim": self.proprio_dim,
            "quality_flags": sorted(self.quality_flags),
            "episodes": [
                {
                    "path": entry.path,
                    "length": entry.length,
                    "instruction": entry.instruction,
                    "view_ids": list(entry.view_ids),
                    "task_id": entry.task_id,
                }
                for entry in self.episodes
            ],
        }


def _npy_bytes(array: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    np.lib.format.write_array(buffer, np.ascontiguousarray(array), allow_pickle=False)
    return buffer.getvalue()


def write_episode(episode: Episode, path: str | Path) -> Path:
    """Writes `episode` in the canonical container; identical episodes give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    members = [
        ("version", np.array(cfg.EPISODE_FORMAT_VERSION, dtype="<i4")),
        ("actions", episode.actions.astype("<f4")),
        ("proprio", episode.proprio.astype("<f4")),
        *((f"{_IMAGE_PREFIX}{view_id}", episode.images[view_id].astype(np.uint8)) for view_id in episode.view_ids),
        ("instruction", np.array(episode.instruction)),
        ("skill", episode.skills.astype("<i2")),
        ("task_id", np.array(episode.task_id)),
        ("embodiment_id", np.array(episode.embodiment_id)),
        ("seed", np.array(episode.seed, dtype="<i8")),
    ]
    with zipfile.ZipFile(path, "w") as archive:
        for name, array in members:
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_FIXED_TIMESTAMP)
            info.compress_type = zipfile.ZIP_DEFLATED
            archive.writestr(info, _npy_bytes(array))
    return path


def read_episode(path: str | Path) -> Episode:
    """Reads an episode written by `write_episode`.

    Raises:
        FileNotFoundError: If `path` does not exist.
        ValueError: If the file is not a version 1 episode container.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Episode file not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            members = {name: archive[name] for name in archive.files}
    except (zipfile.BadZipFile, OSError, ValueError) as e:
        raise ValueError(f"Unreadable episode file {path}: {e}") from e

    version = int(members.get("version", -1))
    if version != cfg.EPISODE_FORMAT_VERSION:
        raise ValueError(f"Unsupported episode format version {version} in {path}")
    try:
        return Episode(
            actions=members["actions"],
            proprio=members["proprio"],
            images={
                name.removeprefix(_IMAGE_PREFIX): frames
                for name, frames in members.items()
                if name.startswith(_IMAGE_PREFIX)
            },
            instruction=str(members["instruction"]),
            skills=members["skill"],
            task_id=str(members["task_id"]),
            embodiment_id=str(members["embodiment_id"]),
            seed=int(members["seed"]) if "seed" in members else -1,
        )
    except KeyError as e:
        raise ValueError(f"Episode file {path} is missing member {e}") from e


def read_episode_length(path: str | Path) -> int:
    with np.load(path, allow_pickle=False) as archive:
        return int(archive["actions"].shape[0])


def manifest_from_dict(data: dict[str, cfg.AnyType], root: Path = Path()) -> EpisodeManifest:
    """Builds a manifest from its JSON form.

    Raises:
        ValueError: Listing every schema violation with its JSON path.
    """
    validate_json(data, schema_name=MANIFEST_SCHEMA, message="Invalid manifest", strict=True)
    return EpisodeManifest(
        dataset_id=data["dataset_id"],
        embodiment_id=data["embodiment_id"],
        native_action_dim=data["native_action_dim"],
        proprio_dim=data["proprio_dim"],
        quality_flags=frozenset(data["quality_flags"]),
        episodes=tuple(
            EpisodeEntry(
                path=entry["path"],
                length=entry["length"],
                instruction=entry["instruction"],
                view_ids=tuple(entry["view_ids"]),
                task_id=entry["task_id"],
            )
            for entry in data["episodes"]
        ),
        root=root,
    )


def read_manifest(path: str | Path) -> EpisodeManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Manifest not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"Invalid JSON in manifest {path}: {e}") from e
    try:
        return manifest_from_dict(data, root=path.parent)
    except ValueError as e:
        raise ValueError(f"{path}: {e}") from e


def write_manifest(manifest: EpisodeManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path


def validate_manifest_files(manifest: EpisodeManifest) -> list[str]:
    """Checks that every listed episode exists and has the declared length.

    Returns:
        One human-readable problem per offending episode (empty when consistent).
    """
    problems = []
    for entry in manifest.episodes:
        episode_path = manifest.episode_path(entry)
        if not episode_path.is_file():
            problems.append(f"{manifest.dataset_id}: missing episode file {entry.path}")
            continue
        try:
            actual = read_episode_length(episode_path)
        except Exception as e:
            problems.append(f"{manifest.dataset_id}: unreadable episode file {entry.path} ({e})")
            continue
        if actual != entry.length:
            problems.append(f"{manifest.dataset_id}: {entry.path} has {actual} frames, manifest says {entry.length}")
    for problem in problems:
        datapipe_logger.warning(problem)
    return problems


def load_episodes(manifest: EpisodeManifest) -> list[Episode]:
    """Reads every listed episode and checks it against the declared action and proprio widths.

    Raises:
        ValueError: If an episode's actions or proprio disagree with the manifest.
    """
    episodes = []
    for entry in manifest.episodes:
        episode = read_episode(manifest.episode_path(entry))
        widths = {
            "action": (episode.actions.shape[1], manifest.native_action_dim),
            "proprio": (episode.proprio.shape[1], manifest.proprio_dim),
        }
        for name, (actual, declared) in widths.items():
            if actual != declared:
                raise ValueError(
                    f"{manifest.dataset_id}: {entry.path} has {name} width {actual}, manifest declares {declared}",
                )
        episodes.append(episode)
    return episodes
