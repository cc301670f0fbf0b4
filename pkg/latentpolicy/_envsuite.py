"""Module with the synthetic planar manipulation suite.

The workspace is the unit square seen from two cameras. An agent disc moves
with velocity (or position-delta) commands, opens and closes a gripper, and
interacts with one task item through kinematic rules: pushed blocks move with
the agent, grasped cubes and slider handles attach to it, buttons register
while the closed gripper rests on them. Observations expose images and robot
state only.
"""

from __future__ import annotations

import dataclasses
import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from latentpolicy import _config as cfg
from latentpolicy import _internal as utils
from latentpolicy._episodes import Episode, EpisodeEntry, EpisodeManifest, write_episode, write_manifest
from latentpolicy._errors import DemoFailure
from latentpolicy._types import ObservationFrame

env_logger = logging.getLogger("EnvSuite")

AGENT_RADIUS = 0.03
ITEM_HALF_SIZE = 0.03
GRASP_RADIUS = 0.04
CONTACT_RADIUS = AGENT_RADIUS + ITEM_HALF_SIZE
SLIDER_LENGTH = 0.4
SLIDER_OPEN_FRACTION = 0.8
DEMO_RETRIES = 3

_GRIPPER_DEADBAND = 0.1
_ARRIVED = 0.01
_MARGIN_PX = 4
_PLACEMENT_ATTEMPTS = 1000

_PALETTE = {
    "background": (236, 232, 222),
    "wall": (196, 190, 176),
    "target": (126, 198, 120),
    "block": (204, 92, 60),
    "cube": (168, 72, 170),
    "button": (212, 48, 48),
    "button_pressed": (60, 170, 60),
    "rail": (150, 150, 150),
    "handle": (232, 150, 40),
    "agent_open": (64, 96, 206),
    "agent_closed": (20, 32, 112),
}


@dataclasses.dataclass(frozen=True)
class TaskSpec:
    """A task of the suite.

    Attributes:
        task_id: One of `cfg.TASK_IDS`.
        instruction: Natural-language instruction given to the policy.
        radius: Target-region radius of the success predicate.
        hold_steps: Consecutive steps the goal condition must hold.
        step_limit: Episode length limit.
    """

    task_id: str
    instruction: str
    radius: float
    hold_steps: int
    step_limit: int = 400


_TASKS = {
    "reach": TaskSpec("reach", "reach the target", radius=0.05, hold_steps=5),
    "push": TaskSpec("push", "push the block onto the target", radius=0.06, hold_steps=1),
    "pick_place": TaskSpec("pick_place", "pick up the cube and place it on the target", radius=0.06, hold_steps=1),
    "press": TaskSpec("press", "press the button", radius=0.04, hold_steps=3),
    "open_slider": TaskSpec("open_slider", "open the slider", radius=0.05, hold_steps=1),
    "pick_place_tight": TaskSpec(
        "pick_place_tight",
        "pick up the cube and place it precisely on the small target",
        radius=0.025,
        hold_steps=1,
    ),
}


def task_spec(task_id: str, step_limit: int = 400) -> TaskSpec:
    if task_id not in _TASKS:
        raise ValueError(f"Unknown task {task_id!r}, expected one of {', '.join(cfg.TASK_IDS)}")
    return dataclasses.replace(_TASKS[task_id], step_limit=step_limit)


@dataclasses.dataclass(frozen=True)
class Embodiment:
    """A robot interface: action layout, command gains and camera placement.

    The first two action dims move the agent, the last one drives the gripper
    and any dims in between are wrist joints the planar world ignores.
    """

    embodiment_id: str
    action_dim: int
    gain: tuple[float, float]
    max_step: float
    gripper_inverted: bool = False
    delta_units: bool = False
    camera_offset: tuple[float, float] = (0.0, 0.0)

    @property
    def gripper_index(self) -> int:
        return self.action_dim - 1

    @property
    def action_scale(self) -> float:
        """Magnitude of a full-speed motion command."""
        return self.max_step if self.delta_units else 1.0


EMBODIMENTS = {
    "arm4": Embodiment("arm4", 4, gain=(0.05, 0.05), max_step=0.04),
    "arm5": Embodiment(
        "arm5",
        5,
        gain=(1.0, 1.0),
        max_step=0.04,
        gripper_inverted=True,
        delta_units=True,
        camera_offset=(0.015, 0.0),
    ),
    "arm7": Embodiment("arm7", 7, gain=(0.03, 0.03), max_step=0.03, camera_offset=(0.0, 0.015)),
    "arm6": Embodiment("arm6", 6, gain=(0.04, 0.03), max_step=0.035, camera_offset=(-0.015, 0.0)),
    "arm8": Embodiment(
        "arm8",
        8,
        gain=(0.03, 0.03),
        max_step=0.03,
        gripper_inverted=True,
        camera_offset=(0.0, -0.015),
    ),
}
PRETRAIN_EMBODIMENTS = ("arm4", "arm5", "arm7", "arm6", "arm8")


def get_embodiment(embodiment_id: str) -> Embodiment:
    if embodiment_id not in EMBODIMENTS:
        raise ValueError(f"Unknown embodiment {embodiment_id!r}, expected one of {', '.join(EMBODIMENTS)}")
    return EMBODIMENTS[embodiment_id]


@dataclasses.dataclass(frozen=True, eq=False)
class EnvState:
    """Full simulator state; never handed to a policy.

    `item` is the block, cube, button or slider handle; `target` is the goal
    region centre (the rail end for the slider).
    """

    task: TaskSpec
    embodiment: Embodiment
    agent: np.ndarray
    gripper: float
    item: np.ndarray
    target: np.ndarray
    attached: bool = False
    hold: int = 0
    elapsed: int = 0
    seed: int = 0
    rail_start: float = 0.0
    image_size: int = 64

    def __post_init__(self) -> None:
        for name in ("agent", "item", "target"):
            pose = getattr(self, name)
            if pose.shape != (2,) or bool((pose < 0).any()) or bool((pose > 1).any()):
                raise ValueError(f"{name} pose {pose} lies outside the workspace")
        if self.elapsed > self.task.step_limit:
            raise ValueError(f"Elapsed steps {self.elapsed} exceed the step limit {self.task.step_limit}")

    @property
    def success(self) -> bool:
        return self.hold >= self.task.hold_steps

    @property
    def done(self) -> bool:
        return self.success or self.elapsed >= self.task.step_limit


def _sample_point(
    rng: np.random.Generator,
    low: float,
    high: float,
    away_from: Sequence[np.ndarray] = (),
    min_distance: float = 0.0,
) -> np.ndarray:
    for _ in range(_PLACEMENT_ATTEMPTS):
        point = rng.uniform(low, high, size=2)
        if all(np.linalg.norm(point - other) >= min_distance for other in away_from):
            return point
    raise RuntimeError(f"Could not place an object {min_distance} away from {len(away_from)} others")


def _initial_layout(task_id: str, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    if task_id in ("reach", "press"):
        goal = _sample_point(rng, 0.15, 0.85)
        agent = _sample_point(rng, 0.1, 0.9, [goal], 0.45)
        return agent, goal.copy(), goal, 0.0
    if task_id == "push":
        block = _sample_point(rng, 0.25, 0.75)
        target = _sample_point(rng, 0.25, 0.75, [block], 0.25)
        agent = _sample_point(rng, 0.1, 0.9, [block, target], 0.2)
        return agent, block, target, 0.0
    if task_id == "open_slider":
        start = float(rng.uniform(0.15, 0.35))
        handle = np.array([start, rng.uniform(0.2, 0.8)])
        agent = _sample_point(rng, 0.1, 0.9, [handle], 0.3)
        return agent, handle, np.array([start + SLIDER_LENGTH, handle[1]]), start
    cube = _sample_point(rng, 0.15, 0.85)
    target = _sample_point(rng, 0.15, 0.85, [cube], 0.3)
    agent = _sample_point(rng, 0.1, 0.9, [cube, target], 0.3)
    return agent, cube, target, 0.0


def reset(
    task: TaskSpec,
    embodiment: Embodiment,
    seed: int,
    *,
    image_size: int = 64,
) -> tuple[EnvState, ObservationFrame]:
    """Starts an episode with a seed-determined, collision-free layout."""
    agent, item, target, rail_start = _initial_layout(task.task_id, utils.seeded_rng(seed, f"reset/{task.task_id}"))
    state = EnvState(
        task=task,
        embodiment=embodiment,
        agent=agent,
        gripper=0.0,
        item=item,
        target=target,
        seed=seed,
        rail_start=rail_start,
        image_size=image_size,
    )
    return state, observe(state)


def _goal_reached(state: EnvState) -> bool:
    task = state.task
    if task.task_id == "reach":
        return bool(np.linalg.norm(state.agent - state.target) <= task.radius)
    if task.task_id == "push":
        return bool(np.linalg.norm(state.item - state.target) <= task.radius)
    if task.task_id == "press":
        return state.gripper == 1.0 and bool(np.linalg.norm(state.agent - state.item) <= task.radius)
    if task.task_id == "open_slider":
        opened = state.item[0] - state.rail_start
        return bool(opened >= SLIDER_OPEN_FRACTION * (state.target[0] - state.rail_start))
    return not state.attached and bool(np.linalg.norm(state.item - state.target) <= task.radius)


def advance(state: EnvState, action: np.ndarray) -> EnvState:
    """Applies one action and returns the next state without rendering it.

    Raises:
        ValueError: If the action width does not match the embodiment or the episode is over.
    """
    embodiment, task_id = state.embodiment, state.task.task_id
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (embodiment.action_dim,):
        raise ValueError(f"{embodiment.embodiment_id} expects {embodiment.action_dim} action dims, got {action.shape}")
    if state.done:
        raise ValueError("Cannot step a finished episode")

    command = np.clip(action, -1.0, 1.0)
    displacement = np.clip(np.asarray(embodiment.gain) * command[:2], -embodiment.max_step, embodiment.max_step)
    grip = -command[embodiment.gripper_index] if embodiment.gripper_inverted else command[embodiment.gripper_index]
    gripper = 1.0 if grip > _GRIPPER_DEADBAND else 0.0 if grip < -_GRIPPER_DEADBAND else state.gripper

    agent = np.clip(state.agent + displacement, 0.0, 1.0)
    item, attached = state.item.copy(), state.attached and gripper == 1.0
    if attached and task_id == "open_slider":
        agent = np.array([np.clip(agent[0], state.rail_start, state.target[0]), state.item[1]])
        item = agent.copy()
    elif attached:
        item = agent.copy()

    closing = state.gripper == 0.0 and gripper == 1.0
    if closing and task_id in ("pick_place", "pick_place_tight", "open_slider"):
        if np.linalg.norm(agent - item) <= GRASP_RADIUS:
            attached = True
            if task_id == "open_slider":
                agent = item.copy()
            else:
                item = agent.copy()
    if task_id == "push" and np.linalg.norm(agent - item) < CONTACT_RADIUS:
        if float(np.dot(displacement, item - state.agent)) > 0:
            item = np.clip(item + displacement, 0.0, 1.0)

    moved = dataclasses.replace(state, agent=agent, gripper=gripper, item=item, attached=attached)
    hold = state.hold + 1 if _goal_reached(moved) else 0
    return dataclasses.replace(moved, hold=hold, elapsed=state.elapsed + 1)


def step(state: EnvState, action: np.ndarray) -> tuple[EnvState, ObservationFrame, bool, bool]:
    """Applies one native action.

    Returns:
        The next state, its observation, whether the task is solved and
        whether the episode is over (solved or out of steps).
    """
    next_state = advance(state, action)
    return next_state, observe(next_state), next_state.success, next_state.done


def _project(view_id: str, point: np.ndarray, size: int, offset: tuple[float, float]) -> tuple[float, float]:
    x, y = point[0] + offset[0], point[1] + offset[1]
    if view_id == "top":
        u, v = x, 1.0 - y
    else:
        u, v = 0.8 * x + 0.2 * y, 0.15 + 0.7 * (1.0 - y)
    span = size - 2 * _MARGIN_PX
    return _MARGIN_PX + v * span, _MARGIN_PX + u * span


def render(state: EnvState, view_id: str) -> np.ndarray:
    """Rasterizes the state as seen by camera `view_id` into an `S x S x 3` uint8 image."""
    if view_id not in cfg.VIEW_IDS:
        raise ValueError(f"Unknown view {view_id!r}, expected one of {', '.join(cfg.VIEW_IDS)}")
    size = state.image_size
    span = size - 2 * _MARGIN_PX
    offset = state.embodiment.camera_offset
    rows, cols = np.mgrid[0:size, 0:size] + 0.5
    image = np.empty((size, size, 3), dtype=np.uint8)
    image[:] = _PALETTE["background"]
    if view_id == "front":
        image[rows < _MARGIN_PX + 0.15 * span] = _PALETTE["wall"]

    def disc(center: np.ndarray, radius: float, color: str) -> None:
        row, col = _project(view_id, center, size, offset)
        image[(rows - row) ** 2 + (cols - col) ** 2 <= (radius * span) ** 2] = _PALETTE[color]

    def square(center: np.ndarray, half: float, color: str) -> None:
        row, col = _project(view_id, center, size, offset)
        image[(np.abs(rows - row) <= half * span) & (np.abs(cols - col) <= half * span)] = _PALETTE[color]

    task_id = state.task.task_id
    if task_id == "open_slider":
        row, start = _project(view_id, np.array([state.rail_start, state.target[1]]), size, offset)
        _, end = _project(view_id, state.target, size, offset)
        image[(np.abs(rows - row) <= 1.0) & (cols >= start) & (cols <= end)] = _PALETTE["rail"]
        square(state.item, ITEM_HALF_SIZE, "handle")
    elif task_id == "press":
        square(state.item, ITEM_HALF_SIZE, "button_pressed" if state.hold else "button")
    else:
        disc(state.target, state.task.radius, "target")
        if task_id == "push":
            square(state.item, ITEM_HALF_SIZE, "block")
        elif task_id != "reach":
            square(state.item, ITEM_HALF_SIZE, "cube")
    disc(state.agent, AGENT_RADIUS * (0.7 if state.gripper else 1.0), "agent_closed" if state.gripper else "agent_open")
    return image


def _render_views(state: EnvState) -> dict[str, np.ndarray]:
    return {view_id: render(state, view_id) for view_id in sorted(cfg.VIEW_IDS)}


def _proprio(state: EnvState) -> np.ndarray:
    return np.array([state.agent[0], state.agent[1], state.gripper], dtype=np.float32)


def observe(state: EnvState) -> ObservationFrame:
    """What the policy sees: both camera images in [0, 1], robot state and the instruction."""
    return ObservationFrame(
        images=tuple((view_id, image.astype(np.float32) / 255.0) for view_id, image in _render_views(state).items()),
        proprio=_proprio(state),
        embodiment_id=state.embodiment.embodiment_id,
        task_instruction=state.task.instruction,
    )


def _segment_distance(start: np.ndarray, end: np.ndarray, point: np.ndarray) -> float:
    direction = end - start
    length_sq = float(np.dot(direction, direction))
    fraction = 0.0 if length_sq == 0 else float(np.clip(np.dot(point - start, direction) / length_sq, 0.0, 1.0))
    return float(np.linalg.norm(start + fraction * direction - point))


def _unit(vector: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vector)
    return vector / norm if norm > 0 else np.array([1.0, 0.0])


def _push_waypoint(state: EnvState) -> tuple[np.ndarray, str]:
    direction = _unit(state.target - state.item)
    to_item = state.item - state.agent
    if np.linalg.norm(to_item) < CONTACT_RADIUS + 0.03 and float(np.dot(_unit(to_item), direction)) > 0.9:
        return state.target - direction * 0.9 * CONTACT_RADIUS, "transport"
    side = np.array([-direction[1], direction[0]])
    side = side if float(np.dot(state.agent - state.item, side)) >= 0 else -side
    behind = state.item - direction * (CONTACT_RADIUS + 0.02)
    flank = state.item + side * (CONTACT_RADIUS + 0.04)
    # first waypoint reachable without touching the block
    for waypoint in (behind, flank + behind - state.item, flank):
        if _segment_distance(state.agent, waypoint, state.item) >= CONTACT_RADIUS + 0.01:
            return waypoint, "approach"
    return flank, "approach"


def demonstrator_command(state: EnvState) -> tuple[np.ndarray, bool, str]:
    """Scripted waypoint controller with access to the full state.

    Returns:
        The point to move towards, whether the gripper should be closed, and
        the skill label of the current phase.
    """
    task_id = state.task.task_id
    agent, item, target = state.agent, state.item, state.target
    near_item = np.linalg.norm(agent - item) <= _ARRIVED
    if task_id == "reach":
        near = np.linalg.norm(agent - target) <= 0.5 * state.task.radius
        return target, False, "hold" if near else "approach"
    if task_id == "push":
        waypoint, skill = _push_waypoint(state)
        return waypoint, False, skill
    if task_id == "press":
        if not near_item:
            return item, False, "approach"
        return item, True, "hold" if state.gripper else "press"
    if task_id == "open_slider":
        if state.attached:
            return target, True, "pull"
        return item, bool(near_item), "grasp" if near_item else "approach"
    if state.attached:
        if np.linalg.norm(agent - target) <= _ARRIVED:
            return target, False, "release"
        return target, True, "transport"
    return item, bool(near_item), "grasp" if near_item else "approach"


def _command_action(state: EnvState, waypoint: np.ndarray, close: bool, gain_jitter: float) -> np.ndarray:
    embodiment = state.embodiment
    delta = np.clip(waypoint - state.agent, -embodiment.max_step, embodiment.max_step) * gain_jitter
    action = np.zeros(embodiment.action_dim)
    action[:2] = delta / np.asarray(embodiment.gain)
    grip = 1.0 if close else -1.0
    action[embodiment.gripper_index] = -grip if embodiment.gripper_inverted else grip
    return action


def _run_demonstrator(
    task: TaskSpec,
    embodiment: Embodiment,
    seed: int,
    noise: float,
    quality: str,
    image_size: int,
) -> Episode | None:
    rng = utils.seeded_rng(seed, f"demo/{task.task_id}/{embodiment.embodiment_id}")
    sigma = noise * 2.0 * embodiment.action_scale * (3.0 if quality == "mh" else 1.0)
    gain_jitter = float(rng.uniform(0.7, 1.3)) if quality == "mh" else 1.0
    state, _ = reset(task, embodiment, seed, image_size=image_size)
    actions, proprio, skills = [], [], []
    frames: dict[str, list[np.ndarray]] = {view_id: [] for view_id in sorted(cfg.VIEW_IDS)}
    while not state.done:
        waypoint, close, skill = demonstrator_command(state)
        action = _command_action(state, waypoint, close, gain_jitter)
        action[:2] += rng.normal(0.0, sigma, size=2)
        action[:2] = np.clip(action[:2], -1.0, 1.0)
        action = action.astype(np.float32)
        for view_id, image in _render_views(state).items():
            frames[view_id].append(image)
        proprio.append(_proprio(state))
        skills.append(cfg.SKILL_LABELS.index(skill))
        actions.append(action)
        state = advance(state, action)
    if not state.success:
        return None
    return Episode(
        actions=np.stack(actions),
        proprio=np.stack(proprio),
        images={view_id: np.stack(images) for view_id, images in frames.items()},
        instruction=task.instruction,
        skills=np.array(skills, dtype=np.int16),
        task_id=task.task_id,
        embodiment_id=embodiment.embodiment_id,
        seed=seed,
    )


def scripted_demo(
    task: TaskSpec,
    embodiment: Embodiment,
    seed: int,
    *,
    noise: float = 0.02,
    quality: str = "ph",
    image_size: int = 64,
) -> Episode:
    """Records one successful demonstration of `task` on `embodiment`.

    Motion commands get Gaussian noise with standard deviation `noise` times
    the command range (three times that for the mixed-quality tier `mh`,
    which also mis-scales every command by a per-episode factor). Actions are
    stored as float32 and executed exactly as stored.

    Raises:
        DemoFailure: If the demonstrator fails on the seed and on every retry seed.
    """
    if quality not in ("ph", "mh"):
        raise ValueError(f"Unknown demonstration quality {quality!r}")
    for attempt in range(DEMO_RETRIES + 1):
        reset_seed = seed if attempt == 0 else int(utils.seeded_rng(seed, f"retry/{attempt}").integers(2**31))
        episode = _run_demonstrator(task, embodiment, reset_seed, noise, quality, image_size)
        if episode is not None:
            return episode
        env_logger.warning(f"Demonstrator failed on {task.task_id}/{embodiment.embodiment_id} with seed {reset_seed}")
    raise DemoFailure(
        f"Demonstrator failed on {task.task_id}/{embodiment.embodiment_id} seed {seed} after {DEMO_RETRIES} retries",
    )


@dataclasses.dataclass(frozen=True)
class ReplayResult:
    mismatched_frames: list[int]
    success: bool

    @property
    def exact(self) -> bool:
        return not self.mismatched_frames and self.success


def replay_episode(episode: Episode, step_limit: int = 400) -> ReplayResult:
    """Re-executes the stored actions from the stored reset seed and compares every observation."""
    if episode.seed < 0:
        raise ValueError("Episode has no reset seed and cannot be replayed")
    image_size = next(iter(episode.images.values())).shape[1]
    task = task_spec(episode.task_id, max(step_limit, episode.length))
    state, _ = reset(task, get_embodiment(episode.embodiment_id), episode.seed, image_size=image_size)
    mismatched = []
    for index in range(episode.length):
        views = _render_views(state)
        same_images = all(np.array_equal(views[view_id], episode.images[view_id][index]) for view_id in views)
        if not same_images or not np.array_equal(_proprio(state), episode.proprio[index]):
            mismatched.append(index)
        if state.done:
            mismatched.extend(range(index + 1, episode.length))
            break
        state = advance(state, episode.actions[index])
    return ReplayResult(mismatched_frames=mismatched, success=state.success)


def generate_dataset(
    out_dir: str | Path,
    dataset_id: str,
    embodiment: Embodiment,
    tasks: Sequence[str],
    episodes_per_task: int,
    seed: int,
    *,
    noise: float = 0.02,
    quality: str = "ph",
    image_size: int = 64,
    step_limit: int = 400,
    quality_flags: Sequence[str] = (),
) -> EpisodeManifest:
    """Writes scripted demonstrations of every task into `out_dir` with a `manifest.json`.

    Episodes whose demonstrator fails are skipped and logged.
    """
    out_dir = Path(out_dir)
    entries = []
    for task_id in tasks:
        task = task_spec(task_id, step_limit)
        seeds = utils.seeded_rng(seed, f"episodes/{dataset_id}/{task_id}").integers(0, 2**31, size=episodes_per_task)
        for index, episode_seed in enumerate(seeds):
            try:
                episode = scripted_demo(
                    task,
                    embodiment,
                    int(episode_seed),
                    noise=noise,
                    quality=quality,
                    image_size=image_size,
                )
            except DemoFailure as e:
                env_logger.warning(f"Skipping episode {index} of {dataset_id}/{task_id}: {e}")
                continue
            relative = f"{task_id}/episode_{index:04d}.npz"
            write_episode(episode, out_dir / relative)
            entries.append(
                EpisodeEntry(
                    path=relative,
                    length=episode.length,
                    instruction=episode.instruction,
                    view_ids=episode.view_ids,
                    task_id=task_id,
                ),
            )
    manifest = EpisodeManifest(
        dataset_id=dataset_id,
        embodiment_id=embodiment.embodiment_id,
        native_action_dim=embodiment.action_dim,
        episodes=tuple(entries),
        quality_flags=frozenset(quality_flags),
        proprio_dim=3,
        root=out_dir,
    )
    write_manifest(manifest, out_dir / "manifest.json")
    env_logger.info(f"Generated dataset {dataset_id}: {len(entries)} episodes on {embodiment.embodiment_id}")
    return manifest


def build_pretrain_mixture(
    n_embodiments: int,
    tasks: Sequence[str],
    episodes_per_cell: int,
    seed: int,
    out_dir: str | Path,
    *,
    noise: float = 0.02,
    image_size: int = 64,
    step_limit: int = 400,
) -> list[EpisodeManifest]:
    """Generates one dataset per embodiment covering every task, for cross-embodiment pre-training."""
    if not 2 <= n_embodiments <= len(PRETRAIN_EMBODIMENTS):
        raise ValueError(f"n_embodiments must lie in [2, {len(PRETRAIN_EMBODIMENTS)}], got {n_embodiments}")
    manifests = []
    for embodiment_id in PRETRAIN_EMBODIMENTS[:n_embodiments]:
        dataset_id = f"pretrain_{embodiment_id}"
        manifests.append(
            generate_dataset(
                Path(out_dir) / dataset_id,
                dataset_id,
                EMBODIMENTS[embodiment_id],
                tasks,
                episodes_per_cell,
                seed,
                noise=noise,
                image_size=image_size,
                step_limit=step_limit,
            ),
        )
    return manifests


def generate_suite(config: cfg.RunConfig, out_dir: str | Path) -> dict[str, list[EpisodeManifest]]:
    """Generates the pre-training mixture and the downstream dataset described by `config`."""
    out_dir = Path(out_dir)
    pretrain = build_pretrain_mixture(
        config.pretrain_embodiments,
        config.tasks,
        config.pretrain_episodes_per_task,
        config.seed,
        out_dir / "pretrain",
        noise=config.demo_noise,
        image_size=config.image_size,
        step_limit=config.step_limit,
    )
    downstream_id = f"downstream_{config.embodiment}"
    downstream = generate_dataset(
        out_dir / "downstream" / downstream_id,
        downstream_id,
        get_embodiment(config.embodiment),
        config.tasks,
        config.episodes_per_task,
        config.seed,
        noise=config.demo_noise,
        quality=config.demo_quality,
        image_size=config.image_size,
        step_limit=config.step_limit,
    )
    return {"pretrain": pretrain, "downstream": [downstream]}
