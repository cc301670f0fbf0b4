"""Module with closed-loop evaluation of policies on the planar suite."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from collections.abc import Sequence
from typing import Protocol

import numpy as np
import torch

from latentpolicy import _config as cfg
from latentpolicy import _internal as utils
from latentpolicy._envsuite import EnvState, get_embodiment, reset, step, task_spec
from latentpolicy._types import ActionChunk, ObservationFrame

evaluator_logger = logging.getLogger("Evaluator")


class Policy(Protocol):
    name: str

    def plan(
        self,
        frames: Sequence[ObservationFrame],
        rng: torch.Generator | None = None,
        *,
        instructions: Sequence[str] | None = None,
    ) -> list[ActionChunk]: ...


@dataclasses.dataclass
class EvalReport:
    """Closed-loop success of one policy.

    Attributes:
        policy: Policy name, including sampler and step count for diffusion policies.
        variant: Ablation variant the policy was trained as.
        sampler: Sampler used (`none` for policies that do not sample).
        steps: Denoising steps per inference call.
        n_trials: Trials per task, each with its own environment seed.
        trials: `task_id -> per-trial success`.
        episode_steps: `task_id -> per-trial environment steps`.
        seconds_per_call: Mean wall-clock time of one batched inference call.
        inference_calls: Number of inference calls made.
        config_hash: Hash of the run config.
        seed: Evaluation seed the trial seeds derive from.
    """

    policy: str
    variant: str
    sampler: str
    steps: int
    n_trials: int
    trials: dict[str, list[bool]]
    episode_steps: dict[str, list[int]]
    seconds_per_call: float
    inference_calls: int
    config_hash: str
    seed: int

    def __post_init__(self) -> None:
        for task_id, outcomes in self.trials.items():
            if len(outcomes) != self.n_trials:
                raise ValueError(f"{task_id} has {len(outcomes)} trials, expected {self.n_trials}")

    @property
    def success_rates(self) -> dict[str, float]:
        return {task_id: float(np.mean(outcomes)) for task_id, outcomes in self.trials.items()}

    @property
    def success_std(self) -> dict[str, float]:
        """Standard deviation of the per-trial outcome over trial seeds."""
        return {task_id: float(np.std(np.asarray(outcomes, dtype=float))) for task_id, outcomes in self.trials.items()}

    @property
    def mean_success(self) -> float:
        rates = list(self.success_rates.values())
        return float(np.mean(rates)) if rates else 0.0

    def to_dict(self) -> dict[str, cfg.AnyType]:
        data = dataclasses.asdict(self)
        data["success_rates"] = self.success_rates
        data["success_std"] = self.success_std
        data["mean_success"] = self.mean_success
        return data

    @classmethod
    def from_dict(cls, data: dict[str, cfg.AnyType]) -> EvalReport:
        names = {field.name for field in dataclasses.fields(cls)}
        return cls(**{key: value for key, value in data.items() if key in names})


def _rollout_task(
    policy: Policy,
    states: list[EnvState],
    frames: list[ObservationFrame],
    execution_horizon: int,
    rng: torch.Generator,
    timings: list[float],
) -> list[EnvState]:
    """Runs every environment to completion, planning for all unfinished ones in one batched call."""
    while True:
        active = [i for i, state in enumerate(states) if not state.done]
        if not active:
            return states
        started = time.perf_counter()
        chunks = policy.plan([frames[i] for i in active], rng)
        timings.append(time.perf_counter() - started)
        for i, chunk in zip(active, chunks, strict=True):
            for action in chunk.values[:execution_horizon]:
                states[i], frames[i], _, done = step(states[i], action)
                if done:
                    break


def evaluate(
    policy: Policy,
    config: cfg.RunConfig,
    *,
    tasks: Sequence[str] | None = None,
    n_trials: int | None = None,
    seed: int | None = None,
    embodiment: str | None = None,
) -> EvalReport:
    """Evaluates `policy` closed-loop: observe, plan a chunk, execute it, re-plan until success or the step limit.

    Trial seeds derive from `(seed, task_id)` alone, so every policy evaluated
    with the same seed faces the same initial layouts.

    ---
    ### Example usage:

    ```python
    policy = load_latent_policy(run_dir / "ata.pt", run_dir / "lpg.pt", sampler="ddim", steps=50)
    report = evaluate(policy, config, n_trials=50)
    print(report.success_rates)
    ```
    """
    tasks = tuple(tasks or config.tasks)
    n_trials = n_trials or config.n_trials
    seed = config.seed if seed is None else seed
    robot = get_embodiment(embodiment or config.embodiment)
    trials: dict[str, list[bool]] = {}
    episode_steps: dict[str, list[int]] = {}
    timings: list[float] = []
    for task_id in tasks:
        task = task_spec(task_id, config.step_limit)
        trial_seeds = utils.seeded_rng(seed, f"eval/{task_id}").integers(0, 2**31, size=n_trials)
        rng = utils.seeded_torch_rng(seed, f"eval-policy/{task_id}")
        started = [reset(task, robot, int(s), image_size=config.image_size) for s in trial_seeds]
        states = [state for state, _ in started]
        frames = [frame for _, frame in started]
        final = _rollout_task(policy, states, frames, config.execution_horizon, rng, timings)
        trials[task_id] = [state.success for state in final]
        episode_steps[task_id] = [state.elapsed for state in final]
        evaluator_logger.info(f"{policy.name} on {task_id}: {np.mean(trials[task_id]):.2f} success over {n_trials}")

    sampler = getattr(policy, "sampler", "none")
    steps = config.T if sampler == "ddpm" else getattr(policy, "steps", 0)
    if getattr(policy, "mode", "diffusion") != "diffusion":
        sampler, steps = "none", 0
    return EvalReport(
        policy=policy.name,
        variant=config.variant,
        sampler=sampler,
        steps=int(steps),
        n_trials=n_trials,
        trials=trials,
        episode_steps=episode_steps,
        seconds_per_call=float(np.mean(timings)) if timings else math.nan,
        inference_calls=len(timings),
        config_hash=cfg.config_hash(config),
        seed=seed,
    )
