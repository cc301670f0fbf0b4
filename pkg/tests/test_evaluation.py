"""Module for testing closed-loop evaluation."""

import dataclasses
import math

import numpy as np
import pytest

from latentpolicy import _config as cfg
from latentpolicy._datapipe import ActionStats
from latentpolicy._evaluation import EvalReport, evaluate
from latentpolicy._policy import RandomPolicy
from latentpolicy._types import ActionChunk


def _report(**changes) -> EvalReport:
    report = EvalReport(
        policy="latent-diffusion-ddim5",
        variant="full",
        sampler="ddim",
        steps=5,
        n_trials=4,
        trials={"reach": [True, True, False, True], "press": [False, False, False, False]},
        episode_steps={"reach": [10, 12, 200, 9], "press": [200, 200, 200, 200]},
        seconds_per_call=0.01,
        inference_calls=40,
        config_hash="0" * 64,
        seed=0,
    )
    return dataclasses.replace(report, **changes)


class StillPolicy:
    """Plans all-zero chunks and counts its calls."""

    name = "still"

    def __init__(self, h: int, action_dim: int) -> None:
        self.h, self.action_dim = h, action_dim
        self.batch_sizes: list[int] = []

    def plan(self, frames, rng=None, *, instructions=None):
        self.batch_sizes.append(len(frames))
        return [
            ActionChunk(np.zeros((self.h, self.action_dim)), np.ones(self.h, dtype=bool), normalized=False)
            for _ in frames
        ]


class TestEvalReport:
    """Tests for the evaluation report."""

    def test_rates(self):
        """Test success rates, their spread and the task mean."""
        report = _report()
        assert report.success_rates == {"reach": 0.75, "press": 0.0}
        assert report.success_std["reach"] == pytest.approx(math.sqrt(0.75 * 0.25))
        assert report.mean_success == pytest.approx(0.375)

    def test_trial_count_must_match(self):
        """Test a task with the wrong number of trials is rejected."""
        with pytest.raises(ValueError, match="press has 3 trials, expected 4"):
            _report(trials={"reach": [True] * 4, "press": [False] * 3})

    def test_dict_round_trip(self):
        """Test derived fields are exported and ignored on import."""
        data = _report().to_dict()
        assert data["mean_success"] == pytest.approx(0.375)
        assert EvalReport.from_dict(data) == _report()

    def test_empty_report(self):
        """Test a report without tasks has zero mean success."""
        assert _report(trials={}, episode_steps={}).mean_success == 0.0


class TestEvaluate:
    """Tests for the closed-loop evaluation loop."""

    def test_batched_rollout(self, tiny_config):
        """Test all unfinished trials are planned together until the step limit."""
        config = dataclasses.replace(tiny_config, step_limit=20, execute_steps=2)
        policy = StillPolicy(config.h, 7)

        report = evaluate(policy, config)

        assert set(report.trials) == set(config.tasks)
        assert report.episode_steps == {task_id: [20, 20] for task_id in config.tasks}
        assert report.mean_success == 0.0
        assert report.inference_calls == 2 * 10
        assert set(policy.batch_sizes) == {2}
        assert (report.sampler, report.steps) == ("none", 0)
        assert report.config_hash == cfg.config_hash(config)

    def test_same_seed_same_outcome(self, tiny_config):
        """Test evaluation is reproducible for a fixed seed."""
        config = dataclasses.replace(tiny_config, step_limit=24)
        bounds = np.full(7, -1.0), np.full(7, 1.0)
        stats = {"arm7": ActionStats(low=bounds[0], high=bounds[1], min=bounds[0], max=bounds[1], dataset_id="d")}

        first = evaluate(RandomPolicy(config.h, stats), config, tasks=("reach",), n_trials=3, seed=5)
        second = evaluate(RandomPolicy(config.h, stats), config, tasks=("reach",), n_trials=3, seed=5)

        assert first.trials == second.trials
        assert first.episode_steps == second.episode_steps
        assert first.policy == "random"
        assert first.seed == 5
        assert first.n_trials == 3
