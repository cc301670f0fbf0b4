"""Module for testing inference-time policies."""

import dataclasses

import numpy as np
import pytest
import torch

from latentpolicy import _internal as utils
from latentpolicy._ata import AtaModel
from latentpolicy._checkpoint import CheckpointState, save_checkpoint
from latentpolicy._datapipe import ActionStats
from latentpolicy._encoders import build_frozen_encoders
from latentpolicy._envsuite import get_embodiment, reset, task_spec
from latentpolicy._errors import CheckpointError
from latentpolicy._lpg import LatentRegressor, LpgModel
from latentpolicy._policy import (
    LatentPolicy,
    RandomPolicy,
    TrajectoryDiffusionPolicy,
    dataset_stats_from_extra,
    frame_inputs,
    generate_actions,
    load_latent_policy,
    load_trajectory_policy,
    stats_from_extra,
)

ACTION_DIM = 7


def _stats(low: float = -2.0, high: float = 2.0) -> dict[str, ActionStats]:
    bounds = np.full(ACTION_DIM, low), np.full(ACTION_DIM, high)
    return {"arm7": ActionStats(low=bounds[0], high=bounds[1], min=bounds[0], max=bounds[1], dataset_id="d")}


def _frame(config, task_id="reach", seed=0):
    _, frame = reset(task_spec(task_id), get_embodiment("arm7"), seed, image_size=config.image_size)
    return frame


@pytest.fixture
def parts(tiny_config):
    torch.manual_seed(0)
    encoders = build_frozen_encoders(tiny_config)
    ata = AtaModel(tiny_config, ACTION_DIM, encoders.feature_dim)
    lpg = LpgModel(tiny_config, encoders.feature_dim)
    return encoders, ata, lpg


class TestLatentPolicy:
    """Tests for the latent policy."""

    def test_plan_returns_native_chunks(self, tiny_config, parts):
        """Test chunks are h x d_a, denormalized and inside the action range."""
        encoders, ata, lpg = parts
        policy = LatentPolicy(tiny_config, encoders, ata, _stats(), lpg, sampler="ddim", steps=5)

        chunks = policy.plan([_frame(tiny_config), _frame(tiny_config, "press", 1)], utils.seeded_torch_rng(0, "p"))

        assert len(chunks) == 2
        for chunk in chunks:
            assert chunk.values.shape == (tiny_config.h, ACTION_DIM)
            assert chunk.normalized is False
            assert np.all(np.abs(chunk.values) <= 2.0 + 1e-5)
            assert chunk.n_real == tiny_config.h

    def test_generation_is_reproducible(self, tiny_config, parts):
        """Test equal random streams give equal chunks for both samplers."""
        encoders, ata, lpg = parts
        for sampler in ("ddpm", "ddim"):
            policy = LatentPolicy(tiny_config, encoders, ata, _stats(), lpg, sampler=sampler, steps=5)
            first = generate_actions(policy, _frame(tiny_config), utils.seeded_torch_rng(0, "g"))
            second = generate_actions(policy, _frame(tiny_config), utils.seeded_torch_rng(0, "g"))
            np.testing.assert_array_equal(first.values, second.values)

    def test_instruction_override(self, tiny_config, parts):
        """Test a replaced instruction changes the conditioning."""
        encoders, ata, lpg = parts
        policy = LatentPolicy(tiny_config, encoders, ata, _stats(), lpg, sampler="ddim", steps=5)
        frame = _frame(tiny_config)
        own = generate_actions(policy, frame, utils.seeded_torch_rng(0, "g"))
        other = generate_actions(policy, frame, utils.seeded_torch_rng(0, "g"), instruction="press the button")
        assert not np.array_equal(own.values, other.values)

    def test_prior_and_regression_modes(self, tiny_config, parts):
        """Test the prior mode is deterministic and the regression mode runs."""
        encoders, ata, _ = parts
        prior = LatentPolicy(tiny_config, encoders, ata, _stats(), mode="prior")
        regressor = LatentRegressor(tiny_config, encoders.feature_dim)
        regression = LatentPolicy(tiny_config, encoders, ata, _stats(), regressor, mode="regression")

        first = generate_actions(prior, _frame(tiny_config), utils.seeded_torch_rng(0, "a"))
        second = generate_actions(prior, _frame(tiny_config), utils.seeded_torch_rng(1, "b"))
        np.testing.assert_array_equal(first.values, second.values)
        assert generate_actions(regression, _frame(tiny_config)).values.shape == (tiny_config.h, ACTION_DIM)
        assert prior.name == "latent-prior"
        assert regression.name == "latent-regression"

    def test_invalid_modes(self, tiny_config, parts):
        """Test unknown modes and a missing generator raise ValueError."""
        encoders, ata, _ = parts
        with pytest.raises(ValueError, match="Unknown latent policy mode"):
            LatentPolicy(tiny_config, encoders, ata, _stats(), mode="oracle")
        with pytest.raises(ValueError, match="needs a latent generator"):
            LatentPolicy(tiny_config, encoders, ata, _stats(), mode="diffusion")

    def test_name(self, tiny_config, parts):
        """Test the policy name includes sampler and step count."""
        encoders, ata, lpg = parts
        assert LatentPolicy(tiny_config, encoders, ata, _stats(), lpg, sampler="ddim", steps=5).name == (
            "latent-diffusion-ddim5"
        )

    def test_unknown_embodiment(self, tiny_config, parts):
        """Test frames of an embodiment without statistics are rejected."""
        encoders, ata, _ = parts
        policy = LatentPolicy(tiny_config, encoders, ata, {}, mode="prior")
        with pytest.raises(ValueError, match="No action statistics"):
            generate_actions(policy, _frame(tiny_config))

    def test_frame_inputs_without_proprio(self, tiny_config, parts):
        """Test frames without robot state are flagged absent."""
        encoders, _, _ = parts
        frame = dataclasses.replace(_frame(tiny_config), proprio=None)
        inputs = frame_inputs(encoders, [frame], tiny_config.crop_size, tiny_config.d_s)
        assert inputs.present.tolist() == [False]
        assert inputs.features.shape == (1, encoders.feature_dim)
        assert inputs.f_text.shape == (1, tiny_config.d_model)


class TestOtherPolicies:
    """Tests for the random and trajectory-space policies."""

    def test_random_policy(self, tiny_config):
        """Test random chunks cover the embodiment's action range."""
        policy = RandomPolicy(tiny_config.h, _stats(-0.5, 0.5))
        chunk = generate_actions(policy, _frame(tiny_config), utils.seeded_torch_rng(0, "r"))
        assert chunk.values.shape == (tiny_config.h, ACTION_DIM)
        assert np.all(np.abs(chunk.values) <= 0.5 + 1e-6)

    def test_trajectory_policy(self, tiny_config, parts):
        """Test the trajectory baseline samples chunks directly."""
        encoders, _, _ = parts
        model = LpgModel(tiny_config, encoders.feature_dim, target="trajectory", action_dim=ACTION_DIM)
        policy = TrajectoryDiffusionPolicy(tiny_config, encoders, model, _stats(), sampler="ddim", steps=5)
        chunk = generate_actions(policy, _frame(tiny_config), utils.seeded_torch_rng(0, "t"))
        assert chunk.values.shape == (tiny_config.h, ACTION_DIM)
        assert policy.name == "trajectory-ddim5"
        with pytest.raises(ValueError, match="trajectory-space"):
            TrajectoryDiffusionPolicy(tiny_config, encoders, LpgModel(tiny_config, encoders.feature_dim), _stats())


class TestStatsFromExtra:
    """Tests for reading action statistics stored with a checkpoint."""

    def test_embodiment_uses_mapped_dataset(self):
        """Test two datasets of one embodiment keep their own ranges and inference uses the mapped one."""
        narrow = _stats(-1.0, 1.0)["arm7"]
        wide = dataclasses.replace(_stats(-8.0, 8.0)["arm7"], dataset_id="wide")
        extra = {"stats": {"d": narrow.to_dict(), "wide": wide.to_dict()}, "embodiment_datasets": {"arm7": "wide"}}

        by_dataset = dataset_stats_from_extra(extra)
        by_embodiment = stats_from_extra(extra)

        np.testing.assert_array_equal(by_dataset["d"].max, np.full(ACTION_DIM, 1.0))
        np.testing.assert_array_equal(by_dataset["wide"].max, np.full(ACTION_DIM, 8.0))
        assert list(by_embodiment) == ["arm7"]
        assert by_embodiment["arm7"].dataset_id == "wide"

    def test_unknown_dataset_raises(self):
        """Test an embodiment mapped to a dataset without statistics is rejected."""
        extra = {"stats": {"d": _stats()["arm7"].to_dict()}, "embodiment_datasets": {"arm7": "gone"}}
        with pytest.raises(CheckpointError, match="without statistics"):
            stats_from_extra(extra)


class TestLoading:
    """Tests for building policies from checkpoints."""

    def _save_ata(self, tmp_path, config, parts):
        encoders, ata, _ = parts
        extra = {
            "action_dim": ACTION_DIM,
            "stats": {"d": _stats()["arm7"].to_dict()},
            "embodiment_datasets": {"arm7": "d"},
        }
        models = {"encoders": encoders.state_dict(), "ata": ata.state_dict()}
        return save_checkpoint(CheckpointState("ata", models, config, extra=extra), tmp_path / "ata.pt").path

    def test_load_latent_policy(self, tmp_path, tiny_config, parts):
        """Test a loaded policy reproduces the in-memory one."""
        encoders, ata, lpg = parts
        ata_path = self._save_ata(tmp_path, tiny_config, parts)
        lpg_path = save_checkpoint(CheckpointState("lpg", {"lpg": lpg.state_dict()}, tiny_config), tmp_path / "lpg.pt")

        loaded = load_latent_policy(ata_path, lpg_path.path, sampler="ddim", steps=5)
        original = LatentPolicy(tiny_config, encoders, ata, _stats(), lpg, sampler="ddim", steps=5)

        assert loaded.mode == "diffusion"
        expected = generate_actions(original, _frame(tiny_config), utils.seeded_torch_rng(0, "l"))
        actual = generate_actions(loaded, _frame(tiny_config), utils.seeded_torch_rng(0, "l"))
        np.testing.assert_allclose(actual.values, expected.values, atol=1e-5)

    def test_load_without_generator_uses_prior(self, tmp_path, tiny_config, parts):
        """Test an ATA checkpoint alone gives the prior-latent policy."""
        policy = load_latent_policy(self._save_ata(tmp_path, tiny_config, parts))
        assert policy.mode == "prior"

    def test_incompatible_checkpoints(self, tmp_path, tiny_config, parts):
        """Test generators trained for another latent width are rejected."""
        ata_path = self._save_ata(tmp_path, tiny_config, parts)
        other = dataclasses.replace(tiny_config, d_z=4)
        lpg = LpgModel(other, parts[0].feature_dim)
        lpg_path = save_checkpoint(CheckpointState("lpg", {"lpg": lpg.state_dict()}, other), tmp_path / "lpg.pt").path
        with pytest.raises(CheckpointError, match="d_z"):
            load_latent_policy(ata_path, lpg_path)

    def test_wrong_kinds(self, tmp_path, tiny_config, parts):
        """Test checkpoints of the wrong kind are rejected."""
        ata_path = self._save_ata(tmp_path, tiny_config, parts)
        with pytest.raises(CheckpointError, match="not lpg or regressor"):
            load_latent_policy(ata_path, ata_path)
        with pytest.raises(CheckpointError, match="Expected a trajectory checkpoint"):
            load_trajectory_policy(ata_path)
        with pytest.raises(CheckpointError, match="Expected an ata checkpoint"):
            load_latent_policy(self._save_lpg(tmp_path, tiny_config, parts))

    def _save_lpg(self, tmp_path, config, parts):
        _, _, lpg = parts
        return save_checkpoint(CheckpointState("lpg", {"lpg": lpg.state_dict()}, config), tmp_path / "g.pt").path
