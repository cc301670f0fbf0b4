"""Module for testing checkpoint persistence."""

import dataclasses
import hashlib
import io

import pytest
import torch

from latentpolicy import _config as cfg
from latentpolicy._checkpoint import CheckpointState, load_checkpoint, save_checkpoint
from latentpolicy._errors import CheckpointError


class _Opaque:
    pass


def _state(config, **changes) -> CheckpointState:
    torch.manual_seed(0)
    layer = torch.nn.Linear(3, 2)
    state = CheckpointState(
        kind="ata",
        models={"ata": layer.state_dict()},
        config=config,
        step=42,
        epoch=3,
        extra={"action_dim": 7, "val_loss": 0.125, "stats": {"arm7": {"low": [0.0], "dataset_id": "d"}}},
    )
    return dataclasses.replace(state, **changes)


class TestCheckpoint:
    """Tests for saving and loading checkpoints."""

    def test_save_and_load(self, tmp_path, tiny_config):
        """Test weights, counters, extras and config survive a save and load."""
        state = _state(tiny_config)
        receipt = save_checkpoint(state, tmp_path / "nested" / "ata.pt")
        loaded = load_checkpoint(receipt.path)

        assert loaded.kind == "ata"
        assert (loaded.step, loaded.epoch) == (42, 3)
        assert loaded.config == tiny_config
        assert loaded.config_hash == cfg.config_hash(tiny_config)
        assert loaded.extra == state.extra
        torch.testing.assert_close(loaded.models["ata"]["weight"], state.models["ata"]["weight"])

    def test_receipt_describes_file(self, tmp_path, tiny_config):
        """Test the receipt carries the file hash and size."""
        receipt = save_checkpoint(_state(tiny_config), tmp_path / "ata.pt")
        data = receipt.path.read_bytes()
        assert receipt.sha256 == hashlib.sha256(data).hexdigest()
        assert receipt.size_bytes == len(data)
        assert receipt.step == 42
        assert receipt.config_hash == cfg.config_hash(tiny_config)

    def test_optimizer_state_is_kept(self, tmp_path, tiny_config):
        """Test optimizer state is stored for resuming."""
        layer = torch.nn.Linear(2, 2)
        optimizer = torch.optim.AdamW(layer.parameters(), lr=1e-3)
        layer(torch.ones(1, 2)).sum().backward()
        optimizer.step()
        state = _state(tiny_config, models={"ata": layer.state_dict()}, optimizer=optimizer.state_dict())

        loaded = load_checkpoint(save_checkpoint(state, tmp_path / "ata.pt").path)

        fresh = torch.optim.AdamW(layer.parameters(), lr=1e-3)
        fresh.load_state_dict(loaded.optimizer)
        assert fresh.state_dict()["param_groups"][0]["lr"] == 1e-3

    def test_missing_file(self, tmp_path):
        """Test a missing checkpoint raises FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.pt")

    def test_truncated_file(self, tmp_path, tiny_config):
        """Test a truncated checkpoint raises CheckpointError."""
        path = save_checkpoint(_state(tiny_config), tmp_path / "ata.pt").path
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(CheckpointError, match="Corrupt"):
            load_checkpoint(path)

    def test_unknown_format_version(self, tmp_path):
        """Test a payload of another format version is rejected."""
        buffer = io.BytesIO()
        torch.save({"format_version": 99}, buffer)
        path = tmp_path / "future.pt"
        path.write_bytes(buffer.getvalue())
        with pytest.raises(CheckpointError, match="version 99"):
            load_checkpoint(path)

    def test_arbitrary_objects_are_refused(self, tmp_path):
        """Test a payload holding a pickled Python object is not unpickled."""
        buffer = io.BytesIO()
        torch.save({"format_version": cfg.CHECKPOINT_FORMAT_VERSION, "extra": _Opaque()}, buffer)
        path = tmp_path / "opaque.pt"
        path.write_bytes(buffer.getvalue())
        with pytest.raises(CheckpointError, match="Corrupt"):
            load_checkpoint(path)

    def test_config_mismatch_warns(self, tmp_path, tiny_config, caplog):
        """Test loading under a different config warns with the differing keys and continues."""
        path = save_checkpoint(_state(tiny_config), tmp_path / "ata.pt").path
        other = dataclasses.replace(tiny_config, ata_epochs=9, seed=4)

        with caplog.at_level("WARNING", logger="Checkpoint"):
            loaded = load_checkpoint(path, expected_config=other)

        assert loaded.config == tiny_config
        assert any("ata_epochs, seed" in record.message for record in caplog.records)
