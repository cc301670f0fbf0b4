"""Module containing tests for run-log checks."""

from unittest.mock import patch

import numpy as np

import latentpolicy
from latentpolicy import _config as cfg


class TestCheckFunction:
    """Tests for the check function."""

    def test_check_without_context(self):
        """Test check still returns the outcome without a run log."""
        with patch.object(cfg, "CURRENT_LOG_CONTAINER_STACK") as mock_stack:
            mock_stack.get.return_value = None

            assert latentpolicy.check(True, "passes") is True
            assert latentpolicy.check(False, "fails") is False

    def test_check_records_entry(self):
        """Test a check appends a typed entry to the current container."""
        log_container = []

        with patch.object(cfg, "CURRENT_LOG_CONTAINER_STACK") as mock_stack:
            mock_stack.get.return_value = [log_container]
            latentpolicy.check(True, "Frozen weights unchanged")

        assert log_container == [{"type": "check", "label": "Frozen weights unchanged", "passed": True}]

    def test_check_with_details(self):
        """Test string and list details are stored verbatim."""
        with latentpolicy.run_log() as log:
            latentpolicy.check(False, "Speedup", details="ddpm=1.0s, ddim=0.9s")
            latentpolicy.check(True, "Tasks", details=["reach", "press"])

        assert log[0]["details"] == "ddpm=1.0s, ddim=0.9s"
        assert log[1]["details"] == ["reach", "press"]

    def test_check_coerces_truthiness(self):
        """Test non-bool conditions are recorded as bools."""
        with latentpolicy.run_log() as log:
            result = latentpolicy.check(0, "zero is falsy")

        assert result is False
        assert log[0]["passed"] is False

    def test_check_logs_warning_on_failure(self, caplog):
        """Test failed checks are logged at warning level."""
        with caplog.at_level("INFO", logger="Check"):
            latentpolicy.check(False, "Beats random")

        assert any(record.levelname == "WARNING" and "Beats random" in record.message for record in caplog.records)

    def test_check_with_measurements(self, caplog):
        """Test a mapping of measured values is stored and logged as name=value lines."""
        with caplog.at_level("INFO", logger="Check"), latentpolicy.run_log() as log:
            latentpolicy.check(
                False,
                "DDPM slower than DDIM",
                details={"ddpm1000_s": 0.0123456, "slowest_ddim_s": np.float32(0.5), "steps": 50, "sampler": "ddim"},
            )

        assert log[0]["details"] == ["ddpm1000_s=0.01235", "slowest_ddim_s=0.5", "steps=50", "sampler=ddim"]
        assert any("- ddpm1000_s=0.01235" in record.message for record in caplog.records)

    def test_empty_measurements(self):
        """Test an empty mapping is stored as an empty list."""
        with latentpolicy.run_log() as log:
            latentpolicy.check(True, "nothing measured", details={})

        assert log[0]["details"] == []
