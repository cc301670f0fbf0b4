"""Module for testing the attach function."""

import json
from unittest.mock import patch

import numpy as np

import latentpolicy
from latentpolicy import _config as cfg


class TestAttachFunction:
    """Tests for the attach function."""

    def test_attach_without_context(self):
        """Test attach function when no context is available."""
        with patch.object(cfg, "CURRENT_LOG_CONTAINER_STACK") as mock_stack:
            mock_stack.get.return_value = None

            latentpolicy.attach("test data", "Test label")

    def test_attach_string_data(self):
        """Test attach function with string data."""
        log_container = []

        with patch.object(cfg, "CURRENT_LOG_CONTAINER_STACK") as mock_stack:
            mock_stack.get.return_value = [log_container]
            latentpolicy.attach("h=16\nd_z=64", "Resolved config")

        assert len(log_container) == 1
        entry = log_container[0]
        assert entry["type"] == "attachment"
        assert entry["label"] == "Resolved config"
        assert entry["data"] == "h=16\nd_z=64"
        assert entry["content_type"] == "text"

    def test_attach_dict_data(self):
        """Test attach function with dictionary data."""
        log_container = []

        with patch.object(cfg, "CURRENT_LOG_CONTAINER_STACK") as mock_stack:
            mock_stack.get.return_value = [log_container]
            latentpolicy.attach({"reach": 0.9, "press": 0.7}, "Success rates")

        entry = log_container[0]
        assert entry["content_type"] == "json"
        assert json.loads(entry["data"]) == {"reach": 0.9, "press": 0.7}

    def test_attach_numpy_data(self):
        """Test numpy arrays and scalars are converted to JSON."""
        log_container = []

        with patch.object(cfg, "CURRENT_LOG_CONTAINER_STACK") as mock_stack:
            mock_stack.get.return_value = [log_container]
            latentpolicy.attach({"history": np.array([1.5, 0.5]), "best": np.float32(0.5)}, "Training history")

        assert json.loads(log_container[0]["data"]) == {"history": [1.5, 0.5], "best": 0.5}

    def test_attach_other_object(self):
        """Test arbitrary objects are stored as their repr."""
        log_container = []

        with patch.object(cfg, "CURRENT_LOG_CONTAINER_STACK") as mock_stack:
            mock_stack.get.return_value = [log_container]
            latentpolicy.attach(3.5, "Scalar")

        assert log_container[0]["data"] == "3.5"
        assert log_container[0]["content_type"] == "text"

    def test_attach_truncates_large_payload(self):
        """Test payloads above the limit are truncated and labelled."""
        log_container = []
        original_limit = cfg.ATTACH_LIMIT_BYTES
        cfg.ATTACH_LIMIT_BYTES = 8
        try:
            with patch.object(cfg, "CURRENT_LOG_CONTAINER_STACK") as mock_stack:
                mock_stack.get.return_value = [log_container]
                latentpolicy.attach("x" * 100, "Long text")
        finally:
            cfg.ATTACH_LIMIT_BYTES = original_limit

        entry = log_container[0]
        assert entry["label"] == "Long text (truncated)"
        assert entry["data"].startswith("x" * 8)
        assert entry["data"].endswith("[TRUNCATED]")
