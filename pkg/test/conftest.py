"""Pytest configuration and fixtures for test suite."""

import numpy as np
import pytest

from src.config import PipelineConfig, SceneConfig
from src.models import InputMode


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    """Run every test with the default thread count and log level."""
    monkeypatch.delenv("LASER_THREADS", raising=False)
    monkeypatch.delenv("LASER_LOG_LEVEL", raising=False)


@pytest.fixture
def rng():
    """Seeded random generator."""
    return np.random.default_rng(12345)


@pytest.fixture
def small_scene_config():
    """Small layered scene that streams in a fraction of a second."""
    return SceneConfig(frames=40, height=12, width=16, layers=3, seed=7)


@pytest.fixture
def small_pipeline_config(tmp_path, small_scene_config):
    """Synthetic-input pipeline config writing into a temporary directory."""
    mapping = small_scene_config.to_mapping()
    mapping.update(
        {
            "window_len": "10",
            "overlap": "3",
            "input_mode": InputMode.SYNTHETIC.value,
            "input_dir": str(tmp_path / "predictions"),
            "output_dir": str(tmp_path / "output"),
        }
    )
    return PipelineConfig.from_mapping(mapping)
