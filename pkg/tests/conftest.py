"""Shared test fixtures."""

from __future__ import annotations

import logging
from collections.abc import Iterator
from pathlib import Path
from typing import Any
from unittest.mock import MagicMock

import numpy as np
import pytest
import yaml

from orthounlearn.config import ExperimentConfig, config_from_mapping
from orthounlearn.console import Reporter
from orthounlearn.engine import FederatedEngine
from orthounlearn.linalg import GradientMatrix
from orthounlearn.nn_core import Batch, ModelParams
from orthounlearn.runner import FederatedWorld, build_world


@pytest.fixture(autouse=True)
def _reset_package_logger() -> Iterator[None]:
    """Undo CLI logging setup so caplog sees package records."""
    package_logger = logging.getLogger("orthounlearn")
    handlers = list(package_logger.handlers)
    level = package_logger.level
    yield
    package_logger.handlers[:] = handlers
    package_logger.setLevel(level)
    package_logger.propagate = True


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator for test data."""
    return np.random.default_rng(1234)


# ============================================================================
# Configuration Fixtures
# ============================================================================


@pytest.fixture
def small_config_data(tmp_path: Path) -> dict[str, Any]:
    """Configuration mapping for a run that finishes in well under a second."""
    return {
        "dataset": {"kind": "blobs", "n_classes": 4, "per_class": 30, "dim": 16, "spread": 0.1},
        "partition": {"scheme": "pat", "percent": 50, "clients": 4, "target": 0},
        "trigger": {"patch_size": 2, "label_shift": 1, "fraction": 1.0},
        "schedule": {
            "pretrain_rounds": 20,
            "unlearn_rounds": 5,
            "total_rounds": 10,
            "lr0": 0.5,
            "early_stop": False,
        },
        "training": {"hidden": [8]},
        "algorithms": ["osd"],
        "seeds": [0],
        "output_dir": str(tmp_path / "run"),
    }


@pytest.fixture
def small_config(small_config_data: dict[str, Any]) -> ExperimentConfig:
    """Validated small configuration."""
    return config_from_mapping(small_config_data)


@pytest.fixture
def config_file(tmp_path: Path, small_config_data: dict[str, Any]) -> Path:
    """Small configuration written as YAML."""
    path = tmp_path / "experiment.yaml"
    path.write_text(yaml.safe_dump(small_config_data, sort_keys=False), encoding="utf-8")
    return path


# ============================================================================
# Simulation Fixtures
# ============================================================================


@pytest.fixture
def small_world(small_config: ExperimentConfig) -> FederatedWorld:
    """Partitioned and poisoned clients for seed 0."""
    return build_world(small_config, seed=0)


@pytest.fixture
def small_engine(small_config: ExperimentConfig, small_world: FederatedWorld) -> FederatedEngine:
    """Engine over the small world with the small schedule."""
    return FederatedEngine.create(
        small_world.evaluation,
        seed=0,
        schedule=small_config.schedule_settings(),
        training=small_config.training_settings(),
        geometry=small_config.geometry_settings(),
    )


@pytest.fixture
def linear_model() -> ModelParams:
    """Single-layer 2-class model that predicts the arg-max feature."""
    return ModelParams(flat=np.array([10.0, 0.0, 0.0, 10.0, 0.0, 0.0]), shapes=((2, 2),))


@pytest.fixture
def tiny_batch(rng: np.random.Generator) -> Batch:
    """Random 5-feature, 3-class batch."""
    return Batch(features=rng.standard_normal((12, 5)), labels=rng.integers(0, 3, size=12))


@pytest.fixture
def random_matrix(rng: np.random.Generator) -> GradientMatrix:
    """Three random gradients in 10 dimensions for clients 1..3."""
    return GradientMatrix(rows=rng.standard_normal((3, 10)), client_ids=(1, 2, 3))


# ============================================================================
# Mock Fixtures
# ============================================================================


@pytest.fixture
def mock_reporter() -> MagicMock:
    """Reporter double recording every call."""
    return MagicMock(spec=Reporter)


@pytest.fixture
def mock_store() -> MagicMock:
    """Result sink double recording every call."""
    store = MagicMock()
    store.prepare.return_value = None
    return store
