import os

import numpy as np
import pytest

from gazessm.model import ModelConfig

FIXTURE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures", "clare_tiny")


@pytest.fixture(scope="session")
def fixture_dir():
    return FIXTURE_DIR


def tiny_model_config(**overrides):
    """Small config used across gradient and structural tests."""
    base = dict(
        input_dim=6,
        d_model=8,
        d_state=4,
        d_conv=2,
        expand=2,
        layers_per_direction=1,
        dropout=0.0,
        seed=0,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
