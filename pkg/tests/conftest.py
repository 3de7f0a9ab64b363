import numpy as np
import pytest
import torch

from pvseg.model.config import BackboneConfig, ModelConfig


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run desk-scale training tests"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def path(tmp_path):
    return tmp_path


@pytest.fixture(autouse=True)
def seeded():
    torch.manual_seed(0)
    np.random.seed(0)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> ModelConfig:
    """Four levels at strides 4..32, C_e = 8."""
    return ModelConfig(
        backbone=BackboneConfig(channels=(8, 8, 16, 16), blocks=(1, 1, 1, 1)),
        hidden_dim=8,
        num_heads=2,
        enc_layers=1,
        num_queries=4,
        dec_rounds=1,
    )


@pytest.fixture
def smooth_config() -> ModelConfig:
    """Tiny tanh config for finite-difference checks."""
    return ModelConfig(
        backbone=BackboneConfig(channels=(2, 2, 4, 4), blocks=(1, 1, 1, 1), activation="tanh"),
        hidden_dim=4,
        num_heads=2,
        enc_layers=1,
        dim_feedforward=8,
        num_queries=3,
        dec_rounds=1,
        activation="tanh",
    )
