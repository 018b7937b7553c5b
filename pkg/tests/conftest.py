import numpy as np
import pytest

from ssdfuse import arch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_cfg():
    """Small fused detector used across tests: grayscale 300 input, 3
    classes, 1/8 width."""
    return arch.ArchConfig(num_classes=3, in_channels=1, width_mult=0.125)


@pytest.fixture(scope="session")
def baseline_graph(toy_cfg):
    return arch.build_ssd_baseline(toy_cfg)


@pytest.fixture(scope="session")
def fused_graph(toy_cfg):
    return arch.build_fused(toy_cfg)
