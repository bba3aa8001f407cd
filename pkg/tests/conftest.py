import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net_cfg():
    """Smallest sane 3-stage configuration for structural tests."""
    from pyrflow.network import NetworkConfig

    return NetworkConfig(stages=3, feature_channels=(6, 8), corr_radius=2,
                         estimator_channels=(8, 6), residual_channels=(4, 6),
                         parallel_correlation=False)
