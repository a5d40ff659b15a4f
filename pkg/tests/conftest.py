"""Shared fixtures: small datasets, networks and a finite-difference helper"""

import numpy as np
import pytest

from src.autodiff.tensor import set_check_finite
from src.data.synthetic_generator import DatasetSpec, generate
from src.models.network import NetworkConfig
from src.training.trainer import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def finite_checks_off():
    set_check_finite(False)
    yield
    set_check_finite(False)


@pytest.fixture
def finite_difference():
    """Central differences of a scalar function of one array"""

    def numeric_gradient(f, x, h=1e-5):
        x = np.array(x, dtype=np.float64)
        grad = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            original = x[idx]
            x[idx] = original + h
            upper = f(x)
            x[idx] = original - h
            lower = f(x)
            x[idx] = original
            grad[idx] = (upper - lower) / (2.0 * h)
        return grad

    return numeric_gradient


@pytest.fixture
def tiny_spec():
    return DatasetSpec(num_classes=5, num_domains=2, image_side=4, channels=2,
                       imbalance_ratio=4.0, head_count=12, noise_std=0.1,
                       val_per_cell=2, test_per_cell=3, seed=0)


@pytest.fixture
def tiny_splits(tiny_spec):
    return generate(tiny_spec)


@pytest.fixture
def tiny_network_config():
    return NetworkConfig(in_channels=2, hidden_channels=3, conv_blocks_before_r=1,
                         conv_blocks_after_r=1, num_classes=5, image_side=4)


@pytest.fixture
def fast_train_config():
    return TrainConfig(learning_rate=0.05, batch_size=8, epochs=3, steps_per_epoch=4,
                       warm_start_epochs=1)
