import numpy as np
import pytest

from fassl.data import DatasetSpec, synth_gaussian_mixture


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data():
    spec = DatasetSpec(num_classes=6, max_count=60, imbalance_factor=10.0, input_dim=8, seed=3)
    return synth_gaussian_mixture(spec, test_per_class=20)

