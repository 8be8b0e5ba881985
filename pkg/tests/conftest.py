import numpy as np
import pytest

from glada.config import TrainHyperparams
from glada.dataio import SynthSpec, TimeSeriesDataset, make_synthetic_pair


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="Run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="slow; pass --runslow to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_spec() -> SynthSpec:
    return SynthSpec(num_classes=3, samples_per_class=20, channels=2, length=32,
                     amplitude_scale=1.5, phase_offset=0.5, seed=0)


@pytest.fixture
def tiny_pair(tiny_spec) -> tuple[TimeSeriesDataset, TimeSeriesDataset]:
    return make_synthetic_pair(tiny_spec)


@pytest.fixture
def fast_hp() -> TrainHyperparams:
    return TrainHyperparams(epochs_pretrain=2, epochs_am=2, epochs_adapt=2, batch_size=16)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
