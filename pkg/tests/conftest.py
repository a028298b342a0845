import numpy as np
import pytest

from baatbench.dataset import SyntheticSpec, generate_synthetic
from baatbench.training import TrainConfig, train


@pytest.fixture(scope="session")
def easy4():
    """Small easy synthetic set: 4 classes, 60 train / 15 test per class."""
    return generate_synthetic(SyntheticSpec(num_classes=4, per_class_train=60, per_class_test=15))


@pytest.fixture(scope="session")
def natural_images():
    return generate_synthetic(SyntheticSpec(num_classes=10, per_class_train=10, per_class_test=0,
                                            difficulty="natural")).train.images


@pytest.fixture(scope="session")
def tiny_model(easy4):
    """conv_small trained briefly on ``easy4``; good enough for plumbing tests."""
    return train("conv_small", easy4.train, TrainConfig(epochs=3, lr=0.05, batch_size=32))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter, config):
    from oracles import ACCEPTANCE_KEY
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
