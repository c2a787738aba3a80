import numpy as np
import pytest

from kklearn.datagen import ObserverSpec, generate_dataset
from kklearn.dynamics import Box, TimeGrid, builtin_system
from kklearn.neural import MlpModel


def identity_model():
    """Exact one-weight network realising x -> x."""
    return MlpModel((1, 1), "relu", np.array([1.0, 0.0]), [0.0], [1.0], [0.0], [1.0])


@pytest.fixture(scope="session")
def scalar_setup():
    system = builtin_system("scalar_linear")
    spec = ObserverSpec(np.array([[-2.0]]), np.array([[1.0]]))
    return system, spec


@pytest.fixture(scope="session")
def scalar_dataset(scalar_setup):
    system, spec = scalar_setup
    return generate_dataset(system, spec, Box.cube(1), 50, TimeGrid.horizon(3.0), 1e-3, seed=0)


@pytest.fixture(scope="session")
def duffing_setup():
    return builtin_system("reverse_duffing"), ObserverSpec.default(2)


@pytest.fixture(scope="session")
def scalar_trained(scalar_setup, scalar_dataset):
    from kklearn.training import TrainingConfig, train
    system, spec = scalar_setup
    cfg = TrainingConfig(epochs=1, steps_per_epoch=2000, lr_decay=0.5, decay_interval=500)
    return train(scalar_dataset, system, spec, cfg)
