import numpy as np
import pytest

from hydrompc.params import load_config, load_parameters


@pytest.fixture(scope="session")
def params():
    return load_parameters()


@pytest.fixture(scope="session")
def raw_config():
    return load_config()


@pytest.fixture(scope="session")
def dt(params):
    return params.hydraulic.wave_step


def rel_err(a, b):
    """Relative error with a unit floor, elementwise for arrays."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
