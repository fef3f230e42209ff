import numpy as np
import pytest

import ncve


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="also run tests marked slow (full-size sample draws)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def binary_sample():
    """One deterministic mid-size binary-confounder sample (n around 7k)."""
    return ncve.generate_binary_sample(ncve.default_params("binary"), 500_000, 11)


@pytest.fixture(scope="session")
def continuous_sample():
    """One deterministic continuous-confounder sample (n around 3k)."""
    return ncve.generate_continuous_sample(ncve.default_params("continuous"), 500_000, 11)


@pytest.fixture(scope="session")
def binary_bridge(binary_sample):
    return ncve.fit_bridge_moment(binary_sample, ncve.BridgeSpec.saturated())


@pytest.fixture(scope="session")
def continuous_bridge(continuous_sample):
    return ncve.fit_bridge_moment(continuous_sample, ncve.BridgeSpec.logistic_gaussian(1))


@pytest.fixture
def tiny_sample():
    """Hand-built 12-record sample with every (a, y) cell occupied."""
    a = np.array([0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1], dtype=float)
    y = np.array([1, 1, 0, 0, 0, 1, 1, 0, 0, 0, 1, 0], dtype=float)
    z = np.array([0, 1, 0, 1, 0, 1, 1, 0, 1, 0, 1, 1], dtype=float)[:, None]
    w = np.array([0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 1], dtype=float)[:, None]
    roles = ncve.VariableRoles("A", "Y", ("Z",), ("W",))
    return ncve.TndSample(a, y, z, w, np.empty((12, 0)), roles)
