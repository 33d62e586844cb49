import numpy as np
import pytest

from gammadyn.grid import ConfigSpace, GridGeometry


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def grid8():
    return GridGeometry(1, 8, 10.0)


@pytest.fixture
def grid32():
    return GridGeometry(1, 32, 10.0)


def random_tgf(space: ConfigSpace, rng, scale=1.0):
    from gammadyn.gamma import TruncatedGammaFunction
    return TruncatedGammaFunction.from_vector(space, scale * rng.normal(size=space.size))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
