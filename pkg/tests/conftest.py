import numpy as np
import pytest

from usbf3d import AcquisitionConfig, build_matrix_array, paper_probe


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


@pytest.fixture(scope="session")
def probe():
    return paper_probe()


@pytest.fixture(scope="session")
def acq(probe):
    return AcquisitionConfig.for_probe(probe, depth_range=(18e-3, 22e-3))


@pytest.fixture(scope="session")
def small_probe():
    """8x8 probe at the reference pitch; cheap enough for brute-force oracles."""
    return build_matrix_array(8, 8, 9.3e-3 / 32, 10.2e-3 / 32, 7.8e6)


@pytest.fixture(scope="session")
def small_acq(small_probe):
    return AcquisitionConfig.for_probe(small_probe, depth_range=(8e-3, 12e-3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS, lines

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in lines():
            terminalreporter.write_line(line)
