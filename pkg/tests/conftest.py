import numpy as np
import pytest

from spectral_sls.model import SynthesisConfig, build_model
from spectral_sls.spectral import Domain2D
from spectral_sls.synth import synthesize_one

# disturbance location of the published single-disturbance experiment
ZT_DEFAULT = (-0.26, 0.56)


@pytest.fixture(scope="session")
def dom():
    return Domain2D.square(2.0)


@pytest.fixture(scope="session")
def model(dom):
    return build_model(1.5, 16, dom, 12)


@pytest.fixture(scope="session")
def cfg():
    return SynthesisConfig()


@pytest.fixture(scope="session")
def response(model, cfg):
    return synthesize_one(model, cfg, ZT_DEFAULT)


@pytest.fixture(scope="session")
def small_model():
    """Coarse model (k=4) for tests that solve many problems."""
    return build_model(1.5, 16, Domain2D.square(2.0, quad_n=256), 4)


@pytest.fixture(scope="session")
def small_cfg(small_model):
    return SynthesisConfig(k=4, domain=small_model.domain)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_addoption(parser):
    parser.addoption("--with-dx01", action="store_true", default=False,
                     help="include the dx=0.1 comparator (n_x=1600) in the acceptance ordering check")


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
