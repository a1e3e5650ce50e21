import numpy as np
import pytest

from streamformer import ModelConfig, gen_weights

DESK = ModelConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk_cfg():
    return DESK


@pytest.fixture
def desk_weights():
    return gen_weights(DESK, seed=0)


def pytest_terminal_summary(terminalreporter):
    try:
        from tests.test_acceptance import RESULTS
    except ImportError:
        try:
            from test_acceptance import RESULTS
        except ImportError:
            return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[key])
