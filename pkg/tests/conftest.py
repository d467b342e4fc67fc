import numpy as np
import pytest

from cflownets._alloc import tune_allocator
from cflownets.envs import make_env

tune_allocator()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def env():
    return make_env("point-robot-sparse")


def pytest_terminal_summary(terminalreporter):
    from tests_support import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
