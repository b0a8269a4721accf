import time

import numpy as np
import pytest

from tformer.rng import Rng
from tformer.training import SgdConfig, train_demo

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def randn(rng):
    def draw(*shape):
        return rng.normal(int(np.prod(shape))).reshape(shape)

    return draw


@pytest.fixture(scope="session")
def demo_run():
    """One full 500-step Micro training run shared by every test that needs it."""
    start = time.perf_counter()
    result = train_demo(seed=0, cfg=SgdConfig(lr=0.05, momentum=0.9, steps=500, batch_size=32))
    result.seconds = time.perf_counter() - start
    return result


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
