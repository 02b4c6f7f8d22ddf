import functools

import numpy as np
import pytest

from predsls.model import build_chain_example
from predsls.synthesis import synthesize


@pytest.fixture(scope="session")
def chain16():
    return build_chain_example()


@pytest.fixture(scope="session")
def maps16(chain16):
    """Cached synthesizer: ``maps16(kappa)`` returns the chain-16 maps at that kappa."""

    @functools.lru_cache(maxsize=None)
    def get(kappa):
        return synthesize(chain16, kappa)

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from tests_support import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k.split("-")[1])):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
