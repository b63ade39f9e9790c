import sys

import numpy as np
import pytest

from conequery import ops
from conequery.synthetic import random_kg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_params():
    return ops.ModelParams.init(12, 3, 4, 8, np.random.default_rng(7))


@pytest.fixture(scope="session")
def small_kg():
    return random_kg(50, 5, 400, np.random.default_rng(99))


def pytest_terminal_summary(terminalreporter):
    # the acceptance module collects one line per criterion
    for name, mod in list(sys.modules.items()):
        if name.endswith("test_acceptance") and getattr(mod, "RESULTS", None):
            terminalreporter.section("acceptance criteria")
            for line in mod.summary_lines():
                terminalreporter.write_line(line)
