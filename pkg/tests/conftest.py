import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from coupledfwi.wave import GridSpec  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_grid():
    # K = 16, CFL-admissible up to m ~ 22
    return GridSpec(cells_per_side=16, dt=0.002, t_final=0.3, record_stride=5)


@pytest.fixture
def grid26():
    return GridSpec(cells_per_side=26, dt=1e-3, t_final=0.5, record_stride=10)


# one PASS/FAIL line per acceptance criterion, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
