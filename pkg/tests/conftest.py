import numpy as np
import pytest

from tbkit import estimator
from tbkit.measure import build_accretive, cantor


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def cantor256():
    return cantor(0.25, 4, 2)


@pytest.fixture(scope="session")
def cantor256_setup(cantor256):
    """256-atom planar Cantor measure with random-phase b1, b2, shifts and bases (8 levels)."""
    m = cantor256
    rng = np.random.default_rng(0)
    b1 = build_accretive("random_phase", m, rng, t=0.5)
    b2 = build_accretive("random_phase", m, rng, t=0.5)
    window = estimator.default_window(m, 8)
    systems = estimator.draw_systems(m, window, rng)
    bq, br = estimator.build_bases(m, systems, b1, b2, window)
    return {"m": m, "b1": b1, "b2": b2, "window": window, "systems": systems, "bq": bq, "br": br}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
