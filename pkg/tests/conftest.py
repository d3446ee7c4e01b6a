import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_scores(rng, shape, low=0.05, high=1.0):
    """Strictly positive score map normalized to sum 1."""
    s = rng.uniform(low, high, shape)
    return s / s.sum()


@pytest.fixture(scope="session")
def toy_comparison():
    """Default-budget sparse-glyph run, both modes, seeds 0-2 (several minutes)."""
    from dartok.toytrain import compare_modes

    return compare_modes()


# acceptance criteria report here; summarized at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
