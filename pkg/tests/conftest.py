import numpy as np
import pytest

from aptrack.config import TrackerConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Small geometry that keeps finite-difference checks cheap."""
    return TrackerConfig(patch=4, template_size=8, search_size=16, dim=8, layers=2, heads=2,
                         n_tokens=3, ami_layers=(1, 2), head_hidden=6)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
