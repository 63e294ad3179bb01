import numpy as np
import pytest

from synthdesign.panel import Panel, PotentialPanel


def random_panel(rng, n, t):
    return Panel.from_array(rng.normal(size=(n, t)))


def random_potential(rng, n, t, effects=False):
    y0 = rng.normal(size=(n, t))
    y1 = y0 + (rng.normal(size=(n, t)) if effects else 0.0)
    return PotentialPanel(y0, y1)


def acceptance_panels(count=20, seed=20240):
    """Seeded zero-effect panels with N in 4..8 and T in 5..12."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        n, t = int(rng.integers(4, 9)), int(rng.integers(5, 13))
        out.append(PotentialPanel.zero_effect(rng.normal(size=(n, t))))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def three_states():
    """Three states at evenly spaced levels; CA sits in the middle."""
    return Panel.from_array([[0.0, 1.0, 0.0], [1.0, 2.0, 1.0], [2.0, 3.0, 2.0]],
                            units=["AZ", "CA", "NY"], periods=["1987", "1988", "1989"])


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(results):
        terminalreporter.write_line(results[k])
