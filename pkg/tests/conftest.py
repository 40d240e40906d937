import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=200, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_boxes(rng, n, lo=0.0, hi=1.0, min_size=0.01):
    """(n, 4) valid corner boxes inside [lo, hi]^2."""
    xy = rng.uniform(lo, hi - min_size, size=(n, 2))
    wh = rng.uniform(min_size, 1.0, size=(n, 2)) * (hi - xy)
    wh = np.maximum(wh, min_size * 0.5)
    return np.concatenate([xy, np.minimum(xy + wh, hi)], axis=1)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            if getattr(rep, "when", None) == "call":
                lines += [v for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
