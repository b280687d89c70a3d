import numpy as np
import pytest
from hypothesis import settings

from twcv.core import Dataset

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def make_dataset(n=40, p=2, seed=0, names=None):
    rng = np.random.default_rng(seed)
    coords = rng.random((n, 2))
    X = rng.normal(size=(n, p))
    names = tuple(names or (f"x{j + 1}" for j in range(p)))
    y = X @ np.arange(1, p + 1) + rng.normal(scale=0.5, size=n)
    return Dataset(coords, X, names, y)


@pytest.fixture
def small_data():
    return make_dataset()


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for n in sorted(REPORT):
            terminalreporter.write_line(REPORT[n])
