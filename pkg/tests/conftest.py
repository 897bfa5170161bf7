import numpy as np
import pytest

from advens.data import Dataset, gen_two_gaussians, split
from advens.models import Architecture

H = 1e-5
FD_TOL = 1e-4


def numeric_grad(f, x, h=H):
    """Central finite differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def max_rel_error(analytic, numeric):
    """Max abs difference scaled by the larger of the two max-norms."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-8)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def away_from_kinks(rng, shape, gap=1e-3):
    """Normal draws nudged off zero so relu stays differentiable under FD."""
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap * 2, x)


@pytest.fixture(scope="session")
def gaussians():
    return gen_two_gaussians(2000, 20, 4.0, 1.0, seed=0)


@pytest.fixture(scope="session")
def gaussian_splits(gaussians):
    return split(gaussians, (0.6, 0.2, 0.2), seed=0)


@pytest.fixture
def tiny_data():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(40, 4))
    y = (x[:, 0] > 0.5).astype(np.int64)
    return Dataset(x, y, 2, name="tiny")


@pytest.fixture
def small_arch():
    return Architecture(4, (6,), 2)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
