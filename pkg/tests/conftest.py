import numpy as np
import pytest

from waicwbic import ConjugateNormalMeanModel, Dataset, sample_truth


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def conj1():
    return ConjugateNormalMeanModel(d=1, sigma=1.0, tau=1.0, mu0=0.3)


@pytest.fixture
def conj1_data(conj1):
    return sample_truth(conj1, 100, seed=11)


def fd_gradient(model, x, w, h=1e-6):
    """Central finite differences of ``log p(x|w)`` in each coordinate of ``w``."""
    w = np.asarray(w, dtype=float)
    g = np.empty_like(w)
    for j in range(w.size):
        e = np.zeros_like(w)
        e[j] = h
        g[j] = (model.log_density(x, w + e) - model.log_density(x, w - e)) / (2 * h)
    return g


def interior_points(model, count, rng, margin=0.05):
    lo, hi = model.lower, model.upper
    span = hi - lo
    return lo + span * (margin + (1 - 2 * margin) * rng.random((count, model.parameter_dim)))


# PASS/FAIL lines collected by test_acceptance.py, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
