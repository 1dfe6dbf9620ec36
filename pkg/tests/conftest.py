import numpy as np
import pytest

from aetcopt import GaussianLinearEnsemble

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def random_spd(rng, k, floor=0.2):
    A = rng.normal(size=(k, k))
    return A @ A.T + floor * np.eye(k)


def random_ensemble(rng, n, cost0=10.0, noise=0.0):
    Sigma = random_spd(rng, n + 1)
    costs = np.concatenate([[cost0], rng.uniform(0.1, 1.0, size=n)])
    return GaussianLinearEnsemble(rng.normal(size=n + 1), Sigma, costs, noise)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
