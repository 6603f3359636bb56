from pathlib import Path

import numpy as np
import pytest

from ecoinfer import AggregateDataset

DATA_DIR = Path(__file__).parent / "data"


def random_shares(rng, m, d, alpha=2.0):
    return rng.dirichlet(np.full(d, alpha), size=m)


def random_dataset(rng, m=40, d=2, p=2, noise=0.05, n=None) -> AggregateDataset:
    """Small confounded dataset with known local coefficients."""
    xbar = random_shares(rng, m, d)
    z = rng.normal(size=(m, p))
    slope = rng.normal(scale=0.1, size=(p, d))
    B = np.linspace(0.3, 0.7, d) + z @ slope + noise * rng.normal(size=(m, d))
    y = np.einsum("gj,gj->g", B, xbar)
    return AggregateDataset.from_arrays(y, xbar, z, n=n)


def dense_design(xbar, Phi):
    """Row g equals xbar_g kron Phi_g, built with explicit loops."""
    m, d = xbar.shape
    J = Phi.shape[1]
    X = np.zeros((m, d * J))
    for g in range(m):
        for j in range(d):
            for k in range(J):
                X[g, j * J + k] = xbar[g, j] * Phi[g, k]
    return X


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def data_dir():
    return DATA_DIR


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


@pytest.fixture
def acceptance(request):
    """Record a criterion verdict; all verdicts are echoed in the summary."""
    lines = request.config.stash[ACCEPTANCE_LINES]

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
