import numpy as np
import pytest

from mixedr2.design import DesignData


def grouped_design(seed, m=8, n_i=6, p=2, tau=1.0, sigma=1.0, beta=None, balanced=True):
    """Random-intercept gaussian data as a DesignData (intercept plus p-1 covariates)."""
    rng = np.random.default_rng(seed)
    sizes = np.full(m, n_i) if balanced else rng.integers(2, 2 * n_i, size=m)
    g = np.repeat(np.arange(m), sizes)
    n = len(g)
    X = np.column_stack([np.ones(n)] + [rng.normal(size=n) for _ in range(p - 1)])
    beta = np.linspace(1.0, 0.5, p) if beta is None else np.asarray(beta, float)
    y = X @ beta + tau * rng.normal(size=m)[g] + sigma * rng.normal(size=n)
    return DesignData.from_arrays(y, X, g)


def count_design(seed, family, m=15, n_i=10, tau=0.7, slope=0.6):
    rng = np.random.default_rng(seed)
    g = np.repeat(np.arange(m), n_i)
    n = len(g)
    x = rng.normal(size=n)
    eta = -0.2 + slope * x + tau * rng.normal(size=m)[g]
    if family == "binomial":
        y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    else:
        y = rng.poisson(np.exp(eta)).astype(float)
    return DesignData.from_arrays(y, np.column_stack([np.ones(n), x]), g)


@pytest.fixture
def make_grouped():
    return grouped_design


@pytest.fixture
def make_counts():
    return count_design


_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number = int(name.split("_")[2])
        prev = _CRITERIA.get(number, "PASS")
        _CRITERIA[number] = "PASS" if report.passed and prev == "PASS" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {number:2d}: {_CRITERIA[number]}")
