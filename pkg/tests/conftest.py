import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fd_jacobian(fun, x, h=1e-6):
    """Central-difference Jacobian of ``fun`` at ``x``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((fun(x + e) - fun(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def rel_err(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300)


_ACCEPTANCE = []


@pytest.fixture
def record():
    """Log one acceptance line; all lines are repeated in the terminal summary."""

    def _record(criterion, item, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {criterion}: {item}  [{detail}]"
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
