import numpy as np
import pytest


def fd_grads(params, f, h=1e-6):
    """Central finite differences of the scalar ``f()`` for every entry of ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            hi = f()
            p[i] = old - h
            lo = f()
            p[i] = old
            g[i] = (hi - lo) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b):
    """Largest per-array relative error ``|a - b| / (|a| + |b|)``."""
    worst = 0.0
    for x, y in zip(a, b):
        den = np.linalg.norm(x) + np.linalg.norm(y)
        if den > 0:
            worst = max(worst, np.linalg.norm(x - y) / den)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one PASS/FAIL line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
