import numpy as np
import pytest

from lohp.nn import make_rng


def central_diff(f, x, h=1e-5):
    """Central finite differences of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-5):
    """Elementwise relative error; entries below `floor` in magnitude are compared absolutely."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return make_rng(1234)


_CRITERIA = []


def record_criterion(tag, ok, detail):
    line = f"{tag:4s} {'PASS' if ok else 'FAIL'}  {detail}"
    _CRITERIA.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
