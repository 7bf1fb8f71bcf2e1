"""Shared oracle helpers for the test suite.

Finite-difference oracles deliberately avoid the library's derivative code
paths: they nest stencils over plain kernel evaluations (or plain function
calls), so derivative checks compare two independent routes.
"""

import numpy as np
import pytest

from kexpfam.kernels import eval_kernel


def fd_kernel_partial(spec, y, y2, i, p, j, q, h=0.01):
    """Nested 4th-order central differences of eval_kernel.

    One 5-point stencil per derivative level keeps roundoff small enough to
    resolve mixed partials up to total order 4 at relative error well below
    1e-5.
    """
    y = np.asarray(y, dtype=np.float64)
    y2 = np.asarray(y2, dtype=np.float64)
    if p > 0:
        e = np.zeros(y.size)
        e[i] = h
        vals = [fd_kernel_partial(spec, y + k * e, y2, i, p - 1, j, q, h)
                for k in (-2, -1, 1, 2)]
        return (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * h)
    if q > 0:
        e = np.zeros(y2.size)
        e[j] = h
        vals = [fd_kernel_partial(spec, y, y2 + k * e, i, p, j, q - 1, h)
                for k in (-2, -1, 1, 2)]
        return (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * h)
    return eval_kernel(spec, y, y2)


def fd_gradient(f, y, h=1e-5):
    """Central-difference gradient of a scalar function of a vector."""
    y = np.asarray(y, dtype=np.float64)
    out = np.empty(y.size)
    for m in range(y.size):
        e = np.zeros(y.size)
        e[m] = h
        out[m] = (f(y + e) - f(y - e)) / (2 * h)
    return out


def fd_second(f, y, h=1e-4):
    """Per-dimension second derivatives by nested central differences."""
    y = np.asarray(y, dtype=np.float64)
    out = np.empty(y.size)
    for m in range(y.size):
        e = np.zeros(y.size)
        e[m] = h
        out[m] = (f(y + e) - 2.0 * f(y) + f(y - e)) / h**2
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance-criterion verdicts after the run, outside capture."""
    try:
        from test_acceptance import _REPORT_LINES
    except ImportError:
        return
    if _REPORT_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT_LINES:
            terminalreporter.write_line(line)
