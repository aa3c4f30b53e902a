"""Shared test helpers and the acceptance-summary reporter.

Acceptance tests record one PASS/FAIL line each; the terminal summary
prints them together at the end of the run so the verdicts are visible
without -s.
"""

import numpy as np

ACCEPTANCE_LINES = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def grid_quadrature_1d(log_density, lo: float, hi: float, n: int = 200_001):
    """Trapezoid integral of exp(log_density) on a dense 1-D grid."""
    x = np.linspace(lo, hi, n)
    f = np.exp(log_density(x))
    return float(np.trapezoid(f, x)), x, f


def gaussian_pdf(x, mean, var):
    return np.exp(-0.5 * (x - mean) ** 2 / var) / np.sqrt(2.0 * np.pi * var)
