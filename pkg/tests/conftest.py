import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from qubo_portfolio.model import LinearConstraint, make_problem  # noqa: E402


def toy_problem(seed: int, with_constraint: bool = None, bounds=(0.0, 0.6)):
    """Three-asset instance with a random factor covariance.

    Even seeds carry a pair limit ``w0 + w1 <= 0.7`` unless overridden.
    """
    rng = np.random.default_rng(seed)
    f = rng.normal(0, 0.15, (3, 2))
    cov = f @ f.T + np.diag(rng.uniform(0.005, 0.02, 3))
    r = rng.uniform(0.01, 0.1, 3)
    w = np.ones(3) / 3
    s2 = float(w @ cov @ w) * rng.uniform(0.9, 1.3)
    if with_constraint is None:
        with_constraint = seed % 2 == 0
    cons = [LinearConstraint((1, 1, 0), "le", 0.7, "pair_le")] if with_constraint else []
    return make_problem(r, cov, s2, bounds=bounds, constraints=cons)


def random_problem(rng, n, n_constraints=None):
    """Random instance with up to two multi-asset constraints of mixed type."""
    f = rng.normal(0, 0.1, (n, max(1, n // 2)))
    cov = f @ f.T + np.diag(rng.uniform(1e-3, 1e-2, n))
    r = rng.uniform(-0.02, 0.1, n)
    hi = min(1.0, max(0.5, 1.5 / n))
    bounds = [(0.0, float(rng.uniform(hi, 1.0))) for _ in range(n)]
    if n_constraints is None:
        n_constraints = int(rng.integers(0, 3))
    cons = []
    for j in range(n_constraints):
        coeffs = rng.integers(0, 2, n).astype(float)
        if not coeffs.any():
            coeffs[0] = 1.0
        op = ("le", "ge", "eq")[j % 3]
        rhs = {"le": 0.6, "ge": 0.2, "eq": 0.5}[op]
        cons.append(LinearConstraint(tuple(coeffs), op, rhs, f"c{j}"))
    w = np.ones(n) / n
    return make_problem(r, cov, float(w @ cov @ w), bounds=bounds, constraints=cons)


@pytest.fixture
def toy():
    return toy_problem(0)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
