import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from uotnode.uot_core import CostGrid, GridDensity, ProblemSpec  # noqa: E402

SUITE_LIMIT = 600.0
_START = time.time()
ACCEPTANCE = []


def record(ident, ok, detail=""):
    ACCEPTANCE.append((ident, bool(ok), detail))
    return ok


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    elapsed = time.time() - _START
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for ident, ok, detail in ACCEPTANCE:
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {ident}: {detail}")
        status = "PASS" if elapsed < SUITE_LIMIT else "FAIL"
        terminalreporter.write_line(f"{status} 10b suite runtime: {elapsed:.1f}s (limit {SUITE_LIMIT:.0f}s)")


def make_spec(kind="uniform", n=64, delta=0.01):
    if kind == "uniform":
        f = GridDensity.uniform(0, 1, n)
        g = GridDensity.uniform(0, 1, n)
        return ProblemSpec(f, g, CostGrid.zeros(f, g), delta)
    if kind == "asymmetric":
        f = GridDensity.uniform(0, 1, n)
        g = GridDensity.uniform(0, 1, n, 2.0)
        return ProblemSpec(f, g, CostGrid.zeros(f, g), delta)
    if kind == "quadratic":
        f = GridDensity.from_function(0, 1, n, lambda p: 1 + 0.5 * np.sin(2 * np.pi * p[:, 0]))
        g = GridDensity.from_function(0, 1, n, lambda p: 1.5 - 0.5 * p[:, 0])
        return ProblemSpec(f, g, CostGrid.squared_distance(f, g), delta)
    if kind == "tilted":
        f = GridDensity.from_function(0, 1, n, lambda p: 1 + 0.3 * p[:, 0])
        g = GridDensity.from_function(0, 1, n, lambda p: 1.2 - 0.2 * p[:, 0])
        return ProblemSpec(f, g, CostGrid.squared_distance(f, g), delta)
    if kind == "dilation":
        f = GridDensity.uniform(-0.5, 0.5, n)
        g = GridDensity.uniform(-1, 1, n, 0.5)
        return ProblemSpec(f, g, CostGrid.squared_distance(f, g), delta)
    if kind == "steep":
        f = GridDensity.uniform(0, 1, n)
        g = GridDensity.uniform(0, 1, n)
        C = CostGrid.from_function(f, g, lambda x, y: 10 * ((x - y) ** 2).sum(-1))
        return ProblemSpec(f, g, C, delta)
    raise KeyError(kind)


@pytest.fixture
def spec_factory():
    return make_spec
