import numpy as np
import pytest

from quantum_decision import default_scenario
from quantum_decision.simulation import run_ensemble

# criterion id -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict = {}


def record_acceptance(key: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[key] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0][2:])):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {key}: {detail}")


@pytest.fixture
def cfg():
    return default_scenario()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def closed_loop_ensemble():
    """Default scenario, 500 x 2000 closed loop, invariants checked after every interaction."""
    import time

    start = time.perf_counter()
    res = run_ensemble(default_scenario(), policy="closed", debug=True)
    return res, time.perf_counter() - start


@pytest.fixture(scope="session")
def open_loop_ensemble():
    import time

    start = time.perf_counter()
    res = run_ensemble(default_scenario(), policy="open")
    return res, time.perf_counter() - start
