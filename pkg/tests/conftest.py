from functools import lru_cache

import pytest

from qecw.dem import dem_from_circuit
from qecw.layout import build_layout, build_memory_z_circuit
from qecw.pauli_sim import NoiseModel, attach_noise


@lru_cache(maxsize=None)
def noisy(d: int, r: int, kind: str = "SD", p: float = 0.005):
    return attach_noise(build_memory_z_circuit(build_layout(d), r), NoiseModel(kind, p))


@lru_cache(maxsize=None)
def dem_for(d: int, r: int, kind: str = "SD", p: float = 0.005):
    return dem_from_circuit(noisy(d, r, kind, p))


@pytest.fixture
def nc3():
    return noisy(3, 3)


# criterion lines collected by test_acceptance.py, echoed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {k}: {detail}")
