import numpy as np
import pytest

from conicwigner.potential import cone, free, harmonic
from conicwigner.quantum import Grid, InitialStateSpec, make_initial_state

SQ3 = np.sqrt(3.0)
T_CROSS = SQ3 - 1.0


@pytest.fixture
def abs_x():
    return cone(1, box=[[-4.0, 4.0]])


@pytest.fixture
def abs_x1_2d():
    return cone(2, 1, box=[[-4.0, 4.0]] * 2)


@pytest.fixture
def abs_x_2d():
    return cone(2, 2, box=[[-4.0, 4.0]] * 2)


@pytest.fixture
def free1():
    return free(box=[[-4.0, 4.0]])


@pytest.fixture
def harmonic1():
    return harmonic(box=[[-4.0, 4.0]])


def coherent(q, p, eps, box=(-4.0, 4.0), n=512):
    grid = Grid(((box[0], box[1], n),), eps)
    return make_initial_state(InitialStateSpec.coherent(q, p), grid)


ACCEPTANCE = {}


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion."""
    def _record(number, ok, detail):
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
