import numpy as np
import pytest

from patchba.ba import solver as _solver
from patchba.geometry import CameraModel, Pose, nadir_rotation
from patchba.terrain import DsmRaster


@pytest.fixture
def cam1000():
    # f = 1000 px, principal point (500, 500)
    return CameraModel.from_focal_px(1000.0, 1000, 1000)


@pytest.fixture
def cam8000():
    return CameraModel.from_focal_px(8000.0, 8000, 6000)


def flat_dsm(z=0.0, half=2000.0, cell=10.0):
    return DsmRaster.from_function(lambda x, y: np.full(np.shape(x), z), -half, half, -half, half, cell)


@pytest.fixture
def flat():
    return flat_dsm()


def nadir(x=0.0, y=0.0, h=300.0, heading=0.0):
    return Pose(nadir_rotation(heading), np.array([x, y, h]))


# Every LM run in the session has its accepted-step costs audited here.
LM_AUDIT = {"solves": 0, "steps": 0, "violations": []}


def _audit(result):
    h = np.asarray(result.cost_history, dtype=float)
    LM_AUDIT["solves"] += 1
    LM_AUDIT["steps"] += max(len(h) - 1, 0)
    bad = np.nonzero(np.diff(h) > 0)[0]
    if len(bad):
        LM_AUDIT["violations"].append((result.termination, h[bad], h[bad + 1]))


class _AuditedResult(_solver.BAResult):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        _audit(self)


_solver.BAResult = _AuditedResult


@pytest.fixture(autouse=True)
def _no_cost_increase():
    before = len(LM_AUDIT["violations"])
    yield
    assert len(LM_AUDIT["violations"]) == before, LM_AUDIT["violations"][before:]


# criterion number -> (passed, detail), filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}: {detail}")
