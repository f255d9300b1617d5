import os
import warnings

import numpy as np
import pytest

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
warnings.filterwarnings("ignore", module="numba")

from posegauss.geometry import Camera, Intrinsics, RigidPose  # noqa: E402


_CRITERIA = {}


@pytest.fixture
def criterion():
    """record(number, ok, detail): one PASS/FAIL line per acceptance criterion."""
    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def square_camera(size=32, focal=None, pose=None):
    f = focal if focal is not None else 1.25 * size
    c = (size - 1) / 2.0
    return Camera(Intrinsics(f, f, c, c, size, size), pose or RigidPose.identity())


def orbit_camera(azimuth_deg, size=32, radius=3.0, target=(0.0, 0.0, 0.0)):
    a = np.deg2rad(azimuth_deg)
    t = np.asarray(target, dtype=np.float64)
    eye = t + np.array([radius * np.sin(a), 0.1, -radius * np.cos(a)])
    return Camera.look_at(eye, t, square_camera(size).intrinsics)
