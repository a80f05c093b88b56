import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from teleimmersion.geometry import CameraIntrinsics, RgbdFrame

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def small_frame(depth, color=None, fx=500.0, cx=None, cy=None) -> RgbdFrame:
    depth = np.asarray(depth, dtype=np.uint16)
    h, w = depth.shape
    intr = CameraIntrinsics(fx, fx, (w - 1) / 2 if cx is None else cx, (h - 1) / 2 if cy is None else cy, w, h)
    if color is None:
        color = np.zeros((h, w, 3), dtype=np.uint8)
    return RgbdFrame(color, depth, intr)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
