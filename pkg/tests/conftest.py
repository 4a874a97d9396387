import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.spatial.transform import Rotation

from lidarslam.geometry import RigidTransform

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# seed shared by every synthetic end-to-end fixture
FIXTURE_SEED = 7


def random_transform(rng: np.random.Generator, max_angle: float = np.pi * 0.9, max_shift: float = 10.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return RigidTransform(Rotation.from_rotvec(axis * angle).as_matrix(), rng.uniform(-max_shift, max_shift, 3))


def structured_cloud(rng: np.random.Generator, n: int = 1000) -> np.ndarray:
    """Points on the floor, two walls and a few boxes of a 20 m room: well constrained in all 6 dof."""
    parts = []
    k = n // 5
    parts.append(np.column_stack([rng.uniform(-10, 10, k), rng.uniform(-10, 10, k), np.zeros(k)]))
    parts.append(np.column_stack([np.full(k, 10.0), rng.uniform(-10, 10, k), rng.uniform(0, 4, k)]))
    parts.append(np.column_stack([rng.uniform(-10, 10, k), np.full(k, -10.0), rng.uniform(0, 4, k)]))
    rest = n - 3 * k
    centers = np.array([[-4.0, 3.0, 1.0], [3.0, 5.0, 1.5], [-2.0, -5.0, 0.7]])
    faces = rng.integers(0, 3, rest)
    u = rng.uniform(-1, 1, (rest, 3))
    side = rng.integers(0, 3, rest)
    u[np.arange(rest), side] = np.sign(u[np.arange(rest), side])
    parts.append(centers[faces] + u * np.array([1.0, 0.8, 0.7]))
    return np.vstack(parts)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance verdicts -------------------------------------------------------------------------

_VERDICTS: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    detail = getattr(item, "acceptance_detail", "")
    _VERDICTS[number] = ("PASS" if report.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        verdict, title, detail = _VERDICTS[number]
        terminalreporter.write_line(f"criterion {number}: {verdict}  {title}" + (f"  [{detail}]" if detail else ""))


@pytest.fixture
def detail(request):
    """Append a short measurement summary to the criterion's PASS/FAIL line."""
    def record(text: str) -> None:
        request.node.acceptance_detail = text
        print(text)
    return record
