import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings, strategies as st

from weatherda.core import Box3D, Detection

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
extent = st.floats(0.2, 5.0, allow_nan=False)
angle = st.floats(-math.pi, math.pi, allow_nan=False, exclude_max=True)


@st.composite
def boxes(draw, spread=4.0):
    c = st.floats(-spread, spread, allow_nan=False)
    return Box3D(draw(c), draw(c), draw(st.floats(-1, 1)), draw(extent), draw(extent),
                 draw(extent), draw(angle))


def random_box(rng, spread=3.0) -> Box3D:
    return Box3D(*rng.uniform(-spread, spread, 2), rng.uniform(-0.5, 0.5),
                 *rng.uniform(0.3, 3.0, 3), rng.uniform(-math.pi, math.pi))


def one_hot_detection(box: Box3D, category: int, num_classes: int = 3, conf: float = 1.0) -> Detection:
    p = np.full(num_classes, (1.0 - conf) / max(1, num_classes - 1))
    p[category] = conf
    return Detection(box, tuple(p / p.sum()))


@pytest.fixture
def rng():
    return np.random.default_rng(42)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
