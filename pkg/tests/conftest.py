import numpy as np
import pytest

from multishot.body_model import default_body_model
from multishot.scene_sim import two_shot_scene


@pytest.fixture(scope="session")
def model():
    return default_body_model()


@pytest.fixture(scope="session")
def scene(model):
    """Short two-shot scene, second shot a close-up, no missing frames."""
    return two_shot_scene(model, seed=3, frames_per_shot=4)


def central_difference(f, x, h=1e-6):
    """Central finite-difference gradient of a scalar function."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        step = h * max(1.0, abs(x.flat[i]))
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        g.flat[i] = (f(xp) - f(xm)) / (2 * step)
    return g


def relative_error(analytic, numeric):
    """Largest deviation relative to the largest gradient entry."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


ACCEPTANCE = []


def record(criterion: int, ok: bool, detail: str) -> bool:
    """Note one acceptance verdict; all of them are repeated at the end of the run."""
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
