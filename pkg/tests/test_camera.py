import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from multishot.camera import Z_MIN, Camera, project, project_with_jacobian


def test_optical_axis_hits_principal_point():
    uv, vis = project(np.array([0.0, 0.0, 5.0]), Camera())
    assert np.array_equal(uv, [256.0, 256.0])
    assert vis


def test_lateral_offset():
    uv, _ = project(np.array([1.0, 0.0, 5.0]), Camera(focal=500.0))
    assert np.allclose(uv, [356.0, 256.0])


def test_behind_camera_invisible():
    uv, vis = project(np.array([0.0, 0.0, -1.0]), Camera())
    assert not vis
    assert np.all(np.isfinite(uv))


def test_out_of_bounds_invisible():
    _, vis = project(np.array([[3.0, 0.0, 5.0], [0.0, -3.0, 5.0], [0.0, 0.0, Z_MIN]]), Camera())
    assert not vis.any()


@given(
    arrays(np.float64, 3, elements=st.floats(-2.0, 2.0)).map(lambda x: x + [0, 0, 3.0]),
    st.floats(0.2, 20.0),
)
def test_projection_scale_invariant_along_rays(X, lam):
    a, _ = project(X, Camera())
    b, _ = project(lam * X, Camera())
    assert np.allclose(a, b, rtol=0, atol=1e-9)


def test_projection_jacobian_matches_finite_differences():
    rng = np.random.default_rng(0)
    X = rng.normal(0, 1, (50, 3)) + [0, 0, 3.0]
    X[:, 2] = np.maximum(X[:, 2], 0.6)
    uv, Jp = project_with_jacobian(X, 500.0, 256.0, 256.0)
    assert np.allclose(uv, project(X, Camera())[0])
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1e-6
        fd = (project(X + e, Camera())[0] - project(X - e, Camera())[0]) / 2e-6
        assert np.abs(Jp[..., k] - fd).max() / np.abs(fd).max(initial=1.0) < 1e-5


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(focal=0.0)
    with pytest.raises(ValueError):
        Camera(width=0)


def test_camera_dict_round_trip():
    cam = Camera(480.0, 250.0, 260.0, 500, 520, shot_id=3)
    assert Camera.from_dict(cam.to_dict(), shot_id=3) == cam
