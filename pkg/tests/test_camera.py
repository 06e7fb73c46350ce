import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unigen3d.camera import (BehindCameraError, CameraParams, look_at, orbit_cameras, project,
                             quaternion_to_rotation, read_cameras, rotation_to_quaternion,
                             unproject, write_cameras)


def random_rotation(g):
    q, r = np.linalg.qr(g.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_camera(g):
    return CameraParams(g.uniform(20, 200), g.uniform(20, 200), g.uniform(0, 64),
                        g.uniform(0, 64), 64, 48, random_rotation(g), g.standard_normal(3))


def test_project_examples():
    cam = CameraParams(1, 1, 0, 0, 1, 1)
    px, d = project([0, 0, 1], cam)
    assert np.allclose(px, 0) and d == 1
    cam = CameraParams(100, 100, 32, 32, 64, 64)
    px, _ = project([0.32, 0, 1], cam)
    assert px[0] == pytest.approx(64.0, abs=1e-12)
    with pytest.raises(BehindCameraError):
        project([0, 0, 0], cam)
    with pytest.raises(BehindCameraError):
        project([0, 0, -1], cam)


def test_unproject_examples():
    cam = CameraParams(1, 1, 0, 0, 1, 1)
    assert np.allclose(unproject((0, 0), 2.0, cam), [0, 0, 2])
    with pytest.raises(ValueError):
        unproject((0, 0), 0.0, cam)


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraParams(0, 1, 0, 0, 1, 1)
    with pytest.raises(ValueError):
        CameraParams(1, 1, 0, 0, 0, 1)
    with pytest.raises(ValueError):
        CameraParams(1, 1, 0, 0, 1, 1, np.diag([1.0, 1.0, -1.0]))


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_roundtrip(seed):
    g = np.random.default_rng(seed)
    cam = random_camera(g)
    for _ in range(100 // 50 + 1):
        px = g.uniform(0, 64, 2)
        d = g.uniform(0.1, 20)
        back, depth = project(unproject(px, d, cam), cam)
        assert np.abs(back - px).max() < 1e-9
        assert abs(depth - d) < 1e-9


def test_roundtrip_100_points(gen):
    cam = random_camera(gen)
    err = 0.0
    for _ in range(100):
        px, d = gen.uniform(0, 64, 2), gen.uniform(0.1, 20)
        back, depth = project(unproject(px, d, cam), cam)
        err = max(err, np.abs(back - px).max(), abs(depth - d))
    assert err < 1e-9


def test_unproject_matches_matrix_pipeline(gen):
    cam = random_camera(gen)
    k = np.array([[cam.fx, 0, cam.cx], [0, cam.fy, cam.cy], [0, 0, 1]])
    c2w = np.eye(4)
    c2w[:3, :3], c2w[:3, 3] = cam.rotation, cam.translation
    for _ in range(20):
        px, d = gen.uniform(0, 64, 2), gen.uniform(0.5, 10)
        p_cam = d * np.linalg.solve(k, [px[0], px[1], 1.0])
        ref = (c2w @ np.append(p_cam, 1.0))[:3]
        assert np.abs(unproject(px, d, cam) - ref).max() < 1e-10


def test_look_at_canonical():
    rot, t = look_at((0, 0, -1), (0, 0, 0), (0, -1, 0))
    assert np.allclose(rot, np.eye(3), atol=1e-15)
    assert np.allclose(t, [0, 0, -1])


def test_look_at_degenerate():
    with pytest.raises(ValueError):
        look_at((0, 0, 0), (0, 0, 0), (0, 1, 0))
    with pytest.raises(ValueError):
        look_at((0, 0, -1), (0, 0, 0), (0, 0, 1))


@given(st.lists(st.floats(-5, 5), min_size=9, max_size=9))
def test_look_at_is_rotation(v):
    eye, target, up = np.array(v[:3]), np.array(v[3:6]), np.array(v[6:])
    fwd = target - eye
    if np.linalg.norm(fwd) < 1e-3 or np.linalg.norm(up) < 1e-3 or np.linalg.norm(np.cross(fwd, up)) < 1e-3 * np.linalg.norm(fwd):
        return
    rot, _ = look_at(eye, target, up)
    assert abs(np.linalg.det(rot) - 1) < 1e-12
    assert np.abs(rot.T @ rot - np.eye(3)).max() < 1e-12
    assert np.allclose(rot[:, 2], fwd / np.linalg.norm(fwd), atol=1e-12)


def test_orbit():
    cams = orbit_cameras(8, 3.0, 64, 64)
    for c in cams:
        assert np.linalg.norm(c.center) == pytest.approx(3.0, abs=1e-12)
        assert np.allclose(c.rotation[:, 2], -c.center / 3.0, atol=1e-12)
        # origin projects to the principal point
        px, d = project(np.zeros(3), c)
        assert np.allclose(px, [32, 32]) and d == pytest.approx(3.0)


def test_pose_composition_stays_valid(gen):
    a, b = random_rotation(gen), random_rotation(gen)
    r = a @ b
    assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9
    CameraParams(1, 1, 0, 0, 1, 1, r)


def test_quaternion_roundtrip(gen):
    for _ in range(50):
        r = random_rotation(gen)
        q = rotation_to_quaternion(r)
        assert q[0] >= 0
        assert np.abs(quaternion_to_rotation(q) - r).max() < 1e-12


def test_camera_file_roundtrip(tmp_path, gen):
    cams = [random_camera(gen) for _ in range(3)]
    write_cameras(tmp_path / "c.txt", cams)
    back = read_cameras(tmp_path / "c.txt")
    for a, b in zip(cams, back):
        assert np.array_equal(a.rotation, b.rotation) and a.fx == b.fx
    assert cams[0].encoding().shape == (16,)
