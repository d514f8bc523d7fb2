import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import correspondences_bruteforce, pinhole, random_rigid
from xmpt.geometry import (
    CameraModel,
    GeometryError,
    PointCloud,
    backproject,
    build_correspondences,
    project,
    rigid_inverse,
    rotation_z,
    transform_points,
)


def cam128(pose=None, f=100.0):
    return CameraModel(f, f, 64.0, 64.0, 128, 128, np.eye(4) if pose is None else pose)


def test_project_optical_axis():
    assert project([0, 0, 2], cam128()) == (64.0, 64.0, 2.0)


def test_project_reference_point():
    u, v, z = project([0.5, -0.25, 2.0], cam128())
    # oracle: 100*0.5/2+64, 100*-0.25/2+64
    assert (u, v, z) == pytest.approx((89.0, 51.5, 2.0), abs=1e-12)


def test_project_behind_camera():
    assert project([0, 0, -1], cam128()) is None
    assert project([1, 1, 0], cam128()) is None


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.1, 10), st.floats(0.01, 100))
def test_projection_ray_invariance(x, y, z, lam):
    a = project([x, y, z], cam128())
    b = project([lam * x, lam * y, lam * z], cam128())
    assert a[:2] == pytest.approx(b[:2], rel=1e-9, abs=1e-9)


def test_project_matches_scalar_oracle(rng):
    pose = random_rigid(rng)
    cam = cam128(pose)
    for p in rng.normal(size=(50, 3)) * 3:
        ref = pinhole(p, cam.fx, cam.fy, cam.cx, cam.cy, pose.tolist())
        got = project(p, cam)
        if ref is None:
            assert got is None
        else:
            assert got == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_camera_validation():
    with pytest.raises(GeometryError):
        CameraModel(-1, 1, 0, 0, 4, 4)
    with pytest.raises(GeometryError):
        CameraModel(1, 1, 4, 0, 4, 4)
    bad = np.eye(4)
    bad[0, 0] = 1.1
    with pytest.raises(GeometryError):
        CameraModel(1, 1, 0, 0, 4, 4, bad)
    mirror = np.diag([-1.0, 1, 1, 1])
    with pytest.raises(GeometryError):
        CameraModel(1, 1, 0, 0, 4, 4, mirror)


def test_transform_identity():
    c = PointCloud(np.arange(9.0).reshape(3, 3), np.full((3, 3), 0.5), [0, 1, 2])
    out = transform_points(c, np.eye(4))
    assert np.array_equal(out.points, c.points)
    assert np.array_equal(out.colors, c.colors) and np.array_equal(out.labels, c.labels)


def test_transform_yaw_pi():
    out = transform_points(np.array([[1.0, 0, 0]]), rotation_z(np.pi))
    np.testing.assert_allclose(out, [[-1, 0, 0]], atol=1e-12)


def test_transform_rejects_non_rigid():
    with pytest.raises(GeometryError):
        transform_points(np.zeros((1, 3)), np.diag([2.0, 1, 1, 1]))


@given(st.integers(0, 2**32 - 1))
def test_transform_inverse_round_trip(seed):
    r = np.random.default_rng(seed)
    t = random_rigid(r)
    pts = r.normal(size=(20, 3)) * 5
    back = transform_points(transform_points(pts, t), rigid_inverse(t))
    np.testing.assert_allclose(back, pts, atol=1e-9)


def test_backproject_inverts_project(rng):
    cam = cam128(random_rigid(rng))
    u, v, z = rng.uniform(0, 128, 30), rng.uniform(0, 128, 30), rng.uniform(0.5, 5, 30)
    pts = backproject(u, v, z, cam)
    for p, uu, vv, zz in zip(pts, u, v, z):
        assert project(p, cam) == pytest.approx((uu, vv, zz), abs=1e-9)


def test_zbuffer_keeps_nearest():
    pts = np.array([[0.0, 0, 2.0], [0.0, 0, 1.0]])
    corr = build_correspondences(pts, cam128())
    assert corr.pairs() == {(1, 64, 64)}


def test_depth_map_exact_agreement_one_pair():
    depth = np.full((128, 128), 2.0)
    corr = build_correspondences(np.array([[0.0, 0, 2.0]]), cam128(), depth, tol=0.05)
    assert corr.pairs() == {(0, 64, 64)}


def test_depth_map_rejects_occluded():
    depth = np.full((128, 128), 1.0)
    corr = build_correspondences(np.array([[0.0, 0, 2.0]]), cam128(), depth)
    assert len(corr) == 0


def test_empty_cloud_and_bad_depth_shape():
    with pytest.raises(GeometryError):
        build_correspondences(np.zeros((0, 3)), cam128())
    with pytest.raises(GeometryError):
        build_correspondences(np.zeros((1, 3)), cam128(), np.ones((3, 3)))


def _room_instance(r, n):
    # points scattered on the inside of a 6 m box, camera somewhere inside looking around
    pts = r.uniform(-3, 3, size=(n, 3))
    face = r.integers(0, 3, n)
    pts[np.arange(n), face] = r.choice([-3.0, 3.0], n)
    half = n // 3
    pts[:half] = r.uniform(-2, 2, size=(half, 3))  # clutter in front of the walls
    pose = random_rigid(r)
    pose[:3, 3] = r.uniform(-0.5, 0.5, 3)
    w, h = int(r.choice([32, 48, 64])), int(r.choice([32, 48, 64]))
    f = float(r.uniform(20, 60))
    return pts, CameraModel(f, f, w / 2, h / 2, w, h, pose)


def test_correspondences_match_bruteforce_2000(rng):
    pts, cam = _room_instance(rng, 2000)
    assert build_correspondences(pts, cam).pairs() == correspondences_bruteforce(pts, cam)


def test_correspondences_with_depth_match_bruteforce(rng):
    pts, cam = _room_instance(rng, 1500)
    depth = rng.uniform(0.5, 4.0, size=(cam.height, cam.width))
    got = build_correspondences(pts, cam, depth, tol=0.3).pairs()
    assert got == correspondences_bruteforce(pts, cam, depth, tol=0.3)


@given(st.integers(0, 2**32 - 1))
def test_correspondences_in_bounds_and_unique(seed):
    r = np.random.default_rng(seed)
    pts, cam = _room_instance(r, 500)
    corr = build_correspondences(pts, cam)
    u, v = corr.pixels[:, 0], corr.pixels[:, 1]
    assert ((u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)).all()
    assert len(set(corr.point_index.tolist())) == len(corr)
    assert len(set(zip(u.tolist(), v.tolist()))) == len(corr)
    for i in corr.point_index:
        assert project(pts[i], cam) is not None
