import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demoedit.geometry import (
    CameraIntrinsics,
    DepthMap,
    RigidTransform,
    compose,
    interpolate,
    invert,
    project_point,
    unproject_pixel,
)

K640 = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def homogeneous(rot_z_deg=0.0, t=(0.0, 0.0, 0.0)):
    c, s = math.cos(math.radians(rot_z_deg)), math.sin(math.radians(rot_z_deg))
    return np.array([[c, -s, 0, t[0]], [s, c, 0, t[1]], [0, 0, 1, t[2]], [0, 0, 0, 1.0]])


def close_transform(a, b, tol=1e-9):
    qa, qb = a.rotation, b.rotation
    q_ok = min(np.abs(qa - qb).max(), np.abs(qa + qb).max()) < tol
    return q_ok and np.abs(a.translation - b.translation).max() < tol


unit = st.floats(-1.0, 1.0, allow_nan=False)


@st.composite
def transforms(draw):
    q = np.array([draw(unit) for _ in range(4)])
    if np.linalg.norm(q) < 1e-3:
        q = np.array([1.0, 0, 0, 0])
    t = [draw(st.floats(-5, 5, allow_nan=False)) for _ in range(3)]
    return RigidTransform(q, t)


def test_quaternion_normalized_on_construction():
    t = RigidTransform([2.0, 0, 0, 0], [0, 0, 0])
    assert abs(np.linalg.norm(t.rotation) - 1.0) < 1e-12


def test_compose_identity():
    x = RigidTransform.from_axis_angle((0, 1, 0), 0.3, (1, 2, 3))
    assert compose(RigidTransform(), x) == x


def test_compose_translations():
    r = compose(RigidTransform.from_translation(1, 0, 0), RigidTransform.from_translation(0, 2, 0))
    np.testing.assert_allclose(r.translation, [1, 2, 0])
    assert r.is_identity() is False


def test_compose_rotation_then_translation_matches_matrix_product():
    r = compose(RigidTransform.rot_z(math.pi / 2), RigidTransform.from_translation(1, 0, 0))
    oracle = homogeneous(90.0) @ homogeneous(0.0, (1, 0, 0)) @ np.array([0, 0, 0, 1.0])
    np.testing.assert_allclose(r.apply([0.0, 0.0, 0.0]), oracle[:3], atol=1e-12)
    np.testing.assert_allclose(oracle[:3], [0, 1, 0], atol=1e-12)


def test_invert_examples():
    assert invert(RigidTransform()).is_identity()
    np.testing.assert_allclose(invert(RigidTransform.from_translation(1, 2, 3)).translation, [-1, -2, -3])


def test_invert_random(rng):
    for _ in range(100):
        q = rng.normal(size=4)
        t = RigidTransform(q, rng.normal(size=3))
        assert close_transform(compose(t, invert(t)), RigidTransform(), 1e-9)


@settings(max_examples=60, deadline=None)
@given(transforms(), transforms(), transforms())
def test_compose_associative(a, b, c):
    assert close_transform(compose(compose(a, b), c), compose(a, compose(b, c)), 1e-9)


@settings(max_examples=60, deadline=None)
@given(transforms(), st.lists(st.floats(-3, 3, allow_nan=False), min_size=3, max_size=3))
def test_compose_applies_in_order(a, p):
    b = RigidTransform.from_axis_angle((1, 1, 0), 0.7, (0.1, -0.2, 0.3))
    np.testing.assert_allclose(compose(a, b).apply(p), a.apply(b.apply(p)), atol=1e-9)


def test_interpolate_endpoints_exact():
    a = RigidTransform.from_axis_angle((0, 0, 1), 0.4, (1, 2, 3))
    b = RigidTransform.from_axis_angle((1, 0, 0), -1.2, (-1, 0, 0.5))
    assert interpolate(a, b, 0.0) == a
    assert interpolate(a, b, 1.0) == b


def test_interpolate_geodesic_midpoint():
    mid = interpolate(RigidTransform(), RigidTransform.rot_z(math.pi / 2), 0.5)
    assert close_transform(mid, RigidTransform.rot_z(math.pi / 4), 1e-12)


def test_interpolate_rejects_out_of_range():
    with pytest.raises(ValueError):
        interpolate(RigidTransform(), RigidTransform(), 1.5)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, math.pi - 0.01), st.floats(0.0, 1.0))
def test_interpolated_angle_is_linear(theta, s):
    r = interpolate(RigidTransform(), RigidTransform.rot_z(theta), s)
    # axis-angle oracle: the rotation stays about +z with angle s*theta
    m = r.rotation_matrix()
    angle = math.atan2(m[1, 0], m[0, 0])
    assert abs(angle - s * theta) < 1e-9
    assert abs(r.angle() - s * theta) < 1e-9


def test_interpolate_takes_shortest_arc():
    a = RigidTransform()
    b = RigidTransform(-RigidTransform.rot_z(0.2).rotation)
    assert abs(interpolate(a, b, 0.5).angle() - 0.1) < 1e-12


def test_interpolate_translation_linear():
    a = RigidTransform.from_translation(0, 0, 0)
    b = RigidTransform.from_translation(1, -2, 4)
    np.testing.assert_allclose(interpolate(a, b, 0.25).translation, [0.25, -0.5, 1.0])


def test_project_point_examples():
    assert project_point((0, 0, 1), K640) == (320.0, 240.0, 1.0)
    u, v, z = project_point((0.1, 0, 1), K640)
    assert (u, v, z) == pytest.approx((370.0, 240.0, 1.0), abs=1e-12)
    assert project_point((0, 0, -1), K640) is None
    assert project_point((0, 0, 0.005), K640) is None


def test_unproject_examples():
    np.testing.assert_allclose(unproject_pixel(320, 240, 2.0, K640), [0, 0, 2])
    np.testing.assert_allclose(unproject_pixel(370, 240, 1.0, K640), [0.1, 0, 1], atol=1e-12)
    with pytest.raises(ValueError):
        unproject_pixel(10, 10, 0.0, K640)


def test_round_trip_random_pixels(rng):
    uv = rng.uniform([0, 0], [640, 480], size=(1000, 2))
    d = rng.uniform(0.05, 9.0, size=1000)
    for (u, v), z in zip(uv, d):
        pu, pv, pz = project_point(unproject_pixel(u, v, z, K640), K640)
        assert max(abs(pu - u), abs(pv - v), abs(pz - z)) < 1e-6


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(-1.0, 500.0, 320.0, 240.0, 640, 480)
    with pytest.raises(ValueError):
        CameraIntrinsics(500.0, 500.0, 640.0, 240.0, 640, 480)


def test_depth_map_invalid_sentinel():
    d = DepthMap(np.array([[1.0, -1.0], [np.nan, 20.0]]), far=10.0)
    assert d.valid.tolist() == [[True, False], [False, False]]
    # the sentinel never compares as a real depth
    assert not (d.values[0, 1] < 5.0) and not (d.values[0, 1] > 0.0)


def test_look_at_points_optical_axis_at_target():
    cam = RigidTransform.look_at((1.0, 0.0, 0.8), (0.35, 0.0, 0.05))
    p = invert(cam).apply([0.35, 0.0, 0.05])
    assert abs(p[0]) < 1e-12 and abs(p[1]) < 1e-12 and p[2] > 0
