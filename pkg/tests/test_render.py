import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demoedit.geometry import CameraIntrinsics, DepthMap, RigidTransform, compose
from demoedit.meshes import quad_mesh
from demoedit.oracle import synthetic_arm
from demoedit.pointcloud import LabeledPointCloud
from demoedit.render import (
    DEPTH_GRID,
    filter_depth,
    merge_depth,
    merge_labeled,
    rasterize_triangles,
    render_mesh_depth,
    render_pointcloud_depth,
    render_triangles_depth,
)

K = CameraIntrinsics(100.0, 100.0, 32.0, 24.0, 64, 48)


def plane_map(value=2.0, shape=(20, 20)):
    return np.full(shape, value)


def test_empty_cloud_all_invalid():
    d = render_pointcloud_depth(LabeledPointCloud.empty(), RigidTransform(), K)
    assert not d.valid.any()


def test_single_point_radius_zero():
    d = render_pointcloud_depth(LabeledPointCloud.from_points([[0, 0, 1.0]]), RigidTransform(), K, splat_radius=0)
    assert d.values[24, 32] == 1.0
    assert d.valid.sum() == 1


def test_splat_disc_radius_one():
    d = render_pointcloud_depth(LabeledPointCloud.from_points([[0, 0, 1.0]]), RigidTransform(), K, splat_radius=1)
    assert sorted(zip(*np.nonzero(d.valid))) == [(23, 32), (24, 31), (24, 32), (24, 33), (25, 32)]


def test_zbuffer_keeps_nearest():
    pts = [[0, 0, 2.0], [0, 0, 1.0]]
    d = render_pointcloud_depth(LabeledPointCloud.from_points(pts), RigidTransform(), K, splat_radius=0)
    assert d.values[24, 32] == 1.0


def test_zbuffer_labels_follow_winner():
    cloud = LabeledPointCloud([[0, 0, 2.0], [0, 0, 1.0]], [1, 2], [1, 1])
    _, lab = render_pointcloud_depth(cloud, RigidTransform(), K, splat_radius=0, with_labels=True)
    assert lab[24, 32] == 2


def test_surface_tolerance_prefers_centered_sample():
    # two samples of one surface 0.5% apart in depth: the one on the pixel center wins
    pts = [[0.0, 0.0, 1.0], [0.004, 0.0, 0.996]]
    cloud = LabeledPointCloud(pts, [1, 2], [1, 1])
    d, lab = render_pointcloud_depth(cloud, RigidTransform(), K, splat_radius=1, with_labels=True, depth_tolerance=0.01)
    assert d.values[24, 32] == 1.0 and lab[24, 32] == 1
    strict, _ = render_pointcloud_depth(cloud, RigidTransform(), K, splat_radius=1, with_labels=True)
    assert strict.values[24, 32] == pytest.approx(0.996, abs=DEPTH_GRID)


def test_negative_radius_rejected():
    with pytest.raises(ValueError):
        render_pointcloud_depth(LabeledPointCloud.empty(), RigidTransform(), K, splat_radius=-1)


@st.composite
def rigid(draw):
    f = st.floats(-1, 1, allow_nan=False)
    q = np.array([draw(f) for _ in range(4)])
    if np.linalg.norm(q) < 0.1:
        q = np.array([1.0, 0, 0, 0])
    return RigidTransform(q, [draw(st.floats(-3, 3, allow_nan=False)) for _ in range(3)])


@settings(max_examples=30, deadline=None)
@given(rigid(), st.integers(0, 2**31 - 1), st.sampled_from([0.0, 0.01]))
def test_camera_equivariance_bit_exact(t, seed, tol):
    rng = np.random.default_rng(seed)
    pts = rng.uniform([-0.3, -0.3, 0.5], [0.3, 0.3, 2.0], size=(400, 3))
    cloud = LabeledPointCloud(pts, rng.integers(0, 5, 400), np.ones(400))
    cam = RigidTransform.from_axis_angle((0, 1, 0), 0.05, (0.01, 0.0, -0.1))
    a = render_pointcloud_depth(cloud, cam, K, with_labels=True, depth_tolerance=tol)
    b = render_pointcloud_depth(cloud.transformed(t), compose(t, cam), K, with_labels=True, depth_tolerance=tol)
    assert a[0] == b[0]
    assert np.array_equal(a[1], b[1])


def test_mesh_behind_camera_invalid():
    arm = synthetic_arm()
    cam = RigidTransform.look_at((-1.0, 0.0, 0.5), (-2.0, 0.0, 0.5))
    assert not render_mesh_depth(arm, np.zeros(arm.dof), cam, K).valid.any()


def test_quad_facing_camera():
    quad = quad_mesh([[-1, -1, 2], [1, -1, 2], [1, 1, 2], [-1, 1, 2]])
    d, _ = render_triangles_depth(quad, RigidTransform(), K)
    assert d.valid.all()
    assert np.abs(d.values - 2.0).max() < 1e-6


def test_tilted_quad_perspective_correct():
    # plane z = 2 + 0.5 x; analytic depth along each pixel ray
    xs = np.array([-1.0, 1.0])
    quad = quad_mesh([[x, y, 2 + 0.5 * x] for x, y in [(-1, -1), (1, -1), (1, 1), (-1, 1)]])
    d, _ = render_triangles_depth(quad, RigidTransform(), K)
    v, u = np.nonzero(d.valid)
    a = (u - K.cx) / K.fx
    analytic = 2.0 / (1 - 0.5 * a)
    assert np.abs(d.values[v, u] - analytic).max() < 1e-6
    assert xs.size == 2


def test_mesh_triangle_order_invariance(rng):
    arm = synthetic_arm()
    q = np.array([0.2, 0.4, 0.0, 1.2, 0.0, 1.0, 0.0])
    tris, owner = arm.posed_mesh(q)
    cam = RigidTransform.look_at((1.2, 0.3, 0.7), (0.2, 0.0, 0.3))
    k = CameraIntrinsics(120.0, 120.0, 59.5, 44.5, 120, 90)
    a, la = render_triangles_depth(tris, cam, k, owner)
    perm = rng.permutation(len(tris))
    b, lb = render_triangles_depth(tris[perm], cam, k, owner[perm])
    assert np.array_equal(a.valid, b.valid)
    assert np.nanmax(np.abs(a.values - b.values)) < 1e-9


def test_mesh_matches_dense_point_sampling(rng):
    arm = synthetic_arm()
    q = np.array([0.2, 0.4, 0.0, 1.2, 0.0, 1.0, 0.0])
    tris, _ = arm.posed_mesh(q)
    cam = RigidTransform.look_at((1.2, 0.3, 0.7), (0.2, 0.0, 0.3))
    # 2.5 mm pixels at this range, so slope within a pixel stays below the tolerance
    k = CameraIntrinsics(480.0, 480.0, 159.5, 119.5, 320, 240)
    area = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    n = 1_000_000
    pick = rng.choice(len(tris), n, p=area / area.sum())
    w = rng.dirichlet([1, 1, 1], n)
    pts = np.einsum("nk,nkd->nd", w, tris[pick])
    splat = render_pointcloud_depth(LabeledPointCloud.from_points(pts), cam, k, splat_radius=0, depth_tolerance=0.01)
    mesh = render_mesh_depth(arm, q, cam, k)
    both = splat.valid & mesh.valid
    assert both.sum() > 5000
    assert np.mean(np.abs(splat.values - mesh.values)[both] <= 0.005) >= 0.95


def test_merge_examples():
    a = DepthMap(np.array([[1.5, np.nan], [2.0, np.nan]]))
    b = DepthMap(np.array([[0.7, 3.0], [np.nan, np.nan]]))
    m = merge_depth(a, b)
    assert m.values[0, 0] == 0.7 and m.values[0, 1] == 3.0 and m.values[1, 0] == 2.0
    assert not m.valid[1, 1]
    assert merge_depth(a, DepthMap.invalid(2, 2)) == a
    with pytest.raises(ValueError):
        merge_depth(a, DepthMap.invalid(3, 2))


depth_grid = st.lists(st.one_of(st.none(), st.floats(0.1, 5.0)), min_size=12, max_size=12).map(
    lambda xs: DepthMap(np.array([np.nan if x is None else x for x in xs]).reshape(3, 4))
)


@settings(max_examples=80, deadline=None)
@given(depth_grid, depth_grid, depth_grid)
def test_merge_algebra(a, b, c):
    assert merge_depth(a, b) == merge_depth(b, a)
    assert merge_depth(merge_depth(a, b), c) == merge_depth(a, merge_depth(b, c))
    assert merge_depth(a, a) == a
    assert merge_depth(a, DepthMap.invalid(4, 3)) == a


def test_merge_labeled_takes_label_of_nearest():
    da, db = DepthMap(np.array([[1.0, 2.0]])), DepthMap(np.array([[2.0, np.nan]]))
    d, lab = merge_labeled((da, np.array([[3, 3]], np.uint8)), (db, np.array([[200, 200]], np.uint8)))
    assert lab.tolist() == [[3, 3]]
    d, lab = merge_labeled((db, np.array([[200, 200]], np.uint8)), (da, np.array([[3, 3]], np.uint8)))
    assert lab.tolist() == [[3, 3]]


def test_filter_fully_valid_unchanged(rng):
    d = DepthMap(rng.uniform(1.0, 1.02, size=(20, 20)))
    assert filter_depth(d) == d


def test_filter_fills_single_hole():
    v = plane_map()
    v[10, 10] = np.nan
    out = filter_depth(DepthMap(v))
    assert out.valid.all() and out.values[10, 10] == 2.0


def test_filter_removes_two_pixel_speckle():
    v = plane_map()
    v[5, 5:7] = 0.2
    out = filter_depth(DepthMap(v), hole_max=2, speckle_min_region=6)
    # the speckle is invalidated and not refilled; everything else is untouched
    assert not out.valid[5, 5] and not out.valid[5, 6]
    keep = np.ones_like(v, dtype=bool)
    keep[5, 5:7] = False
    assert np.array_equal(out.values[keep], v[keep])


def test_filter_keeps_large_holes_and_border_gaps():
    v = plane_map()
    v[8:12, 8:12] = np.nan  # 4 px across, larger than hole_max
    v[0, 3] = np.nan  # touches the border
    out = filter_depth(DepthMap(v), hole_max=2)
    assert not out.valid[8:12, 8:12].any() and not out.valid[0, 3]


def test_filter_keeps_large_foreground_region():
    v = plane_map()
    v[4:8, 4:8] = 1.0  # 16 px object in front of the plane
    out = filter_depth(DepthMap(v), speckle_min_region=6)
    assert out == DepthMap(v)


def test_rasterize_clips_near_plane():
    tri = np.array([[[-0.5, -0.5, -1.0], [0.5, -0.5, 2.0], [0.0, 0.5, 2.0]]])
    d, _ = rasterize_triangles(tri, K)
    assert np.all(d[np.isfinite(d)] > 0.01)
    assert np.isfinite(d).any()
