import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demoedit.control import (
    ChunkError,
    action_map,
    canny_from_depth,
    export_condition_stack,
    load_chunk_depth,
    normalize_depth_chunk,
    read_f32,
    read_png16,
    ray_map,
    rotation_from_6d,
    write_f32,
)
from demoedit.dataset import DemoRecording, ViewStream
from demoedit.geometry import DEFAULT_FAR, CameraIntrinsics, DepthMap, RigidTransform, matrix_to_quat
from demoedit.kinematics import EndEffectorAction

K = CameraIntrinsics(20.0, 20.0, 7.5, 5.5, 16, 12)


def test_normalize_affine():
    d = np.array([[0.5, 1.5], [2.5, np.nan]])
    normed, valid, norm = normalize_depth_chunk([[d]])
    n = normed[0][0]
    assert (n[0, 0], n[0, 1], n[1, 0]) == (0.0, 0.5, 1.0)
    assert n[1, 1] == 0.0 and not valid[0][0][1, 1]
    assert (norm.d_min, norm.d_max) == (0.5, 2.5)


def test_normalize_disjoint_views_share_range():
    a = np.array([[0.5, 1.0]])
    b = np.array([[2.0, 2.5]])
    normed, _, _ = normalize_depth_chunk([[a], [b]])
    assert normed[0][0].max() == 0.25
    assert normed[1][0].max() == 1.0


def test_normalize_errors_and_constant():
    with pytest.raises(ChunkError):
        normalize_depth_chunk([[np.full((2, 2), np.nan)]])
    with pytest.raises(ChunkError):
        normalize_depth_chunk([])
    normed, _, norm = normalize_depth_chunk([[np.full((2, 2), 1.2)]])
    assert norm.constant and np.all(normed[0][0] == 0.5)
    assert np.all(norm.invert(normed[0][0]) == 1.2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_normalize_preserves_cross_view_order(seed):
    rng = np.random.default_rng(seed)
    views = [[rng.uniform(0.2, 3.0, (4, 5)) for _ in range(3)] for _ in range(2)]
    normed, _, _ = normalize_depth_chunk(views)
    raw = np.concatenate([m.ravel() for v in views for m in v])
    nv = np.concatenate([m.ravel() for v in normed for m in v])
    i, j = np.argsort(raw)[:-1], np.argsort(raw)[1:]
    strict = raw[i] < raw[j]
    assert np.all(nv[i][strict] < nv[j][strict])
    assert nv.min() == 0.0 and nv.max() == 1.0


def test_canny_constant_map():
    assert not canny_from_depth(np.full((40, 50), 0.6)).any()


def test_canny_vertical_step():
    img = np.full((40, 50), 0.3)
    img[:, 25:] = 0.7
    e = canny_from_depth(img)
    cols = np.unique(np.nonzero(e)[1])
    assert len(cols) == 1 and abs(cols[0] - 25) <= 1
    # every row of the interior carries the edge
    assert e[:, cols[0]].sum() == 40


def test_canny_binary_and_thresholds(rng):
    e = canny_from_depth(rng.uniform(0, 1, (30, 30)))
    assert e.dtype == np.uint8 and set(np.unique(e)) <= {0, 1}
    with pytest.raises(ValueError):
        canny_from_depth(np.zeros((4, 4)), 0.3, 0.2)


def test_canny_invariant_under_chunk_rescale(rng):
    raw = np.full((48, 64), 1.5)
    raw[10:30, 20:45] = 1.1
    raw[35:, :] += np.linspace(0, 0.3, 64)
    a = normalize_depth_chunk([[raw]])[0][0][0]
    b = normalize_depth_chunk([[2.0 * raw]])[0][0][0]
    assert np.array_equal(canny_from_depth(a), canny_from_depth(b))


def test_ray_map_identity():
    k = CameraIntrinsics(20.0, 20.0, 8.0, 5.0, 16, 12)
    r = ray_map(RigidTransform(), k)
    assert r.shape == (6, 12, 16)
    np.testing.assert_allclose(r[3:, 5, 8], [0, 0, 1], atol=1e-15)
    assert np.all(r[:3] == 0)
    assert np.abs(np.linalg.norm(r[3:], axis=0) - 1).max() < 1e-9


def test_ray_map_translation():
    base = ray_map(RigidTransform(), K)
    r = ray_map(RigidTransform.from_translation(1.0, 0, 0), K)
    assert np.all(r[0] == 1.0) and np.all(r[1:3] == 0)
    np.testing.assert_array_equal(r[3:], base[3:])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ray_map_covariance(seed):
    rng = np.random.default_rng(seed)
    cam = RigidTransform(rng.normal(size=4), rng.normal(size=3))
    g = RigidTransform(rng.normal(size=4), rng.normal(size=3))
    a = ray_map(cam, K)
    b = ray_map(g @ cam, K)
    R = g.rotation_matrix()
    dirs = np.einsum("ij,jhw->ihw", R, a[3:])
    np.testing.assert_allclose(b[3:], dirs, atol=1e-12)
    np.testing.assert_allclose(b[:3, 0, 0], g.apply(cam.translation), atol=1e-12)


def test_action_map_identity():
    m = action_map(EndEffectorAction(RigidTransform(), 0.0), 4, 3)
    assert m.shape == (10, 3, 4)
    np.testing.assert_array_equal(m[:, 1, 2], [0, 0, 0, 1, 0, 0, 0, 1, 0, 0])


def test_action_map_broadcast_and_arms():
    a = EndEffectorAction(RigidTransform.from_axis_angle([0, 1, 0], 0.4, (0.1, 0.2, 0.3)), 0.7)
    m = action_map({"right": a, "left": EndEffectorAction(RigidTransform(), 1.0)}, 5, 4)
    assert m.shape == (20, 4, 5)
    assert np.all(m == m[:, :1, :1])
    assert m[9, 0, 0] == 1.0 and m[19, 0, 0] == 0.7  # "left" sorts first


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_action_rotation_round_trip(seed):
    rng = np.random.default_rng(seed)
    pose = RigidTransform(rng.normal(size=4), rng.normal(size=3))
    v = action_map(EndEffectorAction(pose, 0.5), 1, 1)[:, 0, 0]
    np.testing.assert_allclose(v[:3], pose.translation, atol=1e-15)
    q = matrix_to_quat(rotation_from_6d(v[3:9]))
    if q @ pose.rotation < 0:
        q = -q
    np.testing.assert_allclose(q, pose.rotation, atol=1e-9)


def test_f32_round_trip(tmp_path, rng):
    x = rng.normal(size=(3, 5, 7)).astype(np.float32)
    write_f32(tmp_path / "a.f32", x)
    data = (tmp_path / "a.f32").read_bytes()
    assert data[:4] == b"DEF3" and len(data) == 16 + x.size * 4
    np.testing.assert_array_equal(read_f32(tmp_path / "a.f32"), x)
    (tmp_path / "b.f32").write_bytes(data[:-4])
    with pytest.raises(ValueError):
        read_f32(tmp_path / "b.f32")


def _stub_demo(model, frames, views=2):
    rng = np.random.default_rng(frames)
    vs = []
    for i in range(views):
        depths = [DepthMap(np.where(rng.uniform(size=(12, 16)) < 0.1, np.nan, rng.uniform(0.3, 2.0, (12, 16)))) for _ in range(frames)]
        vs.append(ViewStream(f"v{i}", K, "head", depths, [RigidTransform.from_translation(0.1 * i)] * frames, [np.zeros((12, 16), np.uint8)] * frames))
    acts = {"right": [EndEffectorAction(RigidTransform.from_translation(0.01 * t), 1.0) for t in range(frames)]}
    return DemoRecording("stub", vs, np.zeros((frames, model.dof)), acts, model)


def test_export_layout(tmp_path, small_demo):
    demo = _stub_demo(small_demo.model, 50)
    chunks = export_condition_stack(demo, tmp_path, 25)
    assert [c.name for c in chunks] == ["chunk_0", "chunk_1"]
    for ci, c in enumerate(chunks):
        meta = json.loads((c / "chunk_meta.json").read_text())
        assert (meta["frame_start"], meta["frame_end"]) == (25 * ci, 25 * ci + 25)
        for v in ("v0", "v1"):
            names = sorted(p.name for p in (c / v).iterdir())
            for kind in ("depth_norm", "edge", "ray", "action"):
                assert sum(n.startswith(kind + "_") for n in names) == 25
            assert f"depth_norm_{25 * ci:04d}.png16" in names


def test_export_round_trip(tmp_path, small_demo):
    demo = _stub_demo(small_demo.model, 10)
    (chunk,) = export_condition_stack(demo, tmp_path, 25)
    for v in demo.views:
        for t in (0, 9):
            back = load_chunk_depth(chunk, v.view_id, t)
            src = v.depths[t].values
            assert np.array_equal(np.isfinite(back), np.isfinite(src))
            ok = np.isfinite(src)
            assert np.abs(back[ok] - src[ok]).max() <= DEFAULT_FAR / 65535
    ray = read_f32(chunk / "v1" / "ray_0003.f32")
    assert ray.shape == (6, 12, 16) and np.allclose(ray[0], 0.1)
    act = read_f32(chunk / "v0" / "action_0003.f32")
    assert act.shape == (10, 12, 16) and math.isclose(act[0, 0, 0], 0.03, rel_tol=1e-6)
    edge = read_png16(chunk / "v0" / "edge_0000.png8")
    assert set(np.unique(edge)) <= {0.0, 255 / 65535}


def test_export_empty(tmp_path, small_demo):
    demo = _stub_demo(small_demo.model, 0)
    assert export_condition_stack(demo, tmp_path / "x", 25) == []
    assert not (tmp_path / "x").exists()


def test_export_oracle_demo(tmp_path, small_demo):
    chunks = export_condition_stack(small_demo, tmp_path, 10)
    assert len(chunks) == 2
    meta = json.loads((chunks[1] / "chunk_meta.json").read_text())
    assert (meta["frame_start"], meta["frame_end"]) == (10, 16)
    assert meta["d_min"] < meta["d_max"]
