import shutil
import os

import numpy as np
import pytest
import yaml

from demoedit.dataset import (
    ConfigError,
    DatasetError,
    DemoRecording,
    PipelineConfig,
    decode_png,
    depth_to_mm,
    encode_png,
    load_demo,
    mm_to_depth,
    save_demo,
)
from demoedit.geometry import DepthMap


def _tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


@pytest.fixture(scope="module")
def saved_small(small_demo, tmp_path_factory):
    return save_demo(small_demo, tmp_path_factory.mktemp("demo") / "small")


def test_round_trip_byte_identical(saved_small, tmp_path):
    demo = load_demo(saved_small)
    again = save_demo(demo, tmp_path / "again")
    assert _tree(saved_small) == _tree(again)


def test_round_trip_content(saved_small, small_demo):
    demo = load_demo(saved_small)
    assert demo.frame_count == small_demo.frame_count
    assert [v.view_id for v in demo.views] == [v.view_id for v in small_demo.views]
    assert np.array_equal(demo.joints, small_demo.joints)
    for a, b in zip(demo.actions["right"], small_demo.actions["right"]):
        assert a.pose == b.pose and a.gripper == b.gripper
    for va, vb in zip(demo.views, small_demo.views):
        assert va.intrinsics == vb.intrinsics
        assert all(p == q for p, q in zip(va.poses, vb.poses))
        for da, db in zip(va.depths, vb.depths):
            ok = db.valid & da.valid
            assert np.abs(da.values[ok] - db.values[ok]).max() <= 0.0005
    assert demo.label_table == small_demo.label_table


def test_png_millimeters():
    d = mm_to_depth(np.array([[2000, 0]], dtype=np.uint16))
    assert d.values[0, 0] == 2.0 and not d.valid[0, 1]


def test_depth_quantization_bound(rng):
    v = rng.uniform(0.05, 9.0, (20, 20))
    mm = decode_png(encode_png(depth_to_mm(DepthMap(v))), "x")
    assert mm.dtype == np.uint16
    assert np.abs(mm_to_depth(mm).values - v).max() <= 0.0005 + 1e-12


def test_length_mismatch_names_joint_stream(saved_small, tmp_path):
    d = tmp_path / "broken"
    shutil.copytree(saved_small, d)
    n = len(list((d / "head").glob("depth_*.png")))
    (d / "head" / f"depth_{n - 1:05d}.png").unlink()
    with pytest.raises(DatasetError, match="joint stream"):
        load_demo(d)


def test_missing_file_reported(saved_small, tmp_path):
    d = tmp_path / "broken"
    shutil.copytree(saved_small, d)
    (d / "wrist" / "pose_00003.json").unlink()
    with pytest.raises(DatasetError, match="pose_00003"):
        load_demo(d)


def test_malformed_actions(saved_small, tmp_path):
    d = tmp_path / "broken"
    shutil.copytree(saved_small, d)
    lines = (d / "actions.csv").read_text().splitlines()
    lines[2] = lines[2].replace(",", ";", 3)
    (d / "actions.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match="actions.csv"):
        load_demo(d)


def test_overwrite_refused(saved_small, small_demo):
    with pytest.raises(FileExistsError):
        save_demo(small_demo, saved_small)


def test_empty_demo_metadata_only(small_demo, tmp_path):
    empty = DemoRecording("empty", [], np.zeros((0, small_demo.model.dof)), {"right": []}, small_demo.model)
    out = save_demo(empty, tmp_path / "e")
    assert load_demo(out).frame_count == 0
    assert not any(p.suffix == ".png" for p in out.rglob("*"))


def test_validate_rejects_unknown_mask_label(small_demo):
    import dataclasses

    v = small_demo.views[0]
    bad = dataclasses.replace(v, masks=[np.full_like(m, 99) for m in v.masks])
    demo = dataclasses.replace(small_demo, views=[bad] + small_demo.views[1:])
    with pytest.raises(DatasetError, match="label table"):
        demo.validate()


def test_config_defaults_and_load(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"count": 3, "region": [-0.1, 0.1, 0, 0.2], "transforms": {"2": {"dx": 0.1}}}))
    cfg = PipelineConfig.load(p)
    assert cfg.count == 3 and cfg.region == (-0.1, 0.1, 0.0, 0.2)
    assert cfg.transforms == {2: {"dx": 0.1}}
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize(
    "data",
    [
        {"count": 0},
        {"conf_threshold": 1.5},
        {"region": [0.2, -0.2, 0, 0]},
        {"canny_low": 0.5, "canny_high": 0.2},
        {"schema_version": 9},
        {"bogus": 1},
        {"count": "many"},
    ],
)
def test_config_errors(data):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(data)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        PipelineConfig.load(tmp_path / "nope.yaml")
    p = tmp_path / "bad.yaml"
    p.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError, match="mapping"):
        PipelineConfig.load(p)
