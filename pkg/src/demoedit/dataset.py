"""Demo recordings on disk and the pipeline configuration file.

Directory layout of one demo::

    meta.json                    frame count, fps, label table, views, segments
    robot.urdf, meshes/*.obj     kinematic model
    joints.csv                   frame,<joint names>
    actions.csv                  frame,arm,qw,qx,qy,qz,tx,ty,tz,gripper
    <view>/depth_00000.png       16-bit millimeters, 0 = invalid
    <view>/pose_00000.json       camera-to-base pose
    <view>/conf_00000.png        8-bit, value / 255 (optional)
    <view>/mask_00000.png        8-bit label ids
    background/<view>/...        inpainted first-frame background (optional)
    provenance.json              edited demos only

Every file is written canonically (sorted keys, repr floats) so that saving a
loaded demo reproduces the original bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
import shutil
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import yaml

from .geometry import CameraIntrinsics, DepthMap, RigidTransform
from .kinematics import EndEffectorAction, KinematicModel, load_model_file, save_model

SCHEMA_VERSION = 1
MODEL_FILE = "robot.urdf"


class DatasetError(ValueError):
    """Missing, malformed or inconsistent demo data."""


class ConfigError(ValueError):
    """Invalid pipeline configuration."""


@dataclass
class ViewStream:
    view_id: str
    intrinsics: CameraIntrinsics
    mount: str  # "head" or "wrist:<arm>"
    depths: List[DepthMap] = field(default_factory=list)
    poses: List[RigidTransform] = field(default_factory=list)
    masks: List[np.ndarray] = field(default_factory=list)
    confidences: Optional[List[np.ndarray]] = None

    @property
    def wrist_arm(self) -> Optional[str]:
        return self.mount.split(":", 1)[1] if self.mount.startswith("wrist:") else None


@dataclass
class DemoRecording:
    demo_id: str
    views: List[ViewStream]
    joints: np.ndarray
    actions: Dict[str, List[EndEffectorAction]]
    model: KinematicModel
    fps: float = 15.0
    label_table: Dict[int, str] = field(default_factory=dict)
    background: Dict[str, Tuple[DepthMap, np.ndarray]] = field(default_factory=dict)
    segments: List[dict] = field(default_factory=list)
    provenance: Optional[dict] = None

    @property
    def frame_count(self) -> int:
        return int(len(self.joints))

    def view(self, view_id: str) -> ViewStream:
        for v in self.views:
            if v.view_id == view_id:
                return v
        raise KeyError(f"no view {view_id!r}")

    def validate(self) -> None:
        n = self.frame_count
        if self.joints.ndim != 2 or (n and self.joints.shape[1] != self.model.dof):
            raise DatasetError(f"joints: expected {self.model.dof} columns, got shape {self.joints.shape}")
        for arm, seq in self.actions.items():
            if arm not in self.model.end_effectors:
                raise DatasetError(f"actions: unknown arm {arm!r}")
            if len(seq) != n:
                raise DatasetError(f"actions[{arm}]: {len(seq)} frames, joints have {n}")
        known = set(self.label_table)
        for v in self.views:
            for name, seq in (("depth", v.depths), ("pose", v.poses), ("mask", v.masks)) + (
                (("confidence", v.confidences),) if v.confidences is not None else ()
            ):
                if len(seq) != n:
                    raise DatasetError(f"view {v.view_id!r} {name}: {len(seq)} frames, joints have {n}")
            shape = (v.intrinsics.height, v.intrinsics.width)
            for t, (d, m) in enumerate(zip(v.depths, v.masks)):
                if d.values.shape != shape or m.shape != shape:
                    raise DatasetError(f"view {v.view_id!r} frame {t}: image size differs from intrinsics")
            if known and v.masks:
                ids = set(np.unique(np.stack(v.masks)).tolist())
                if not ids <= known:
                    raise DatasetError(f"view {v.view_id!r}: mask ids {sorted(ids - known)} missing from label table")
            arm = v.wrist_arm
            if arm is not None and arm not in self.model.end_effectors:
                raise DatasetError(f"view {v.view_id!r} mounted on unknown arm {arm!r}")


# ----------------------------------------------------------------------------
# image codecs


def encode_png(img: np.ndarray) -> bytes:
    ok, buf = cv2.imencode(".png", img)
    if not ok:
        raise DatasetError("PNG encoding failed")
    return buf.tobytes()


def decode_png(data: bytes, path: Path) -> np.ndarray:
    img = cv2.imdecode(np.frombuffer(data, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DatasetError(f"{path}: not a PNG image")
    return img


def depth_to_mm(d: DepthMap) -> np.ndarray:
    mm = np.round(d.filled(0.0) * 1000.0)
    mm[(mm < 1) | (mm > 65535)] = 0
    return mm.astype(np.uint16)


def mm_to_depth(mm: np.ndarray) -> DepthMap:
    v = mm.astype(np.float64) / 1000.0
    v[mm == 0] = np.nan
    return DepthMap(v)


def conf_to_u8(c: np.ndarray) -> np.ndarray:
    return np.round(np.clip(c, 0.0, 1.0) * 255.0).astype(np.uint8)


def _read_bytes(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise DatasetError(f"missing file: {path}") from None


def _read_json(path: Path) -> Any:
    try:
        return json.loads(_read_bytes(path))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed JSON ({exc})") from None


def _dump_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# ----------------------------------------------------------------------------
# save / load


def save_demo(demo: DemoRecording, directory, force: bool = False) -> Path:
    """Write ``demo`` in the canonical on-disk format."""
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()):
        if not force:
            raise FileExistsError(f"{directory} exists and is not empty (use force to overwrite)")
        shutil.rmtree(directory)
    directory.mkdir(parents=True, exist_ok=True)
    demo.validate()
    n = demo.frame_count
    save_model(demo.model, directory, MODEL_FILE)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "demo_id": demo.demo_id,
        "frame_count": n,
        "fps": float(demo.fps),
        "label_table": {str(k): v for k, v in sorted(demo.label_table.items())},
        "model": MODEL_FILE,
        "end_effectors": {arm: demo.model.links[i].name for arm, i in sorted(demo.model.end_effectors.items())},
        "joint_names": list(demo.model.joint_names),
        "arms": sorted(demo.actions),
        "views": [
            {"id": v.view_id, "mount": v.mount, "intrinsics": v.intrinsics.to_dict()} for v in demo.views
        ],
        "has_confidence": {v.view_id: v.confidences is not None for v in demo.views},
        "background": sorted(demo.background),
        "segments": demo.segments,
    }
    (directory / "meta.json").write_text(_dump_json(meta))
    for v in demo.views:
        vd = directory / v.view_id
        vd.mkdir()
        for t in range(n):
            (vd / f"depth_{t:05d}.png").write_bytes(encode_png(depth_to_mm(v.depths[t])))
            (vd / f"pose_{t:05d}.json").write_text(_dump_json(v.poses[t].to_dict()))
            (vd / f"mask_{t:05d}.png").write_bytes(encode_png(np.asarray(v.masks[t], dtype=np.uint8)))
            if v.confidences is not None:
                (vd / f"conf_{t:05d}.png").write_bytes(encode_png(conf_to_u8(v.confidences[t])))
    for view_id, (d, m) in sorted(demo.background.items()):
        bd = directory / "background" / view_id
        bd.mkdir(parents=True)
        (bd / "depth_00000.png").write_bytes(encode_png(depth_to_mm(d)))
        (bd / "mask_00000.png").write_bytes(encode_png(np.asarray(m, dtype=np.uint8)))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame"] + list(demo.model.joint_names))
    for t in range(n):
        w.writerow([t] + [repr(float(x)) for x in demo.joints[t]])
    (directory / "joints.csv").write_text(buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "arm", "qw", "qx", "qy", "qz", "tx", "ty", "tz", "gripper"])
    for t in range(n):
        for arm in sorted(demo.actions):
            a = demo.actions[arm][t]
            w.writerow([t, arm] + [repr(float(x)) for x in a.pose.as_vector()] + [repr(float(a.gripper))])
    (directory / "actions.csv").write_text(buf.getvalue())
    if demo.provenance is not None:
        (directory / "provenance.json").write_text(_dump_json(demo.provenance))
    return directory


def _parse_float(text: str, where: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DatasetError(f"{where}: not a number: {text!r}") from None
    if not math.isfinite(v):
        raise DatasetError(f"{where}: non-finite value")
    return v


def load_demo(directory) -> DemoRecording:
    """Read and validate a demo directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"missing demo directory: {directory}")
    meta = _read_json(directory / "meta.json")
    try:
        n = int(meta["frame_count"])
        ee = dict(meta["end_effectors"])
        views_meta = meta["views"]
        has_conf = dict(meta.get("has_confidence", {}))
        model_path = directory / meta["model"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"meta.json: malformed record ({exc})") from None
    if not model_path.exists():
        raise DatasetError(f"missing file: {model_path}")
    model = load_model_file(model_path, ee)
    if list(meta.get("joint_names", model.joint_names)) != model.joint_names:
        raise DatasetError("meta.json joint_names disagree with the model")

    joints_path = directory / "joints.csv"
    rows = list(csv.reader(io.StringIO(_read_bytes(joints_path).decode())))
    if not rows or rows[0][0] != "frame":
        raise DatasetError(f"{joints_path}: missing header")
    body = rows[1:]
    if len(body) != n:
        raise DatasetError(f"joint stream has {len(body)} rows, meta.json declares {n} frames")
    joints = np.zeros((n, model.dof))
    for t, row in enumerate(body):
        if len(row) != model.dof + 1 or int(row[0]) != t:
            raise DatasetError(f"{joints_path}: malformed row {t + 1}")
        joints[t] = [_parse_float(x, f"{joints_path}:{t + 2}") for x in row[1:]]

    actions_path = directory / "actions.csv"
    arms = list(meta.get("arms", []))
    per_arm: Dict[str, List[EndEffectorAction]] = {a: [] for a in arms}
    rows = list(csv.reader(io.StringIO(_read_bytes(actions_path).decode())))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != 10 or row[1] not in per_arm:
            raise DatasetError(f"{actions_path}:{i}: malformed record")
        vals = [_parse_float(x, f"{actions_path}:{i}") for x in row[2:]]
        try:
            a = EndEffectorAction(RigidTransform(np.array(vals[:4]), np.array(vals[4:7])), vals[7])
        except ValueError as exc:
            raise DatasetError(f"{actions_path}:{i}: {exc}") from None
        per_arm[row[1]].append(a)
    for arm, seq in per_arm.items():
        if len(seq) != n:
            raise DatasetError(f"action stream for arm {arm!r} has {len(seq)} rows, meta.json declares {n} frames")

    views = []
    for vm in views_meta:
        vid = vm["id"]
        vd = directory / vid
        k = CameraIntrinsics.from_dict(vm["intrinsics"])
        count = len(list(vd.glob("depth_*.png"))) if vd.is_dir() else 0
        if count != n:
            raise DatasetError(f"view {vid!r} depth stream has {count} frames, joint stream has {n}")
        stream = ViewStream(vid, k, vm.get("mount", "head"), confidences=[] if has_conf.get(vid) else None)
        for t in range(n):
            p = vd / f"depth_{t:05d}.png"
            mm = decode_png(_read_bytes(p), p)
            if mm.dtype != np.uint16:
                raise DatasetError(f"{p}: expected 16-bit depth")
            stream.depths.append(mm_to_depth(mm))
            p = vd / f"pose_{t:05d}.json"
            try:
                stream.poses.append(RigidTransform.from_dict(_read_json(p)))
            except (KeyError, ValueError) as exc:
                raise DatasetError(f"{p}: malformed pose ({exc})") from None
            p = vd / f"mask_{t:05d}.png"
            stream.masks.append(decode_png(_read_bytes(p), p))
            if stream.confidences is not None:
                p = vd / f"conf_{t:05d}.png"
                stream.confidences.append(decode_png(_read_bytes(p), p).astype(np.float64) / 255.0)
        views.append(stream)

    background = {}
    for vid in meta.get("background", []):
        bd = directory / "background" / vid
        d = mm_to_depth(decode_png(_read_bytes(bd / "depth_00000.png"), bd))
        m = decode_png(_read_bytes(bd / "mask_00000.png"), bd)
        background[vid] = (d, m)
    prov_path = directory / "provenance.json"
    provenance = _read_json(prov_path) if prov_path.exists() else None
    demo = DemoRecording(
        demo_id=str(meta.get("demo_id", directory.name)),
        views=views,
        joints=joints,
        actions=per_arm,
        model=model,
        fps=float(meta.get("fps", 15.0)),
        label_table={int(k): v for k, v in meta.get("label_table", {}).items()},
        background=background,
        segments=list(meta.get("segments", [])),
        provenance=provenance,
    )
    demo.validate()
    return demo


# ----------------------------------------------------------------------------
# configuration


@dataclass
class PipelineConfig:
    schema_version: int = SCHEMA_VERSION
    conf_threshold: float = 0.4
    region: Tuple[float, float, float, float] = (-0.2, 0.2, -0.2, 0.2)
    rotation_range_deg: float = 22.5
    relocation_frames: int = 30
    count: int = 1
    seed: int = 0
    objects: Optional[List[int]] = None
    segments: Optional[List[dict]] = None
    transforms: Optional[Dict[int, dict]] = None
    splat_radius: int = 0
    depth_tolerance: float = 0.01
    hole_max: int = 2
    speckle_min_region: int = 6
    label_threshold: float = 0.03
    chunk_frames: int = 25
    canny_low: float = 0.1
    canny_high: float = 0.2
    ransac_iterations: int = 500
    ransac_inlier_dist: float = 0.005
    attempt_factor: int = 10
    export_conditions: bool = True

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(self.schema_version == SCHEMA_VERSION, f"unsupported schema_version {self.schema_version}")
        need(0.0 <= self.conf_threshold <= 1.0, "conf_threshold must lie in [0, 1]")
        need(len(self.region) == 4, "region must be [xmin, xmax, ymin, ymax]")
        x0, x1, y0, y1 = self.region
        need(x0 <= x1 and y0 <= y1, "region bounds are inverted")
        need(0.0 <= self.rotation_range_deg <= 180.0, "rotation_range_deg must lie in [0, 180]")
        need(self.relocation_frames >= 0, "relocation_frames must be >= 0")
        need(self.count >= 1, "count must be >= 1")
        need(self.splat_radius >= 0, "splat_radius must be >= 0")
        need(self.depth_tolerance >= 0, "depth_tolerance must be >= 0")
        need(self.hole_max >= 0 and self.speckle_min_region >= 0, "filter sizes must be >= 0")
        need(self.chunk_frames >= 1, "chunk_frames must be >= 1")
        need(0.0 <= self.canny_low < self.canny_high <= 1.0, "need 0 <= canny_low < canny_high <= 1")
        need(self.ransac_iterations >= 1 and self.ransac_inlier_dist > 0, "invalid RANSAC parameters")
        need(self.attempt_factor >= 1, "attempt_factor must be >= 1")
        need(isinstance(self.export_conditions, bool), "export_conditions must be true or false")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "PipelineConfig":
        d = dict(d or {})
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "region" in d:
                d["region"] = tuple(float(x) for x in d["region"])
            if d.get("transforms") is not None:
                d["transforms"] = {int(k): dict(v) for k, v in d["transforms"].items()}
            if d.get("objects") is not None:
                d["objects"] = [int(x) for x in d["objects"]]
            for f in fields(cls):
                if f.name in d and f.type in ("int", "float") and d[f.name] is not None:
                    d[f.name] = (int if f.type == "int" else float)(d[f.name])
            return cls(**d)
        except (TypeError, ValueError, AttributeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid config value: {exc}") from None

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config does not parse: {exc}") from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def with_overrides(self, **kw) -> "PipelineConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})
