"""Spatial editing of a recorded demonstration.

A demo is split into motion segments (free-space moves that get re-planned)
and skill segments (object interaction, moved rigidly with the object that
anchors them). Objects are moved by sampled planar transforms, the scene is
rebuilt from the per-frame point clouds, the arm is re-rendered from IK
solutions, and a short relocation clip is prepended in which the objects glide
from their recorded to their new placements.
"""

from __future__ import annotations

import logging
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .dataset import DemoRecording, PipelineConfig, ViewStream
from .geometry import CameraIntrinsics, DepthMap, RigidTransform, compose, interpolate, invert, planar_transform, unproject_depth
from .kinematics import (
    EndEffectorAction,
    IKError,
    KinematicModel,
    inverse_kinematics,
    label_robot_points,
    split_end_effector,
)
from .pointcloud import (
    BACKGROUND,
    ROBOT,
    TABLE,
    LabeledPointCloud,
    PlaneFitError,
    align_background_scale,
    fuse_views,
    is_background,
    is_object,
    is_robot,
)
from .render import filter_depth, merge_labeled, render_mesh_depth, render_pointcloud_depth

log = logging.getLogger(__name__)

SEGMENT_KINDS = ("relocation", "motion", "skill")


class EditError(RuntimeError):
    """One edit attempt failed; the pipeline resamples."""


class PlacementError(EditError):
    """No collision-free placement found."""


class PlanError(EditError):
    def __init__(self, message: str, frame: int):
        super().__init__(message)
        self.frame = frame


class SegmentError(ValueError):
    """Invalid segment definition."""


class GenerationShortfall(RuntimeError):
    """Fewer successful edits than requested within the attempt budget."""

    def __init__(self, message: str, result: "PipelineResult"):
        super().__init__(message)
        self.result = result


# ----------------------------------------------------------------------------
# segments and plans


@dataclass(frozen=True)
class Segment:
    kind: str
    start: int
    end: int
    arms: Tuple[str, ...] = ()
    attached: Tuple[int, ...] = ()
    anchor: Optional[int] = None

    @property
    def frames(self) -> int:
        return self.end - self.start

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "start": self.start,
            "end": self.end,
            "arm": self.arms[0] if len(self.arms) == 1 else "both",
            "attached": list(self.attached),
            "anchor": self.anchor,
        }


@dataclass(frozen=True)
class SegmentSpec:
    segments: Tuple[Segment, ...]
    relocation_frames: int = 0

    @classmethod
    def from_dicts(
        cls,
        items: Sequence[dict],
        frame_count: int,
        arms: Sequence[str],
        object_ids: Optional[Sequence[int]] = None,
        relocation_frames: Optional[int] = None,
    ) -> "SegmentSpec":
        """Parse and validate segment records.

        A leading ``{"kind": "relocation", "frames": R}`` entry requests an
        R-frame relocation clip; ``relocation_frames`` overrides its length.
        """
        segs: List[Segment] = []
        reloc = 0
        for i, d in enumerate(items):
            try:
                kind = d["kind"]
            except (KeyError, TypeError):
                raise SegmentError(f"segment {i}: missing kind") from None
            if kind not in SEGMENT_KINDS:
                raise SegmentError(f"segment {i}: unknown kind {kind!r}")
            if kind == "relocation":
                if i != 0:
                    raise SegmentError("a relocation segment may only come first")
                if "start" in d and int(d.get("end", 0)) > int(d["start"]):
                    # recorded relocation clip of an already edited demo: re-plan it as motion
                    kind = "motion"
                else:
                    reloc = int(d.get("frames", 0))
                    continue
            arm = d.get("arm", "both")
            seg_arms = tuple(sorted(arms)) if arm == "both" else (arm,)
            for a in seg_arms:
                if a not in arms:
                    raise SegmentError(f"segment {i}: unknown arm {a!r}")
            anchor = d.get("anchor")
            segs.append(
                Segment(
                    kind,
                    int(d["start"]),
                    int(d["end"]),
                    seg_arms,
                    tuple(int(x) for x in d.get("attached", []) or []),
                    None if anchor is None else int(anchor),
                )
            )
        if relocation_frames is not None:
            reloc = int(relocation_frames)
        spec = cls(tuple(segs), reloc)
        spec.validate(frame_count, object_ids)
        return spec

    def validate(self, frame_count: int, object_ids: Optional[Sequence[int]] = None) -> None:
        if self.relocation_frames < 0:
            raise SegmentError("relocation_frames must be >= 0")
        pos = 0
        known = None if object_ids is None else set(int(i) for i in object_ids)
        for i, s in enumerate(self.segments):
            if s.kind == "relocation":
                raise SegmentError("relocation must be given as relocation_frames")
            if s.start != pos:
                raise SegmentError(f"segment {i} starts at {s.start}, expected {pos} (gap or overlap)")
            if s.end <= s.start:
                raise SegmentError(f"segment {i} is empty")
            if s.kind == "skill" and s.anchor is None:
                raise SegmentError(f"skill segment {i} has no anchor object")
            if known is not None:
                for j in ((s.anchor,) if s.anchor is not None else ()) + s.attached:
                    if j not in known:
                        raise SegmentError(f"segment {i} references unknown object {j}")
            pos = s.end
        if frame_count and pos != frame_count:
            raise SegmentError(f"segments cover {pos} frames, demo has {frame_count}")

    def object_ids(self) -> List[int]:
        ids = set()
        for s in self.segments:
            ids.update(s.attached)
            if s.anchor is not None:
                ids.add(s.anchor)
        return sorted(ids)

    def to_dicts(self) -> List[dict]:
        out = [{"kind": "relocation", "frames": self.relocation_frames}] if self.relocation_frames else []
        return out + [s.to_dict() for s in self.segments]


@dataclass(frozen=True)
class EditPlan:
    transforms: Dict[int, RigidTransform]
    seed: int = 0
    region: Tuple[float, float, float, float] = (-0.2, 0.2, -0.2, 0.2)
    rotation_range: float = math.radians(22.5)
    relocation_frames: int = 30

    def transform(self, object_id: int) -> RigidTransform:
        return self.transforms.get(object_id, RigidTransform())

    def to_dict(self) -> dict:
        return {
            "transforms": {str(k): v.to_dict() for k, v in sorted(self.transforms.items())},
            "seed": int(self.seed),
            "region": [float(x) for x in self.region],
            "rotation_range_rad": float(self.rotation_range),
            "relocation_frames": int(self.relocation_frames),
        }


@dataclass
class EditedDemo(DemoRecording):
    plan: Optional[EditPlan] = None
    source_frames: List[int] = field(default_factory=list)  # source frame per edited frame
    frame_kinds: List[str] = field(default_factory=list)


@dataclass(frozen=True)
class RenderSettings:
    splat_radius: int = 0
    depth_tolerance: float = 0.01
    hole_max: int = 2
    speckle_min_region: int = 6

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "RenderSettings":
        return cls(cfg.splat_radius, cfg.depth_tolerance, cfg.hole_max, cfg.speckle_min_region)


# ----------------------------------------------------------------------------
# sampling


def sample_object_transform(
    region: Sequence[float],
    rotation_range: float,
    existing: Sequence[Tuple[Sequence[float], float]],
    rng: np.random.Generator,
    center=(0.0, 0.0),
    footprint: float = 0.0,
    max_tries: int = 100,
) -> RigidTransform:
    """Sample a table-plane transform for an object centered at ``center``.

    The displacement (dx, dy) of the object center is uniform in ``region``
    (xmin, xmax, ymin, ymax) and the yaw is uniform in [-rotation_range,
    rotation_range]. Placements whose footprint disc overlaps an ``existing``
    (center, radius) disc are resampled.
    """
    x0, x1, y0, y1 = (float(v) for v in region)
    if x0 > x1 or y0 > y1:
        raise ValueError("empty region")
    c = np.asarray(center, dtype=np.float64)[:2]
    for _ in range(max_tries):
        dx = rng.uniform(x0, x1) if x1 > x0 else x0
        dy = rng.uniform(y0, y1) if y1 > y0 else y0
        yaw = rng.uniform(-rotation_range, rotation_range) if rotation_range > 0 else 0.0
        p = c + (dx, dy)
        if all(np.hypot(*(p - np.asarray(e[0], dtype=np.float64)[:2])) >= footprint + r for e, r in ((e, e[1]) for e in existing)):
            return planar_transform(c, dx, dy, yaw)
    raise PlacementError(f"no free placement after {max_tries} tries")


# ----------------------------------------------------------------------------
# motion planning


def plan_motion(
    start: EndEffectorAction,
    end: EndEffectorAction,
    frames: int,
    m: KinematicModel,
    arm: str,
    q_seed,
    q_end=None,
) -> Tuple[List[RigidTransform], List[EndEffectorAction], np.ndarray]:
    """Interpolate the EE pose from ``start`` to ``end`` and solve IK frame by frame.

    Returns the per-frame transforms relative to the start pose, the actions
    and the joints. ``q_end`` pins the final joint vector (it must reach
    ``end``), keeping joint paths continuous into a following segment.
    """
    if frames < 2:
        raise ValueError("a motion plan needs at least 2 frames")
    inv_start = invert(start.pose)
    transforms, actions = [], []
    joints = np.zeros((frames, m.dof))
    q = np.asarray(q_seed, dtype=np.float64).copy()
    for i in range(frames):
        s = i / (frames - 1)
        pose = interpolate(start.pose, end.pose, s)
        grip = (1.0 - s) * start.gripper + s * end.gripper if s not in (0.0, 1.0) else (start.gripper if s == 0 else end.gripper)
        actions.append(EndEffectorAction(pose, grip))
        transforms.append(compose(pose, inv_start))
        if i == frames - 1 and q_end is not None:
            q = np.asarray(q_end, dtype=np.float64).copy()
        else:
            try:
                q = inverse_kinematics(m, pose, arm, q)
            except IKError as exc:
                raise PlanError(f"motion plan failed at frame {i}: {exc}", i) from None
        joints[i] = q
    return transforms, actions, joints


# ----------------------------------------------------------------------------
# per-frame scene data


@dataclass
class FrameClouds:
    """Source frame split into movable parts, base frame."""

    ee: Dict[str, LabeledPointCloud]
    objects: Dict[int, LabeledPointCloud]
    background: LabeledPointCloud


@dataclass
class BackgroundFill:
    """Inpainted background points of one view, with their source pixels."""

    view_id: str
    cloud: LabeledPointCloud
    pixels: np.ndarray
    scale: float


def prepare_background(demo: DemoRecording, cfg: PipelineConfig) -> List[BackgroundFill]:
    """Unproject each inpainted background and rescale it to the recorded table plane.

    Alignment happens in the camera frame of the view's first frame, where
    the reconstruction scale acts about the camera center.
    """
    fills = []
    for view_id, (depth, mask) in sorted(demo.background.items()):
        view = demo.view(view_id)
        k = view.intrinsics
        pts, idx = unproject_depth(depth.values, k, depth.valid)
        bg = LabeledPointCloud(pts, mask.reshape(-1)[idx], np.ones(len(idx)))
        d0 = view.depths[0]
        conf0 = view.confidences[0] if view.confidences is not None else np.ones(d0.values.shape)
        keep0 = d0.valid & (conf0 >= cfg.conf_threshold)
        p0, i0 = unproject_depth(d0.values, k, keep0)
        orig = LabeledPointCloud(p0, view.masks[0].reshape(-1)[i0], conf0.reshape(-1)[i0])
        try:
            scaled, scale = align_background_scale(
                orig, bg, TABLE, cfg.ransac_iterations, cfg.ransac_inlier_dist, cfg.seed
            )
        except PlaneFitError as exc:
            log.warning("background %s not aligned: %s", view_id, exc)
            continue
        keep = is_background(scaled.labels)
        cloud = scaled.select(keep).transformed(view.poses[0])
        fills.append(BackgroundFill(view_id, cloud, idx[keep], scale))
    return fills


def split_frame(
    cloud: LabeledPointCloud,
    m: KinematicModel,
    q,
    arms: Sequence[str],
    object_ids: Sequence[int],
    label_threshold: float = 0.03,
) -> FrameClouds:
    """Assign robot points to links, then separate EE groups, objects and background.

    Robot points outside the EE groups are dropped; the arm is re-rendered from
    its joint state instead.
    """
    labeled = label_robot_points(m, q, cloud, label_threshold)
    ee = {}
    for a in arms:
        ee[a], _ = split_end_effector(labeled, m, a)
    objects = {j: labeled.select(labeled.labels == j) for j in object_ids}
    background = labeled.select(is_background(labeled.labels))
    return FrameClouds(ee, objects, background)


def prepare_frames(
    demo: DemoRecording,
    cfg: PipelineConfig,
    fills: Sequence[BackgroundFill],
    m: Optional[KinematicModel] = None,
    frames: Optional[Sequence[int]] = None,
) -> Dict[int, FrameClouds]:
    m = m or demo.model
    ids = sorted(i for i in demo.label_table if is_object(i))
    arms = sorted(m.end_effectors)
    out = {}
    for t in range(demo.frame_count) if frames is None else frames:
        cloud = fuse_frame(demo, t, cfg.conf_threshold)
        fc = split_frame(cloud, m, demo.joints[t], arms, ids, cfg.label_threshold)
        extra = []
        for f in fills:
            view = demo.view(f.view_id)
            if view.poses[t] != view.poses[0]:
                extra.append(f.cloud)
                continue
            # only fill pixels the recorded frame does not already show as background
            conf = view.confidences[t] if view.confidences is not None else np.ones(view.depths[t].values.shape)
            seen = view.depths[t].valid & (conf >= cfg.conf_threshold) & is_background(view.masks[t])
            extra.append(f.cloud.select(~seen.reshape(-1)[f.pixels]))
        fc.background = LabeledPointCloud.concat([fc.background] + extra)
        out[t] = fc
    return out


def fuse_frame(demo: DemoRecording, t: int, conf_threshold: float) -> LabeledPointCloud:
    v = demo.views
    return fuse_views(
        [s.depths[t] for s in v],
        [s.poses[t] for s in v],
        [s.intrinsics for s in v],
        [s.masks[t] for s in v],
        [None if s.confidences is None else s.confidences[t] for s in v],
        conf_threshold,
        label_ids=demo.label_table or None,
    )


# ----------------------------------------------------------------------------
# frame synthesis


def _output_mask(depth: DepthMap, labels: np.ndarray, before: np.ndarray) -> np.ndarray:
    """Robot link ids collapse to the generic robot id; filled holes copy the nearest label."""
    lab = np.where(is_robot(labels), ROBOT, labels).astype(np.uint8)
    valid = depth.valid
    new = valid & ~before
    if new.any() and before.any():
        _, (iy, ix) = ndimage.distance_transform_edt(~before, return_indices=True)
        lab[new] = lab[iy[new], ix[new]]
    lab[~valid] = BACKGROUND
    return lab


def render_views(
    cloud: LabeledPointCloud,
    q,
    cameras: Sequence[Tuple[RigidTransform, CameraIntrinsics]],
    m: Optional[KinematicModel],
    settings: RenderSettings,
) -> List[Tuple[DepthMap, np.ndarray]]:
    """Merged point and link-mesh depth per camera, hole-filtered, with label masks."""
    out = []
    for pose, k in cameras:
        dp, lp = render_pointcloud_depth(
            cloud, pose, k, settings.splat_radius, with_labels=True, depth_tolerance=settings.depth_tolerance
        )
        if m is not None:
            dm, lm = render_mesh_depth(m, q, pose, k, with_labels=True)
            d, lab = merge_labeled((dp, lp), (dm, lm))
        else:
            d, lab = dp, lp
        filtered = filter_depth(d, settings.hole_max, settings.speckle_min_region)
        out.append((filtered, _output_mask(filtered, lab, d.valid)))
    return out


def camera_poses(views: Sequence[ViewStream], t: int, ee_transforms: Dict[str, RigidTransform]) -> List[RigidTransform]:
    """Head cameras stay put; wrist cameras follow their arm's EE transform."""
    poses = []
    for v in views:
        pose = v.poses[t]
        arm = v.wrist_arm
        if arm is not None and arm in ee_transforms and not ee_transforms[arm].is_identity():
            pose = compose(ee_transforms[arm], pose)
        poses.append(pose)
    return poses


def compose_scene(
    fc: FrameClouds,
    ee_transforms: Dict[str, RigidTransform],
    object_transforms: Dict[int, RigidTransform],
) -> LabeledPointCloud:
    parts = [c.transformed(ee_transforms.get(a, RigidTransform())) for a, c in sorted(fc.ee.items())]
    parts += [c.transformed(object_transforms.get(j, RigidTransform())) for j, c in sorted(fc.objects.items())]
    parts.append(fc.background)
    return LabeledPointCloud.concat(parts)


def synthesize_frame(
    fc: FrameClouds,
    views: Sequence[ViewStream],
    t: int,
    ee_transforms: Dict[str, RigidTransform],
    object_transforms: Dict[int, RigidTransform],
    q,
    m: KinematicModel,
    settings: RenderSettings,
) -> Tuple[List[Tuple[DepthMap, np.ndarray]], List[RigidTransform]]:
    cloud = compose_scene(fc, ee_transforms, object_transforms)
    poses = camera_poses(views, t, ee_transforms)
    rendered = render_views(cloud, q, [(p, v.intrinsics) for p, v in zip(poses, views)], m, settings)
    return rendered, poses


def edit_skill_frame(
    fc: FrameClouds,
    views: Sequence[ViewStream],
    t: int,
    transform: RigidTransform,
    actions: Dict[str, EndEffectorAction],
    q_source,
    arms: Sequence[str],
    m: KinematicModel,
    settings: RenderSettings,
    q_seed=None,
    attached: Sequence[int] = (),
    object_transforms: Optional[Dict[int, RigidTransform]] = None,
):
    """Move the acting EE(s), attached objects and wrist cameras by ``transform``.

    Returns (rendered views, Q*, per-arm A*, camera poses). IK seeds from
    ``q_seed`` (the previous edited frame) or the recorded joints.
    """
    q_source = np.asarray(q_source, dtype=np.float64)
    new_actions = dict(actions)
    if transform.is_identity():
        q = q_source.copy()
    else:
        q = (q_source if q_seed is None else np.asarray(q_seed, dtype=np.float64)).copy()
        for a in arms:
            target = compose(transform, actions[a].pose)
            new_actions[a] = EndEffectorAction(target, actions[a].gripper)
            q = inverse_kinematics(m, target, a, q)
        q = _restore_idle(m, q, q_source, arms)
    obj = dict(object_transforms or {})
    for j in attached:
        obj[j] = transform
    ee = {a: transform for a in arms}
    rendered, poses = synthesize_frame(fc, views, t, ee, obj, q, m, settings)
    return rendered, q, new_actions, poses


def edit_motion_frame(
    fc: FrameClouds,
    views: Sequence[ViewStream],
    t: int,
    ee_transforms: Dict[str, RigidTransform],
    q,
    m: KinematicModel,
    settings: RenderSettings,
    attached: Dict[int, str] = None,
    object_transforms: Optional[Dict[int, RigidTransform]] = None,
):
    """Render a planned motion frame: EE clouds and attached objects follow their arm."""
    obj = dict(object_transforms or {})
    for j, a in (attached or {}).items():
        obj[j] = ee_transforms[a]
    return synthesize_frame(fc, views, t, ee_transforms, obj, q, m, settings)


def relocation_segment(
    fc0: FrameClouds,
    views: Sequence[ViewStream],
    object_transforms: Dict[int, RigidTransform],
    frames: int,
    q0,
    m: KinematicModel,
    settings: RenderSettings,
    centers: Optional[Dict[int, np.ndarray]] = None,
) -> List[Tuple[List[Tuple[DepthMap, np.ndarray]], List[RigidTransform]]]:
    """Objects glide from their recorded placement to the edited one; robot and cameras hold frame 0.

    Each object turns about its own ``centers`` entry (base origin if absent),
    so its centroid travels on a straight line.
    """
    if frames < 1:
        raise ValueError("relocation needs at least one frame")
    centers = centers or {}
    out = []
    for r in range(frames):
        s = r / (frames - 1) if frames > 1 else 1.0
        obj = {j: relocation_transform(T, s, centers.get(j)) for j, T in object_transforms.items()}
        out.append(synthesize_frame(fc0, views, 0, {}, obj, q0, m, settings))
    return out


def relocation_transform(t: RigidTransform, s: float, center=None) -> RigidTransform:
    """Fraction ``s`` of ``t``: pose about ``center`` interpolated linearly in translation, geodesically in rotation."""
    if s == 0.0:
        return RigidTransform()
    if s == 1.0 or center is None:
        return interpolate(RigidTransform(), t, s)
    start = RigidTransform.from_translation(*np.asarray(center, dtype=np.float64))
    pose = interpolate(start, compose(t, start), s)
    return compose(pose, invert(start))


def _restore_idle(m: KinematicModel, q: np.ndarray, q_source: np.ndarray, arms: Sequence[str]) -> np.ndarray:
    active = set()
    for a in arms:
        active.update(m.arm_joint_indices(a))
    idle = [i for i in range(m.dof) if i not in active]
    q = q.copy()
    q[idle] = q_source[idle]
    return q


# ----------------------------------------------------------------------------
# trajectory schedule


@dataclass
class Schedule:
    """Per-frame edited kinematics over the source timeline."""

    actions: Dict[str, List[EndEffectorAction]]
    joints: np.ndarray
    ee: List[Dict[str, RigidTransform]]
    objects: List[Dict[int, RigidTransform]]


def build_schedule(
    demo: DemoRecording,
    spec: SegmentSpec,
    plan: EditPlan,
    m: KinematicModel,
    object_ids: Sequence[int],
) -> Schedule:
    """Edited actions, joints and rigid transforms for every source frame."""
    n = demo.frame_count
    arms = sorted(demo.actions)
    actions = {a: list(demo.actions[a]) for a in arms}
    joints = demo.joints.copy()
    ident = RigidTransform()
    ee = [{} for _ in range(n)]
    state = {j: plan.transform(j) for j in object_ids}
    objects: List[Dict[int, RigidTransform]] = [dict() for _ in range(n)]
    segs = spec.segments

    # skill transforms and object states, in order
    skill_c: Dict[int, RigidTransform] = {}
    state_before: List[Dict[int, RigidTransform]] = []
    for si, s in enumerate(segs):
        state_before.append(dict(state))
        if s.kind == "skill":
            c = state.get(s.anchor, ident)
            skill_c[si] = c
            for j in s.attached:
                state[j] = c
        else:
            # attached objects end where the carrying arm leaves them; resolved below
            pass

    def arm_c_before(si: int, arm: str) -> RigidTransform:
        for pj in range(si - 1, -1, -1):
            if arm in segs[pj].arms:
                if segs[pj].kind == "skill":
                    return skill_c[pj]
                return ee[segs[pj].end - 1].get(arm, ident)
            return ident
        return ident

    # skill segments
    for si, s in enumerate(segs):
        if s.kind != "skill":
            continue
        c = skill_c[si]
        q = None
        for t in range(s.start, s.end):
            for a in s.arms:
                ee[t][a] = c
            for j in s.attached:
                objects[t][j] = c
            if c.is_identity():
                continue
            q_src = demo.joints[t]
            q = (q_src if q is None else q).copy()
            for a in s.arms:
                target = compose(c, demo.actions[a][t].pose)
                actions[a][t] = EndEffectorAction(target, demo.actions[a][t].gripper)
                try:
                    q = inverse_kinematics(m, target, a, q)
                except IKError as exc:
                    raise PlanError(f"skill IK failed at frame {t}: {exc}", t) from None
            q = _restore_idle(m, q, q_src, s.arms)
            joints[t] = q

    # motion segments
    for si, s in enumerate(segs):
        if s.kind != "motion":
            continue
        nxt = segs[si + 1] if si + 1 < len(segs) else None
        for a in s.arms:
            c_prev = arm_c_before(si, a)
            if nxt is not None and nxt.kind == "skill" and a in nxt.arms:
                c_next = skill_c[si + 1]
                if nxt.anchor in s.attached:
                    c_next = c_prev
                end_src = demo.actions[a][s.end]
                q_end = joints[s.end]
            elif nxt is not None:
                c_next, end_src, q_end = ident, demo.actions[a][s.end], None
            else:
                c_next, end_src, q_end = ident, demo.actions[a][n - 1], None
            if c_prev.is_identity() and c_next.is_identity():
                for t in range(s.start, s.end):
                    ee[t][a] = ident
                continue
            start = EndEffectorAction(compose(c_prev, demo.actions[a][s.start].pose), demo.actions[a][s.start].gripper)
            end = EndEffectorAction(compose(c_next, end_src.pose), end_src.gripper)
            if s.start > 0 and segs[si - 1].kind == "skill" and a in segs[si - 1].arms:
                seed = joints[s.start - 1]
            else:
                seed = demo.joints[s.start]
            if s.frames == 1:
                plan_actions = [end]
                plan_joints = [q_end if q_end is not None else _ik(m, end.pose, a, seed, s.start)]
            else:
                _, plan_actions, plan_joints = plan_motion(start, end, s.frames, m, a, seed, q_end)
            for i, t in enumerate(range(s.start, s.end)):
                actions[a][t] = plan_actions[i]
                joints[t] = _restore_idle(m, np.asarray(plan_joints[i]), demo.joints[t], (a,))
                ee[t][a] = compose(plan_actions[i].pose, invert(demo.actions[a][t].pose))
        for j in s.attached:
            carrier = s.arms[0]
            for t in range(s.start, s.end):
                objects[t][j] = ee[t].get(carrier, ident)

    # fill object transforms: governed objects keep the last governing transform
    current = {j: plan.transform(j) for j in object_ids}
    for si, s in enumerate(segs):
        for t in range(s.start, s.end):
            for j in object_ids:
                if j in objects[t]:
                    current[j] = objects[t][j]
                else:
                    objects[t][j] = current[j]
    return Schedule(actions, joints, ee, objects)


def _ik(m, pose, arm, seed, frame):
    try:
        return inverse_kinematics(m, pose, arm, seed)
    except IKError as exc:
        raise PlanError(f"IK failed at frame {frame}: {exc}", frame) from None


# ----------------------------------------------------------------------------
# pipeline


@dataclass
class EditContext:
    """Inputs shared by every edit attempt of one demo."""

    demo: DemoRecording
    spec: SegmentSpec
    config: PipelineConfig
    model: KinematicModel
    frames: Dict[int, FrameClouds]
    object_ids: List[int]
    centers: Dict[int, np.ndarray]
    footprints: Dict[int, float]
    fixed: Optional[Dict[int, RigidTransform]] = None
    fills: List[BackgroundFill] = field(default_factory=list)


def build_context(
    demo: DemoRecording,
    config: Optional[PipelineConfig] = None,
    spec: Optional[SegmentSpec] = None,
    model: Optional[KinematicModel] = None,
    transforms: Optional[Dict[int, RigidTransform]] = None,
) -> EditContext:
    config = config or PipelineConfig()
    model = model or demo.model
    arms = sorted(demo.actions)
    all_objects = sorted(i for i in demo.label_table if is_object(i))
    if spec is None:
        items = config.segments if config.segments is not None else demo.segments
        if not items:
            items = [{"kind": "motion", "start": 0, "end": demo.frame_count, "arm": "both"}]
        spec = SegmentSpec.from_dicts(items, demo.frame_count, arms, all_objects, config.relocation_frames)
    else:
        spec.validate(demo.frame_count, all_objects)
    fills = prepare_background(demo, config)
    frames = prepare_frames(demo, config, fills, model)
    first = frames[0]
    centers, footprints = {}, {}
    for j in all_objects:
        pts = first.objects[j].points
        if len(pts) == 0:
            continue
        c = pts.mean(axis=0)
        centers[j] = c
        footprints[j] = float(np.max(np.hypot(pts[:, 0] - c[0], pts[:, 1] - c[1])))
    object_ids = config.objects if config.objects is not None else [j for j in spec.object_ids() if j in centers]
    for j in object_ids:
        if j not in centers:
            raise SegmentError(f"object {j} is not visible in the first frame")
    fixed = transforms
    if fixed is None and config.transforms is not None:
        fixed = {}
        for j, v in config.transforms.items():
            j = int(j)
            if j not in centers and "center" not in v:
                raise SegmentError(f"object {j} is not visible in the first frame")
            center = v.get("center", centers.get(j))
            fixed[j] = planar_transform(
                center, float(v.get("dx", 0.0)), float(v.get("dy", 0.0)), math.radians(float(v.get("yaw_deg", 0.0)))
            )
    return EditContext(demo, spec, config, model, frames, list(object_ids), centers, footprints, fixed, fills)


def sample_plan(ctx: EditContext, attempt: int) -> EditPlan:
    cfg = ctx.config
    seed = cfg.seed + attempt
    rot = math.radians(cfg.rotation_range_deg)
    if ctx.fixed is not None:
        return EditPlan(dict(ctx.fixed), seed, tuple(cfg.region), rot, ctx.spec.relocation_frames)
    rng = np.random.default_rng(seed)
    placed = [(ctx.centers[j], ctx.footprints[j]) for j in sorted(ctx.centers) if j not in ctx.object_ids]
    transforms = {}
    for j in sorted(ctx.object_ids):
        t = sample_object_transform(cfg.region, rot, placed, rng, ctx.centers[j], ctx.footprints[j])
        transforms[j] = t
        placed.append((t.apply(ctx.centers[j]), ctx.footprints[j]))
    return EditPlan(transforms, seed, tuple(cfg.region), rot, ctx.spec.relocation_frames)


def edit_demo(ctx: EditContext, plan: EditPlan, demo_id: str) -> EditedDemo:
    """Produce one edited demo (relocation clip followed by every source frame)."""
    demo, m = ctx.demo, ctx.model
    settings = RenderSettings.from_config(ctx.config)
    sched = build_schedule(demo, ctx.spec, plan, m, ctx.object_ids)
    views = demo.views
    out_views = [ViewStream(v.view_id, v.intrinsics, v.mount) for v in views]
    joints, actions = [], {a: [] for a in demo.actions}
    source_frames, kinds = [], []

    def push(rendered, poses, q, acts, t, kind):
        for ov, (d, lab), p in zip(out_views, rendered, poses):
            ov.depths.append(d)
            ov.masks.append(lab)
            ov.poses.append(p)
        joints.append(np.asarray(q, dtype=np.float64).copy())
        for a in actions:
            actions[a].append(acts[a])
        source_frames.append(t)
        kinds.append(kind)

    R = ctx.spec.relocation_frames
    if R:
        initial = {j: plan.transform(j) for j in ctx.object_ids}
        for rendered, poses in relocation_segment(ctx.frames[0], views, initial, R, demo.joints[0], m, settings, ctx.centers):
            push(rendered, poses, demo.joints[0], {a: demo.actions[a][0] for a in actions}, 0, "relocation")
    kind_of = {}
    for s in ctx.spec.segments:
        for t in range(s.start, s.end):
            kind_of[t] = s.kind
    for t in range(demo.frame_count):
        rendered, poses = synthesize_frame(
            ctx.frames[t], views, t, sched.ee[t], sched.objects[t], sched.joints[t], m, settings
        )
        push(rendered, poses, sched.joints[t], {a: sched.actions[a][t] for a in actions}, t, kind_of.get(t, "motion"))

    provenance = {
        "source_demo": demo.demo_id,
        "seed": int(plan.seed),
        "plan": plan.to_dict(),
        "segments": ctx.spec.to_dicts(),
        "source_frames": list(source_frames),
    }
    segments = ([{"kind": "relocation", "start": 0, "end": R}] if R else []) + [
        dict(s.to_dict(), start=s.start + R, end=s.end + R) for s in ctx.spec.segments
    ]
    return EditedDemo(
        demo_id=demo_id,
        views=out_views,
        joints=np.array(joints).reshape(-1, m.dof),
        actions=actions,
        model=m,
        fps=demo.fps,
        label_table=dict(demo.label_table),
        segments=segments,
        provenance=provenance,
        plan=plan,
        source_frames=source_frames,
        frame_kinds=kinds,
    )


@dataclass
class AttemptResult:
    attempt: int
    demo_id: str
    ok: bool
    reason: str = ""
    demo: Optional[EditedDemo] = None
    payload: object = None


@dataclass
class PipelineResult:
    demos: List[EditedDemo]
    attempts: List[AttemptResult]
    requested: int

    @property
    def successes(self) -> List[AttemptResult]:
        return [a for a in self.attempts if a.ok]

    @property
    def failures(self) -> List[AttemptResult]:
        return [a for a in self.attempts if not a.ok]

    @property
    def shortfall(self) -> int:
        return self.requested - len(self.successes)


_WORKER: dict = {}


def _init_worker(ctx: EditContext, sink) -> None:
    _WORKER["ctx"] = ctx
    _WORKER["sink"] = sink


def _run_attempt(attempt: int) -> AttemptResult:
    ctx: EditContext = _WORKER["ctx"]
    sink = _WORKER["sink"]
    demo_id = f"{ctx.demo.demo_id}_edit{attempt:03d}"
    try:
        plan = sample_plan(ctx, attempt)
        edited = edit_demo(ctx, plan, demo_id)
    except (EditError, IKError) as exc:
        return AttemptResult(attempt, demo_id, False, str(exc))
    if sink is not None:
        return AttemptResult(attempt, demo_id, True, payload=sink(edited))
    return AttemptResult(attempt, demo_id, True, demo=edited)


def run_edit_pipeline(
    demo: DemoRecording,
    segspec: Optional[SegmentSpec] = None,
    config: Optional[PipelineConfig] = None,
    model: Optional[KinematicModel] = None,
    count: Optional[int] = None,
    transforms: Optional[Dict[int, RigidTransform]] = None,
    workers: int = 1,
    sink: Optional[Callable[[EditedDemo], object]] = None,
    context: Optional[EditContext] = None,
) -> PipelineResult:
    """Generate ``count`` edited demos.

    Attempt ``a`` samples its plan from seed ``config.seed + a``. Attempts run
    in batches sized to the remaining shortfall and are accepted in attempt
    order, so the output does not depend on ``workers``. With a ``sink`` each
    edited demo is handed over (inside the worker) instead of being returned.
    Raises ``GenerationShortfall`` when the budget of ``attempt_factor *
    count`` attempts runs out.
    """
    config = config or PipelineConfig()
    n = config.count if count is None else int(count)
    if n < 1:
        raise ValueError("count must be >= 1")
    ctx = context or build_context(demo, config, segspec, model, transforms)
    budget = config.attempt_factor * n
    attempts: List[AttemptResult] = []
    demos: List[EditedDemo] = []
    next_attempt = 0
    pool = None
    if workers > 1:
        pool = ProcessPoolExecutor(
            max_workers=workers,
            mp_context=multiprocessing.get_context("fork"),
            initializer=_init_worker,
            initargs=(ctx, sink),
        )
    else:
        _init_worker(ctx, sink)
    try:
        while len([a for a in attempts if a.ok]) < n and next_attempt < budget:
            need = n - len([a for a in attempts if a.ok])
            batch = list(range(next_attempt, min(next_attempt + need, budget)))
            next_attempt = batch[-1] + 1
            results = list(pool.map(_run_attempt, batch)) if pool else [_run_attempt(a) for a in batch]
            for r in results:
                attempts.append(r)
                if r.ok:
                    log.info("attempt %d: ok (%s)", r.attempt, r.demo_id)
                    if r.demo is not None:
                        demos.append(r.demo)
                else:
                    log.warning("attempt %d: skipped: %s", r.attempt, r.reason)
    finally:
        if pool is not None:
            pool.shutdown()
        _WORKER.clear()
    result = PipelineResult(demos, attempts, n)
    if result.shortfall > 0:
        raise GenerationShortfall(
            f"only {len(result.successes)} of {n} edits succeeded in {len(attempts)} attempts", result
        )
    return result
