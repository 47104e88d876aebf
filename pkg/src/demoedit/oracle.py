"""Synthetic tabletop scene that produces ground-truth demonstrations.

A 7-joint desk-scale arm picks a box and places it on a cylinder, observed by a
static head camera and a wrist camera. Depth is rasterized from the analytic
primitives, so every value has a closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .dataset import DemoRecording, ViewStream
from .geometry import CameraIntrinsics, DepthMap, RigidTransform, compose, interpolate, invert, planar_transform
from .kinematics import EndEffectorAction, KinematicModel, end_effector_pose, inverse_kinematics, load_model
from .meshes import box_mesh, cylinder_mesh, quad_mesh
from .pointcloud import BACKGROUND, ROBOT, TABLE, Plane, is_robot
from .render import render_triangles_depth

ARM = "right"
LINK_LENGTHS = (0.1, 0.3, 0.05, 0.3, 0.05, 0.1, 0.05)
JOINT_AXES = ("0 0 1", "0 1 0", "0 0 1", "0 1 0", "0 0 1", "0 1 0", "0 0 1")
JOINT_LIMITS = ((-2.9, 2.9), (-2.0, 2.0), (-2.9, 2.9), (-2.6, 2.6), (-2.9, 2.9), (-2.2, 2.2), (-2.9, 2.9))
BASE_HEIGHT = 0.05
FINGER_LENGTH = 0.08
PALM_THICKNESS = 0.02
EDGE_CONFIDENCE = 0.2
EDGE_JUMP = 0.02
EDGE_BAND = 2


def _arm_description() -> str:
    parts = ['<robot name="oracle_arm">', '  <link name="base"/>']
    names = ["base"] + [f"link{i}" for i in range(1, 8)]
    for n in names[1:]:
        parts.append(f'  <link name="{n}"/>')
    palm = f"0.05 0.09 {PALM_THICKNESS}"
    parts.append(
        f'  <link name="gripper"><visual><origin xyz="0 0 {PALM_THICKNESS / 2}"/>'
        f'<geometry><box size="{palm}"/></geometry></visual></link>'
    )
    for side in ("left", "right"):
        parts.append(
            f'  <link name="finger_{side}"><visual><origin xyz="0 0 {FINGER_LENGTH / 2}"/>'
            f'<geometry><box size="0.02 0.012 {FINGER_LENGTH}"/></geometry></visual></link>'
        )
    offsets = (BASE_HEIGHT,) + LINK_LENGTHS[:-1]
    for i in range(7):
        lo, hi = JOINT_LIMITS[i]
        parts.append(
            f'  <joint name="joint{i + 1}" type="revolute"><parent link="{names[i]}"/>'
            f'<child link="{names[i + 1]}"/><origin xyz="0 0 {offsets[i]}"/>'
            f'<axis xyz="{JOINT_AXES[i]}"/><limit lower="{lo}" upper="{hi}"/></joint>'
        )
    parts.append(
        f'  <joint name="flange" type="fixed"><parent link="link7"/><child link="gripper"/>'
        f'<origin xyz="0 0 {LINK_LENGTHS[-1]}"/></joint>'
    )
    for side, y in (("left", 0.036), ("right", -0.036)):
        parts.append(
            f'  <joint name="finger_{side}_mount" type="fixed"><parent link="gripper"/>'
            f'<child link="finger_{side}"/><origin xyz="0 {y} {PALM_THICKNESS}"/></joint>'
        )
    parts.append("</robot>")
    return "\n".join(parts)


def synthetic_arm(proxy_radius: float = 0.035) -> KinematicModel:
    """Seven revolute joints (z, y, z, y, z, y, z) with capsule links and a two-finger gripper."""
    return load_model(_arm_description(), {ARM: "gripper"}, proxy_radius=proxy_radius)


@dataclass(frozen=True)
class OracleObject:
    """Box or cylinder whose pose frame sits at the center of its bottom face."""

    object_id: int
    name: str
    shape: str
    dims: Tuple[float, ...]  # box (sx, sy, sz); cylinder (radius, height)
    pose: RigidTransform

    @property
    def height(self) -> float:
        return self.dims[2] if self.shape == "box" else self.dims[1]

    def local_mesh(self) -> np.ndarray:
        h = self.height
        if self.shape == "box":
            return box_mesh(self.dims, (0.0, 0.0, h / 2))
        if self.shape == "cylinder":
            return cylinder_mesh(self.dims[0], h, (0.0, 0.0, h / 2))
        raise ValueError(f"unknown primitive {self.shape!r}")

    def mesh(self, pose: Optional[RigidTransform] = None) -> np.ndarray:
        p = self.pose if pose is None else pose
        return self.local_mesh() @ p.rotation_matrix().T + p.translation

    def center(self, pose: Optional[RigidTransform] = None) -> np.ndarray:
        p = self.pose if pose is None else pose
        return p.apply(np.array([0.0, 0.0, self.height / 2]))


@dataclass(frozen=True)
class OracleCamera:
    view_id: str
    intrinsics: CameraIntrinsics
    mount: str
    offset: RigidTransform  # camera-to-base for head, camera-to-EE for wrist

    def pose(self, ee_pose: RigidTransform) -> RigidTransform:
        return compose(ee_pose, self.offset) if self.mount.startswith("wrist:") else self.offset


@dataclass(frozen=True)
class OracleScene:
    robot: KinematicModel
    objects: Tuple[OracleObject, ...]
    cameras: Tuple[OracleCamera, ...]
    table: Plane = field(default_factory=lambda: Plane(np.array([0.0, 0.0, 1.0, 0.0]), 0, 0.0))
    table_extent: Tuple[float, float, float, float] = (-1.0, 1.6, -1.2, 1.2)
    home: Tuple[float, ...] = (0.0, 0.1, 0.0, 1.5, 0.0, 1.55, 0.0)
    background_scale: float = 0.9
    fps: float = 15.0

    def object(self, object_id: int) -> OracleObject:
        for o in self.objects:
            if o.object_id == object_id:
                return o
        raise KeyError(f"no object {object_id}")

    def table_mesh(self) -> np.ndarray:
        x0, x1, y0, y1 = self.table_extent
        return quad_mesh([(x0, y0, 0.0), (x1, y0, 0.0), (x1, y1, 0.0), (x0, y1, 0.0)])

    def label_table(self) -> Dict[int, str]:
        table = {BACKGROUND: "background", TABLE: "table", ROBOT: "robot"}
        table.update({o.object_id: o.name for o in self.objects})
        return dict(sorted(table.items()))

    def with_object_pose(self, object_id: int, pose: RigidTransform) -> "OracleScene":
        objs = tuple(replace(o, pose=pose) if o.object_id == object_id else o for o in self.objects)
        return replace(self, objects=objs)


def pickplace_scene(width: int = 320, height: int = 240) -> OracleScene:
    robot = synthetic_arm()
    cube = OracleObject(2, "cube", "box", (0.04, 0.04, 0.05), RigidTransform.from_translation(0.4, -0.15, 0.0))
    basket = OracleObject(3, "basket", "cylinder", (0.06, 0.05), RigidTransform.from_translation(0.4, 0.2, 0.0))
    sx = width / 320.0
    head = OracleCamera(
        "head",
        CameraIntrinsics(300.0 * sx, 300.0 * sx, (width - 1) / 2, (height - 1) / 2, width, height),
        "head",
        RigidTransform.look_at((1.0, 0.0, 0.8), (0.35, 0.0, 0.05)),
    )
    wrist = OracleCamera(
        "wrist",
        CameraIntrinsics(160.0 * sx, 160.0 * sx, (width - 1) / 2, (height - 1) / 2, width, height),
        f"wrist:{ARM}",
        RigidTransform.from_axis_angle((0.0, 1.0, 0.0), math.radians(-15.0), (0.08, 0.0, -0.01)),
    )
    return OracleScene(robot, (cube, basket), (head, wrist))


@dataclass(frozen=True)
class Phase:
    kind: str  # "motion" or "skill"
    start: int
    end: int
    keyframes: Tuple[Tuple[str, float], ...] = ()  # skill: (waypoint name, gripper) per key
    attached: Tuple[int, ...] = ()
    anchor: Optional[int] = None


@dataclass(frozen=True)
class PickPlaceScript:
    """Pick ``object_id`` and put it on ``target_id`` in four phases."""

    object_id: int = 2
    target_id: int = 3
    frames: int = 60
    approach: float = 0.10
    lift: float = 0.12
    grasp_depth: float = 0.045  # how far the fingertips reach below the object's top

    def phases(self) -> List[Phase]:
        f = self.frames
        if f == 0:
            return []
        if f < 12:
            raise ValueError("pick-and-place needs at least 12 frames")
        b = [0, round(f * 0.2), round(f * 0.5), round(f * 0.75), f]
        return [
            Phase("motion", b[0], b[1]),
            Phase(
                "skill", b[1], b[2],
                (("pregrasp", 1.0), ("grasp", 1.0), ("grasp", 0.0), ("lift", 0.0)),
                anchor=self.object_id,
            ),
            Phase("motion", b[2], b[3], attached=(self.object_id,)),
            Phase(
                "skill", b[3], b[4],
                (("preplace", 0.0), ("place", 0.0), ("place", 1.0), ("retreat", 1.0)),
                attached=(self.object_id,),
                anchor=self.target_id,
            ),
        ]

    def segments(self) -> List[dict]:
        return [
            {
                "kind": p.kind,
                "start": p.start,
                "end": p.end,
                "arm": ARM,
                "attached": list(p.attached),
                "anchor": p.anchor,
            }
            for p in self.phases()
        ]

    def waypoints(self, scene: OracleScene, edits: Optional[Dict[int, RigidTransform]] = None) -> Dict[str, RigidTransform]:
        """EE targets, each defined relative to the object it refers to."""
        edits = edits or {}
        # tool z points down; tool x points toward -x of the base, matching the home pose
        down = RigidTransform.from_axis_angle((0.0, 1.0, 0.0), math.pi)
        tip = PALM_THICKNESS + FINGER_LENGTH

        def rel(obj: OracleObject, z: float) -> RigidTransform:
            wp = compose(obj.pose, RigidTransform(down.rotation, (0.0, 0.0, z)))
            edit = edits.get(obj.object_id)
            return wp if edit is None else compose(edit, wp)

        src = scene.object(self.object_id)
        dst = scene.object(self.target_id)
        grasp_z = src.height - self.grasp_depth + tip
        place_z = dst.height + src.height - self.grasp_depth + tip + 0.002
        return {
            "pregrasp": rel(src, grasp_z + self.approach),
            "grasp": rel(src, grasp_z),
            "lift": rel(src, grasp_z + self.lift),
            "preplace": rel(dst, place_z + self.approach),
            "place": rel(dst, place_z),
            "retreat": rel(dst, place_z + self.approach),
        }


@dataclass
class GroundTruth:
    """In-memory extras the on-disk format does not carry."""

    link_masks: Dict[str, List[np.ndarray]]  # per-link labels (128 + k)
    object_poses: Dict[int, List[RigidTransform]]
    phases: List[Phase]
    commanded: List[bool]  # True where the action is a commanded target


def _skill_targets(phase: Phase, wp: Dict[str, RigidTransform]) -> List[Tuple[RigidTransform, float]]:
    """Per-frame targets moving between consecutive keyframes at uniform speed."""
    keys = phase.keyframes
    n = phase.end - phase.start
    segs = len(keys) - 1
    out = []
    for i in range(n):
        x = i * segs / (n - 1) if n > 1 else 0.0
        j = min(int(math.floor(x)), segs - 1)
        s = x - j
        (a, ga), (b, gb) = keys[j], keys[j + 1]
        if s <= 0.0:
            out.append((wp[a], ga))
        elif s >= 1.0:
            out.append((wp[b], gb))
        else:
            out.append((interpolate(wp[a], wp[b], s), gb if ga != gb and s >= 0.5 else ga))
    return out


def _confidence(depth: np.ndarray) -> np.ndarray:
    """1.0 on smooth surfaces, lower within a few pixels of a depth discontinuity, 0 where invalid."""
    valid = np.isfinite(depth)
    d = np.pad(np.where(valid, depth, 0.0), 1, mode="edge")
    v = np.pad(valid, 1, mode="edge")
    h, w = depth.shape
    edge = np.zeros((h, w), dtype=bool)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            nd = d[dy : dy + h, dx : dx + w]
            nv = v[dy : dy + h, dx : dx + w]
            edge |= (nv != valid) | (valid & nv & (np.abs(nd - depth) > EDGE_JUMP))
    band = ndimage.binary_dilation(edge, iterations=EDGE_BAND, structure=np.ones((3, 3), dtype=bool))
    conf = np.where(band, EDGE_CONFIDENCE, 1.0)
    conf[~valid] = 0.0
    return conf


def render_scene(
    scene: OracleScene,
    q,
    object_poses: Dict[int, RigidTransform],
    camera: RigidTransform,
    k: CameraIntrinsics,
    include_robot: bool = True,
    include_objects: bool = True,
) -> Tuple[DepthMap, np.ndarray]:
    """Depth and per-pixel labels (robot pixels carry per-link ids)."""
    tris = [scene.table_mesh()]
    ids = [np.full(2, TABLE)]
    if include_objects:
        for o in scene.objects:
            m = o.mesh(object_poses[o.object_id])
            tris.append(m)
            ids.append(np.full(len(m), o.object_id))
    if include_robot:
        rt, owner = scene.robot.posed_mesh(q)
        tris.append(rt)
        ids.append(128 + owner)
    return render_triangles_depth(np.concatenate(tris), camera, k, np.concatenate(ids))


def simulate_demo(
    scene: OracleScene,
    script: Optional[PickPlaceScript],
    frames: Optional[int] = None,
    edits: Optional[Dict[int, RigidTransform]] = None,
    demo_id: str = "oracle",
    _seed_joints: Optional[np.ndarray] = None,
) -> Tuple[DemoRecording, GroundTruth]:
    """Run the scripted task and render every frame.

    ``edits`` pre-transforms objects (and the waypoints they anchor).
    """
    edits = {k: v for k, v in (edits or {}).items() if not v.is_identity()}
    robot = scene.robot
    home = np.array(scene.home, dtype=np.float64)
    idle = script is None
    if idle:
        script = PickPlaceScript(frames=frames or 0)
    elif frames is not None and frames != script.frames:
        script = replace(script, frames=frames)
    n = script.frames
    phases = [] if idle else script.phases()
    wp = script.waypoints(scene, edits)
    poses0 = {o.object_id: compose(edits.get(o.object_id, RigidTransform()), o.pose) for o in scene.objects}

    joints = np.zeros((max(n, 1), robot.dof))
    targets: List[Optional[Tuple[RigidTransform, float]]] = [None] * max(n, 1)
    joints[:] = home
    if not phases:
        # static scene held at the home configuration
        n = max(n, 1)
        targets[:] = [(end_effector_pose(robot, home, ARM), 1.0)] * len(targets)
    q_prev = home.copy()
    for pi, ph in enumerate(phases):
        if ph.kind == "skill":
            seed = _seed_joints[ph.start] if _seed_joints is not None else q_prev
            seq = _skill_targets(ph, wp)
            q = seed.copy()
            for i, tgt in enumerate(seq):
                q = inverse_kinematics(robot, tgt[0], ARM, q)
                joints[ph.start + i] = q
                targets[ph.start + i] = tgt
            q_prev = q
        else:
            nxt = phases[pi + 1] if pi + 1 < len(phases) else None
            if nxt is None:
                end_q, end_tgt = q_prev, None
            else:
                first = _skill_targets(nxt, wp)[0]
                seed = _seed_joints[nxt.start] if _seed_joints is not None else q_prev
                end_q = inverse_kinematics(robot, first[0], ARM, seed)
                end_tgt = first
            cnt = ph.end - ph.start
            start_tgt = targets[ph.start - 1] if ph.start > 0 else None
            for i in range(cnt):
                s = i / (cnt - 1) if cnt > 1 else 1.0
                joints[ph.start + i] = (1 - s) * q_prev + s * end_q
            grip_a = start_tgt[1] if start_tgt else 1.0
            grip_b = end_tgt[1] if end_tgt else grip_a
            for i in range(cnt):
                t = ph.start + i
                if i == 0 and start_tgt is not None:
                    targets[t] = start_tgt
                elif i == cnt - 1 and end_tgt is not None:
                    targets[t] = end_tgt
                else:
                    s = i / (cnt - 1) if cnt > 1 else 1.0
                    targets[t] = (end_effector_pose(robot, joints[t], ARM), grip_a if s < 1 else grip_b)
            q_prev = end_q
    commanded = [False] * n
    for ph in phases:
        for t in range(ph.start, ph.end):
            commanded[t] = ph.kind == "skill"

    # object poses: carried rigidly between grasp and release
    obj_poses = {oid: [p] * n for oid, p in poses0.items()}
    held = script.object_id if phases else None
    grasp_t = release_t = None
    if phases:
        for t in range(1, n):
            if targets[t - 1][1] > 0.5 and targets[t][1] <= 0.5 and grasp_t is None:
                grasp_t = t
            if grasp_t is not None and targets[t - 1][1] <= 0.5 and targets[t][1] > 0.5:
                release_t = t
                break
    if held is not None and grasp_t is not None:
        ee_grasp = end_effector_pose(robot, joints[grasp_t], ARM)
        rel = compose(invert(ee_grasp), poses0[held])
        stop = release_t if release_t is not None else n
        seq = obj_poses[held]
        for t in range(grasp_t, stop):
            seq[t] = compose(end_effector_pose(robot, joints[t], ARM), rel)
        for t in range(stop, n):
            seq[t] = seq[stop - 1]

    views = []
    link_masks: Dict[str, List[np.ndarray]] = {}
    for cam in scene.cameras:
        stream = ViewStream(cam.view_id, cam.intrinsics, cam.mount, confidences=[])
        link_masks[cam.view_id] = []
        for t in range(n):
            ee = end_effector_pose(robot, joints[t], ARM)
            pose = cam.pose(ee)
            depth, labels = render_scene(scene, joints[t], {o: s[t] for o, s in obj_poses.items()}, pose, cam.intrinsics)
            labels = labels.astype(np.uint8)
            labels[~depth.valid] = BACKGROUND
            link_masks[cam.view_id].append(labels)
            mask = np.where(is_robot(labels), ROBOT, labels).astype(np.uint8)
            stream.depths.append(depth)
            stream.poses.append(pose)
            stream.masks.append(mask)
            stream.confidences.append(_confidence(depth.values))
        views.append(stream)

    background = {}
    for cam in scene.cameras:
        if cam.mount != "head":
            continue
        depth, labels = render_scene(scene, home, {}, cam.pose(RigidTransform()), cam.intrinsics, False, False)
        scaled = DepthMap(depth.values * scene.background_scale)
        background[cam.view_id] = (scaled, np.where(depth.valid, labels, BACKGROUND).astype(np.uint8))

    actions = {ARM: [EndEffectorAction(tgt[0], tgt[1]) for tgt in targets[:n]]}
    demo = DemoRecording(
        demo_id=demo_id,
        views=views,
        joints=joints[:n].copy(),
        actions=actions,
        model=robot,
        fps=scene.fps,
        label_table=scene.label_table(),
        background=background,
        segments=[] if idle else script.segments(),
    )
    gt = GroundTruth(link_masks, obj_poses, phases, commanded)
    return demo, gt


def resimulate_with_edit(
    scene: OracleScene,
    script: PickPlaceScript,
    edits,
    demo_id: str = "oracle",
    source: Optional[DemoRecording] = None,
) -> Tuple[DemoRecording, GroundTruth]:
    """Simulate the task again with objects moved by ``edits`` before it starts.

    ``edits`` is a mapping object id -> transform, or a single transform applied
    to the picked object. Skill-phase IK starts from the unedited run's joints
    at each phase start, mirroring how an edit of the recorded demo seeds it;
    pass the unedited ``source`` run to skip simulating it again.
    """
    if isinstance(edits, RigidTransform):
        edits = {script.object_id: edits}
    edits = {k: v for k, v in edits.items() if not v.is_identity()}
    if not edits:
        return simulate_demo(scene, script, demo_id=demo_id)
    if source is None:
        source, _ = simulate_demo(scene, script)
    return simulate_demo(scene, script, edits=edits, demo_id=demo_id, _seed_joints=source.joints)


def object_edit(center, dx: float, dy: float, yaw: float) -> RigidTransform:
    """Planar edit: rotate by ``yaw`` about the vertical through ``center``, then shift."""
    return planar_transform(center, dx, dy, yaw)
