"""Kinematic tree loading, forward/inverse kinematics and robot point labeling."""

from __future__ import annotations

import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from .geometry import RigidTransform, matrix_to_quat, rotation_vector
from .meshes import box_mesh, capsule_mesh, cylinder_mesh, point_triangle_distance, read_mesh, write_obj
from .pointcloud import BACKGROUND, LabeledPointCloud, is_robot, link_label, ROBOT_LINK_BASE

log = logging.getLogger(__name__)

JOINT_TYPES = ("revolute", "prismatic", "fixed")
ARMS = ("left", "right")
DAMPING_FADE = 0.01  # residual below which DLS damping scales down


class ModelError(ValueError):
    """Malformed or unsupported kinematic description."""


class IKError(RuntimeError):
    """Inverse kinematics did not converge."""

    def __init__(self, message: str, residual: float, best: np.ndarray):
        super().__init__(message)
        self.residual = residual
        self.best = best


@dataclass(frozen=True)
class Joint:
    name: str
    kind: str = "fixed"
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    lower: float = 0.0
    upper: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in JOINT_TYPES:
            raise ModelError(f"joint {self.name!r}: unsupported type {self.kind!r}")
        axis = np.asarray(self.axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if n < 1e-12:
            raise ModelError(f"joint {self.name!r}: zero axis")
        object.__setattr__(self, "axis", axis / n)
        if self.lower > self.upper:
            raise ModelError(f"joint {self.name!r}: lower limit above upper limit")


@dataclass(frozen=True)
class Link:
    """One rigid body. ``origin_xyz``/``origin_rpy`` place the joint frame in the parent link frame."""

    name: str
    parent: int
    joint: Joint
    origin_xyz: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    origin_rpy: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    mesh: np.ndarray = field(default_factory=lambda: np.zeros((0, 3, 3)))

    @property
    def origin(self) -> RigidTransform:
        return RigidTransform.from_rpy(self.origin_rpy, self.origin_xyz)


@dataclass
class JointState:
    values: np.ndarray
    index: int = 0


@dataclass(frozen=True)
class EndEffectorAction:
    pose: RigidTransform
    gripper: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.gripper <= 1.0:
            raise ValueError(f"gripper value {self.gripper} outside [0, 1]")


def _values(q) -> np.ndarray:
    if isinstance(q, JointState):
        q = q.values
    return np.asarray(q, dtype=np.float64)


def _axis_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    C = 1 - c
    return np.array(
        [
            [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
        ]
    )


class KinematicModel:
    """Immutable link tree. Links are stored parents-first; q follows link order."""

    def __init__(self, links: Sequence[Link], end_effectors: Optional[Mapping[str, Union[str, int]]] = None, name: str = "robot"):
        self.name = name
        self.links: Tuple[Link, ...] = tuple(links)
        if not self.links:
            raise ModelError("model has no links")
        names = [l.name for l in self.links]
        if len(set(names)) != len(names):
            raise ModelError("duplicate link names")
        if self.links[0].parent != -1:
            raise ModelError("first link must be the root")
        for i, l in enumerate(self.links[1:], start=1):
            if not 0 <= l.parent < i:
                raise ModelError(f"link {l.name!r}: parent must precede it")
        if len(self.links) > 127:
            raise ModelError("too many links for the label encoding")
        self.index = {n: i for i, n in enumerate(names)}
        self.movable = [i for i, l in enumerate(self.links) if l.joint.kind != "fixed" and l.parent >= 0]
        self.q_index = {li: qi for qi, li in enumerate(self.movable)}
        self.joint_names = [self.links[i].joint.name for i in self.movable]
        self.lower = np.array([self.links[i].joint.lower for i in self.movable])
        self.upper = np.array([self.links[i].joint.upper for i in self.movable])
        self.children: List[List[int]] = [[] for _ in self.links]
        for i, l in enumerate(self.links):
            if l.parent >= 0:
                self.children[l.parent].append(i)
        self.end_effectors: Dict[str, int] = {}
        for arm, ref in (end_effectors or {}).items():
            idx = self.index[ref] if isinstance(ref, str) else int(ref)
            if not 0 <= idx < len(self.links):
                raise ModelError(f"end effector {ref!r} is not a link")
            self.end_effectors[arm] = idx
        self._origins = np.stack([l.origin.matrix() for l in self.links])
        self._distance_cache: Dict[int, tuple] = {}

    @property
    def dof(self) -> int:
        return len(self.movable)

    def link_names(self) -> List[str]:
        return [l.name for l in self.links]

    def ee_link(self, arm: str) -> int:
        try:
            return self.end_effectors[arm]
        except KeyError:
            raise KeyError(f"unknown arm {arm!r}; model has {sorted(self.end_effectors)}") from None

    def ee_group(self, arm: str) -> List[int]:
        """End-effector link and every descendant attached through fixed joints."""
        root = self.ee_link(arm)
        out, stack = [], [root]
        while stack:
            i = stack.pop()
            out.append(i)
            stack.extend(c for c in self.children[i] if self.links[c].joint.kind == "fixed")
        return sorted(out)

    def chain(self, link: int) -> List[int]:
        """Movable link indices from the root to ``link`` inclusive."""
        out = []
        while link >= 0:
            if link in self.q_index:
                out.append(link)
            link = self.links[link].parent
        return out[::-1]

    def arm_joint_indices(self, arm: str) -> List[int]:
        return [self.q_index[i] for i in self.chain(self.ee_link(arm))]

    def clamp(self, q) -> np.ndarray:
        return np.clip(_values(q), self.lower, self.upper)

    def limit_violations(self, q, tol: float = 1e-9) -> List[str]:
        q = _values(q)
        bad = np.flatnonzero((q < self.lower - tol) | (q > self.upper + tol))
        return [self.joint_names[i] for i in bad]

    def fk_matrices(self, q, base: Optional[np.ndarray] = None) -> np.ndarray:
        q = _values(q)
        if q.shape != (self.dof,):
            raise ValueError(f"expected {self.dof} joint values, got {q.shape}")
        out = np.empty((len(self.links), 4, 4))
        out[0] = np.eye(4) if base is None else base
        for i in range(1, len(self.links)):
            l = self.links[i]
            m = out[l.parent] @ self._origins[i]
            qi = self.q_index.get(i)
            if qi is not None:
                if l.joint.kind == "revolute":
                    m[:3, :3] = m[:3, :3] @ _axis_rotation(l.joint.axis, q[qi])
                else:
                    m[:3, 3] += m[:3, :3] @ (l.joint.axis * q[qi])
            out[i] = m
        if base is None:
            out[0] = np.eye(4)
        return out

    def posed_mesh(self, q, links: Optional[Sequence[int]] = None) -> Tuple[np.ndarray, np.ndarray]:
        """All link triangles in the base frame plus the owning link index per triangle."""
        mats = self.fk_matrices(q)
        tris, owner = [], []
        for i in (range(len(self.links)) if links is None else links):
            mesh = self.links[i].mesh
            if len(mesh) == 0:
                continue
            m = mats[i]
            tris.append(mesh @ m[:3, :3].T + m[:3, 3])
            owner.append(np.full(len(mesh), i))
        if not tris:
            return np.zeros((0, 3, 3)), np.zeros(0, dtype=int)
        return np.concatenate(tris), np.concatenate(owner)

    def _distance_index(self, link: int):
        cached = self._distance_cache.get(link)
        if cached is None:
            mesh = self.links[link].mesh
            cent = mesh.mean(axis=1)
            reach = float(np.max(np.linalg.norm(mesh - cent[:, None, :], axis=2)))
            verts = mesh.reshape(-1, 3)
            center = verts.mean(axis=0)
            bound = float(np.max(np.linalg.norm(verts - center, axis=1)))
            cached = (cKDTree(cent), reach, center, bound)
            self._distance_cache[link] = cached
        return cached


def forward_kinematics(m: KinematicModel, q, base: Optional[RigidTransform] = None) -> List[RigidTransform]:
    """Base-frame pose of every link."""
    mats = m.fk_matrices(q, None if base is None else base.matrix())
    return [RigidTransform.from_matrix(x) for x in mats]


def end_effector_pose(m: KinematicModel, q, arm: str) -> RigidTransform:
    idx = m.ee_link(arm)
    return RigidTransform.from_matrix(m.fk_matrices(q)[idx])


def pose_error(current: np.ndarray, target: RigidTransform) -> np.ndarray:
    """6-vector (position, rotation vector) taking ``current`` (4x4) to ``target``."""
    dp = target.translation - current[:3, 3]
    r = target.rotation_matrix() @ current[:3, :3].T
    dr = rotation_vector(matrix_to_quat(r))
    return np.concatenate([dp, dr])


def _jacobian(m: KinematicModel, mats: np.ndarray, ee: int, chain: Sequence[int]) -> np.ndarray:
    idx = np.asarray(chain, dtype=int)
    local = np.array([m.links[i].joint.axis for i in chain], dtype=np.float64).reshape(-1, 3)
    rev = np.array([m.links[i].joint.kind == "revolute" for i in chain], dtype=bool)[:, None]
    # joint frames are taken after their motion; axis and origin are unchanged by it
    axes = np.einsum("nij,nj->ni", mats[idx, :3, :3], local)
    r = mats[ee, :3, 3] - mats[idx, :3, 3]
    cross = axes[:, [1, 2, 0]] * r[:, [2, 0, 1]] - axes[:, [2, 0, 1]] * r[:, [1, 2, 0]]
    lin = np.where(rev, cross, axes)
    ang = np.where(rev, axes, 0.0)
    return np.vstack([lin.T, ang.T])


def inverse_kinematics(
    m: KinematicModel,
    target: RigidTransform,
    arm: str,
    seed,
    damping: float = 0.05,
    max_step: float = 0.2,
    tol: float = 1e-5,
    max_iter: int = 200,
    restarts: int = 2,
    global_restarts: int = 8,
) -> np.ndarray:
    """Damped least-squares IK on the 6-D pose error, iterates clamped to limits.

    Only the joints on the arm's chain move. After the seed, ``restarts``
    attempts start near the seed and ``global_restarts`` anywhere within the
    limits (fixed RNG, so results are reproducible). Raises ``IKError``
    carrying the best residual if no attempt converges.
    """
    ee = m.ee_link(arm)
    chain = m.chain(ee)
    cols = np.array([m.q_index[i] for i in chain], dtype=int)
    seed = m.clamp(seed).copy()
    best_res, best_q = math.inf, seed.copy()
    rng = np.random.default_rng(0)
    for attempt in range(restarts + global_restarts + 1):
        q = seed.copy()
        if attempt > restarts:
            q[cols] = rng.uniform(m.lower[cols], m.upper[cols])
        elif attempt:
            span = (m.upper - m.lower)[cols]
            q[cols] = np.clip(q[cols] + rng.uniform(-0.25, 0.25, len(cols)) * np.minimum(span, 2.0), m.lower[cols], m.upper[cols])
        for _ in range(max_iter + 1):
            mats = m.fk_matrices(q)
            err = pose_error(mats[ee], target)
            res = float(np.linalg.norm(err))
            if res < best_res:
                best_res, best_q = res, q.copy()
            if res < tol:
                return q
            J = _jacobian(m, mats, ee, chain)
            # damping fades with the residual so near-singular poses still converge
            lam2 = (damping * min(1.0, res / DAMPING_FADE)) ** 2
            dq = J.T @ np.linalg.solve(J @ J.T + lam2 * np.eye(6), err)
            big = np.max(np.abs(dq))
            if big > max_step:
                dq *= max_step / big
            q[cols] = np.clip(q[cols] + dq, m.lower[cols], m.upper[cols])
    raise IKError(f"IK for arm {arm!r} did not converge (residual {best_res:.3g})", best_res, best_q)


def label_robot_points(
    m: KinematicModel,
    q,
    cloud: LabeledPointCloud,
    threshold: float = 0.03,
) -> LabeledPointCloud:
    """Assign each robot point to its nearest posed link surface.

    Points farther than ``threshold`` from every link become background.
    Non-robot points are untouched.
    """
    robot = np.flatnonzero(is_robot(cloud.labels))
    if robot.size == 0:
        return cloud
    pts = cloud.points[robot]
    mats = m.fk_matrices(q)
    best = np.full(len(pts), np.inf)
    owner = np.full(len(pts), -1)
    for li, link in enumerate(m.links):
        if len(link.mesh) == 0:
            continue
        tree, reach, center, bound = m._distance_index(li)
        R, t = mats[li][:3, :3], mats[li][:3, 3]
        local = (pts - t) @ R
        near = np.flatnonzero(np.linalg.norm(local - center, axis=1) <= bound + threshold)
        if near.size == 0:
            continue
        cand = tree.query_ball_point(local[near], r=threshold + reach)
        lens = np.fromiter((len(c) for c in cand), dtype=int, count=len(cand))
        if lens.sum() == 0:
            continue
        pi = np.repeat(near, lens)
        ti = np.concatenate([np.asarray(c, dtype=int) for c in cand if c])
        d = point_triangle_distance(local[pi], link.mesh[ti])
        dmin = np.full(len(pts), np.inf)
        np.minimum.at(dmin, pi, d)
        better = dmin < best
        best[better] = dmin[better]
        owner[better] = li
    labels = cloud.labels.copy()
    new = np.where(best <= threshold, ROBOT_LINK_BASE + owner, BACKGROUND)
    labels[robot] = new
    return cloud.with_labels(labels)


def split_end_effector(cloud: LabeledPointCloud, m: KinematicModel, arm: str) -> Tuple[LabeledPointCloud, LabeledPointCloud]:
    """Partition robot points into (end-effector group, everything else robot)."""
    group = [link_label(i) for i in m.ee_group(arm)]
    robot = is_robot(cloud.labels)
    ee = robot & np.isin(cloud.labels, group)
    return cloud.select(ee), cloud.select(robot & ~ee)


# ----------------------------------------------------------------------------
# robot description files


def _floats(text: Optional[str], default, n: int = 3) -> Tuple[float, ...]:
    if text is None:
        return tuple(default)
    vals = tuple(float(x) for x in text.split())
    if len(vals) != n:
        raise ModelError(f"expected {n} numbers, got {text!r}")
    return vals


def _visual_mesh(visual: ET.Element, base_dir: Optional[Path]) -> np.ndarray:
    geom = visual.find("geometry")
    if geom is None or len(geom) == 0:
        raise ModelError("visual without geometry")
    g = geom[0]
    if g.tag == "mesh":
        fname = g.get("filename", "")
        if fname.startswith("file://"):
            fname = fname[len("file://"):]
        path = Path(fname)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        mesh = read_mesh(path, _floats(g.get("scale"), (1.0, 1.0, 1.0)))
    elif g.tag == "box":
        mesh = box_mesh(_floats(g.get("size"), None))
    elif g.tag == "cylinder":
        mesh = cylinder_mesh(float(g.get("radius")), float(g.get("length")))
    elif g.tag == "sphere":
        mesh = capsule_mesh((0, 0, 0), (0, 0, 0), float(g.get("radius")))
    else:
        raise ModelError(f"unsupported geometry {g.tag!r}")
    origin = visual.find("origin")
    if origin is not None:
        t = RigidTransform.from_rpy(_floats(origin.get("rpy"), (0, 0, 0)), _floats(origin.get("xyz"), (0, 0, 0)))
        mesh = mesh @ t.rotation_matrix().T + t.translation
    return mesh


def load_model(
    description: str,
    end_effectors: Optional[Mapping[str, Union[str, int]]] = None,
    base_dir=None,
    proxy_radius: float = 0.04,
) -> KinematicModel:
    """Parse a robot description (XML subset: links, joints, visual meshes).

    Links without visual geometry receive capsule proxies spanning from the
    link origin to each child joint.
    """
    try:
        root = ET.fromstring(description)
    except ET.ParseError as exc:
        raise ModelError(f"description does not parse: {exc}") from None
    base_dir = None if base_dir is None else Path(base_dir)
    link_els = {el.get("name"): el for el in root.findall("link")}
    if not link_els:
        raise ModelError("no links")
    joints: Dict[str, dict] = {}
    for j in root.findall("joint"):
        kind = j.get("type")
        if kind not in JOINT_TYPES:
            raise ModelError(f"joint {j.get('name')!r}: unsupported type {kind!r}")
        parent = j.find("parent").get("link")
        child = j.find("child").get("link")
        if parent not in link_els:
            raise ModelError(f"joint {j.get('name')!r}: missing parent link {parent!r}")
        if child not in link_els:
            raise ModelError(f"joint {j.get('name')!r}: missing child link {child!r}")
        if parent == child:
            raise ModelError(f"cycle: link {child!r} is its own parent")
        if child in joints:
            raise ModelError(f"link {child!r} has more than one parent")
        origin = j.find("origin")
        axis_el = j.find("axis")
        limit = j.find("limit")
        lo, hi = 0.0, 0.0
        if kind != "fixed":
            if limit is None:
                raise ModelError(f"joint {j.get('name')!r}: missing limits")
            lo, hi = float(limit.get("lower")), float(limit.get("upper"))
        joints[child] = dict(
            parent=parent,
            joint=Joint(
                j.get("name"),
                kind,
                np.array(_floats(None if axis_el is None else axis_el.get("xyz"), (1.0, 0.0, 0.0))),
                lo,
                hi,
            ),
            xyz=_floats(None if origin is None else origin.get("xyz"), (0.0, 0.0, 0.0)),
            rpy=_floats(None if origin is None else origin.get("rpy"), (0.0, 0.0, 0.0)),
        )
    roots = [n for n in link_els if n not in joints]
    if len(roots) != 1:
        raise ModelError("cycle in link graph" if not roots else f"multiple roots: {roots}")
    children: Dict[str, List[str]] = {n: [] for n in link_els}
    for child, spec in joints.items():
        children[spec["parent"]].append(child)
    doc_order = {n: i for i, n in enumerate(link_els)}
    order, queue = [], [roots[0]]
    while queue:
        n = queue.pop(0)
        order.append(n)
        queue.extend(sorted(children[n], key=doc_order.get))
    if len(order) != len(link_els):
        raise ModelError("cycle in link graph")

    idx = {n: i for i, n in enumerate(order)}
    links = []
    for n in order:
        el = link_els[n]
        visuals = el.findall("visual")
        if visuals:
            mesh = np.concatenate([_visual_mesh(v, base_dir) for v in visuals])
        else:
            ends = [np.array(joints[c]["xyz"]) for c in children[n]] or [np.zeros(3)]
            mesh = np.concatenate([capsule_mesh(np.zeros(3), e, proxy_radius) for e in ends])
        if n == roots[0]:
            links.append(Link(n, -1, Joint(f"{n}_root"), mesh=mesh))
        else:
            spec = joints[n]
            links.append(Link(n, idx[spec["parent"]], spec["joint"], spec["xyz"], spec["rpy"], mesh))
    return KinematicModel(links, end_effectors, name=root.get("name", "robot"))


def load_model_file(path, end_effectors=None, proxy_radius: float = 0.04) -> KinematicModel:
    path = Path(path)
    return load_model(path.read_text(), end_effectors, base_dir=path.parent, proxy_radius=proxy_radius)


def _fmt(vals) -> str:
    return " ".join(repr(float(v)) for v in vals)


def save_model(m: KinematicModel, directory, filename: str = "robot.urdf") -> Path:
    """Write the model as a description file plus one OBJ mesh per link."""
    directory = Path(directory)
    (directory / "meshes").mkdir(parents=True, exist_ok=True)
    lines = [f'<robot name="{m.name}">']
    for l in m.links:
        lines.append(f'  <link name="{l.name}">')
        if len(l.mesh):
            rel = f"meshes/{l.name}.obj"
            write_obj(l.mesh, directory / rel)
            lines.append(f'    <visual><geometry><mesh filename="{rel}"/></geometry></visual>')
        lines.append("  </link>")
    for l in m.links[1:]:
        j = l.joint
        lines.append(f'  <joint name="{j.name}" type="{j.kind}">')
        lines.append(f'    <parent link="{m.links[l.parent].name}"/>')
        lines.append(f'    <child link="{l.name}"/>')
        lines.append(f'    <origin xyz="{_fmt(l.origin_xyz)}" rpy="{_fmt(l.origin_rpy)}"/>')
        if j.kind != "fixed":
            lines.append(f'    <axis xyz="{_fmt(j.axis)}"/>')
            lines.append(f'    <limit lower="{j.lower!r}" upper="{j.upper!r}"/>')
        lines.append("  </joint>")
    lines.append("</robot>")
    path = directory / filename
    path.write_text("\n".join(lines) + "\n")
    return path
