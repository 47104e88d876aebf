"""Rigid transforms, pinhole cameras and the depth-map container.

Conventions used throughout the package:

* Rotations are unit quaternions ordered (w, x, y, z).
* A ``RigidTransform`` maps points from its child frame into its parent frame:
  ``p_parent = R @ p_child + t``.
* Camera poses are camera-to-base transforms. The camera frame is +z forward,
  +x right, +y down. Pixel (u, v) is measured from the top-left corner, u to the
  right and v downward; integer pixel ``i`` has its center at ``u = i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Tuple

import numpy as np

DEFAULT_NEAR = 0.01
DEFAULT_FAR = 10.0

_RENORM_TOL = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; picks the largest diagonal term for stability."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return np.array(q)


def rotation_vector(q: np.ndarray) -> np.ndarray:
    """Axis-angle vector (angle in [0, pi]) of a unit quaternion."""
    q = np.asarray(q, dtype=np.float64)
    if q[0] < 0:
        q = -q
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-15:
        return 2.0 * v
    angle = 2.0 * math.atan2(s, q[0])
    return v / s * angle


@dataclass(frozen=True)
class RigidTransform:
    """Element of SE(3) stored as a unit quaternion and a translation in meters."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite transform")
        n = math.sqrt(float(q @ q))
        if n < 1e-12:
            raise ValueError("zero quaternion")
        # leave already-unit quaternions untouched so identity compositions stay exact
        if abs(n - 1.0) > _RENORM_TOL:
            q = q / n
        object.__setattr__(self, "rotation", _readonly(q))
        object.__setattr__(self, "translation", _readonly(t))

    # construction helpers
    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_translation(cls, x: float, y: float = 0.0, z: float = 0.0) -> "RigidTransform":
        return cls(translation=np.array([x, y, z], dtype=np.float64))

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        h = 0.5 * angle
        q = np.concatenate([[math.cos(h)], math.sin(h) * axis])
        return cls(q, translation)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        rotvec = np.asarray(rotvec, dtype=np.float64)
        angle = float(np.linalg.norm(rotvec))
        if angle < 1e-15:
            return cls(translation=translation)
        return cls.from_axis_angle(rotvec / angle, angle, translation)

    @classmethod
    def rot_z(cls, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls.from_axis_angle((0.0, 0.0, 1.0), angle, translation)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(matrix_to_quat(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_rpy(cls, rpy, xyz=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Fixed-axis roll/pitch/yaw as used by robot description files."""
        r, p, y = rpy
        rot = (
            cls.from_axis_angle((0, 0, 1), y)
            @ cls.from_axis_angle((0, 1, 0), p)
            @ cls.from_axis_angle((1, 0, 0), r)
        )
        return cls(rot.rotation, xyz)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "RigidTransform":
        """Camera-to-base pose for a camera at ``eye`` looking at ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [1.0, 0.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        m = np.eye(4)
        m[:3, :3] = np.stack([x, y, z], axis=1)
        m[:3, 3] = eye
        return cls.from_matrix(m)

    # algebra
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Map points (..., 3) from the child frame to the parent frame."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation_matrix().T + self.translation

    def apply_vector(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation_matrix().T

    def inverse(self) -> "RigidTransform":
        return invert(self)

    def angle(self) -> float:
        return float(np.linalg.norm(rotation_vector(self.rotation)))

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def as_vector(self) -> np.ndarray:
        """(qw, qx, qy, qz, tx, ty, tz)."""
        return np.concatenate([self.rotation, self.translation])

    def to_dict(self) -> dict:
        return {
            "quaternion_wxyz": [float(v) for v in self.rotation],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.array(d["quaternion_wxyz"], dtype=np.float64), np.array(d["translation"], dtype=np.float64))

    def is_identity(self) -> bool:
        return bool(
            np.all(self.translation == 0.0)
            and self.rotation[0] == 1.0
            and np.all(self.rotation[1:] == 0.0)
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __hash__(self) -> int:
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def __repr__(self) -> str:
        q = ", ".join(f"{v:.6g}" for v in self.rotation)
        t = ", ".join(f"{v:.6g}" for v in self.translation)
        return f"RigidTransform(q=[{q}], t=[{t}])"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``compose(a, b)`` applied to p equals ``a.apply(b.apply(p))``."""
    q = quat_multiply(a.rotation, b.rotation)
    t = a.rotation_matrix() @ b.translation + a.translation
    return RigidTransform(q, t)


def invert(t: RigidTransform) -> RigidTransform:
    qi = t.rotation * np.array([1.0, -1.0, -1.0, -1.0])
    ti = -(quat_to_matrix(qi) @ t.translation)
    return RigidTransform(qi, ti)


def planar_transform(center, dx: float, dy: float, yaw: float) -> RigidTransform:
    """Rotate by ``yaw`` about the vertical axis through ``center``, then shift by (dx, dy)."""
    c = np.array([float(center[0]), float(center[1]), 0.0])
    return compose(
        RigidTransform.from_translation(c[0] + dx, c[1] + dy, 0.0),
        compose(RigidTransform.rot_z(yaw), RigidTransform.from_translation(-c[0], -c[1], 0.0)),
    )


def slerp(q0: np.ndarray, q1: np.ndarray, s: float) -> np.ndarray:
    """Shortest-arc spherical interpolation between unit quaternions."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    dot = float(q0 @ q1)
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    dot = min(dot, 1.0)
    theta = math.acos(dot)
    if theta < 1e-10:
        q = (1.0 - s) * q0 + s * q1
        return q / np.linalg.norm(q)
    st = math.sin(theta)
    return (math.sin((1.0 - s) * theta) / st) * q0 + (math.sin(s * theta) / st) * q1


def interpolate(a: RigidTransform, b: RigidTransform, s: float) -> RigidTransform:
    """Linear in translation, geodesic (constant angular rate) in rotation."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"interpolation parameter {s} outside [0, 1]")
    if s == 0.0:
        return a
    if s == 1.0:
        return b
    q = slerp(a.rotation, b.rotation, s)
    t = (1.0 - s) * a.translation + s * b.translation
    return RigidTransform(q, t)


def rotation_distance(a: RigidTransform, b: RigidTransform) -> float:
    """Angle in radians of the relative rotation between two transforms."""
    return compose(invert(a), b).angle()


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


def project_point(p, k: CameraIntrinsics, near: float = DEFAULT_NEAR) -> Optional[Tuple[float, float, float]]:
    """Pinhole projection of a camera-frame point.

    Returns ``(u, v, depth)`` or ``None`` when the point is at or behind the
    near plane.
    """
    x, y, z = (float(c) for c in p)
    if z <= near:
        return None
    return (k.fx * x / z + k.cx, k.fy * y / z + k.cy, z)


def project_points(points: np.ndarray, k: CameraIntrinsics, near: float = DEFAULT_NEAR):
    """Vectorized projection: returns (u, v, z, in_front) arrays."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = p[:, 2]
    in_front = z > near
    zs = np.where(in_front, z, 1.0)
    u = k.fx * p[:, 0] / zs + k.cx
    v = k.fy * p[:, 1] / zs + k.cy
    return u, v, z, in_front


def unproject_pixel(u: float, v: float, depth: float, k: CameraIntrinsics) -> np.ndarray:
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    return np.array([(u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth])


def unproject_depth(values: np.ndarray, k: CameraIntrinsics, mask: Optional[np.ndarray] = None):
    """Camera-frame points of every (masked) pixel; returns (points, flat indices)."""
    h, w = values.shape
    if mask is None:
        mask = np.isfinite(values) & (values > 0)
    idx = np.flatnonzero(mask)
    v, u = np.divmod(idx, w)
    z = values.reshape(-1)[idx]
    pts = np.stack([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z], axis=1)
    return pts, idx


@dataclass(frozen=True)
class DepthMap:
    """Metric depth image. Invalid pixels hold NaN, which never compares as a depth."""

    values: np.ndarray
    far: float = DEFAULT_FAR

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("depth map must be 2-D")
        bad = ~(np.isfinite(v) & (v > 0) & (v < self.far))
        v[bad] = np.nan
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def invalid(cls, width: int, height: int, far: float = DEFAULT_FAR) -> "DepthMap":
        return cls(np.full((height, width), np.nan), far)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values)

    def filled(self, fill: float = 0.0) -> np.ndarray:
        return np.where(self.valid, self.values, fill)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DepthMap):
            return NotImplemented
        return self.far == other.far and np.array_equal(self.values, other.values, equal_nan=True)

    __hash__ = None  # type: ignore[assignment]


def as_transforms(items: Iterable) -> list:
    return [t if isinstance(t, RigidTransform) else RigidTransform.from_matrix(t) for t in items]
