"""Labeled point clouds: multi-view fusion, plane fitting and cleanup.

Label ids are small integers shared with the on-disk 8-bit masks:

====================  =========================================
``BACKGROUND`` (0)    anything static that is not the table
``TABLE`` (1)         support plane, used for scale alignment
2 .. 127              manipulated objects
128 + k               robot link ``k`` (after link assignment)
``ROBOT`` (255)       robot pixel whose link is not yet known
====================  =========================================
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraIntrinsics, DepthMap, RigidTransform, unproject_depth

log = logging.getLogger(__name__)

BACKGROUND = 0
TABLE = 1
FIRST_OBJECT = 2
LAST_OBJECT = 127
ROBOT_LINK_BASE = 128
ROBOT = 255
MAX_LINKS = ROBOT - ROBOT_LINK_BASE


def link_label(k: int) -> int:
    if not 0 <= k < MAX_LINKS:
        raise ValueError(f"link index {k} cannot be encoded as a label")
    return ROBOT_LINK_BASE + k


def is_robot(labels) -> np.ndarray:
    return np.asarray(labels) >= ROBOT_LINK_BASE


def is_object(labels) -> np.ndarray:
    labels = np.asarray(labels)
    return (labels >= FIRST_OBJECT) & (labels <= LAST_OBJECT)


def is_background(labels) -> np.ndarray:
    return np.asarray(labels) <= TABLE


class PlaneFitError(ValueError):
    """Raised when no plane can be fitted (too few or collinear points)."""


@dataclass(frozen=True)
class LabeledPointCloud:
    points: np.ndarray
    labels: np.ndarray
    confidences: np.ndarray

    def __post_init__(self) -> None:
        p = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        lab = np.array(self.labels, dtype=np.int16).reshape(-1)
        c = np.array(self.confidences, dtype=np.float64).reshape(-1)
        if not (len(p) == len(lab) == len(c)):
            raise ValueError("points, labels and confidences differ in length")
        if not np.all(np.isfinite(p)):
            raise ValueError("non-finite point coordinates")
        for a in (p, lab, c):
            a.setflags(write=False)
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "confidences", c)

    @classmethod
    def empty(cls) -> "LabeledPointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0))

    @classmethod
    def from_points(cls, points, label: int = BACKGROUND, confidence: float = 1.0) -> "LabeledPointCloud":
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = len(points)
        return cls(points, np.full(n, label), np.full(n, confidence))

    @classmethod
    def concat(cls, clouds: Iterable["LabeledPointCloud"]) -> "LabeledPointCloud":
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        return cls(
            np.concatenate([c.points for c in clouds]),
            np.concatenate([c.labels for c in clouds]),
            np.concatenate([c.confidences for c in clouds]),
        )

    def __len__(self) -> int:
        return len(self.points)

    def select(self, mask) -> "LabeledPointCloud":
        mask = np.asarray(mask)
        return LabeledPointCloud(self.points[mask], self.labels[mask], self.confidences[mask])

    def with_labels(self, labels) -> "LabeledPointCloud":
        return LabeledPointCloud(self.points, labels, self.confidences)

    def transformed(self, t: RigidTransform) -> "LabeledPointCloud":
        if t.is_identity():
            return self
        return LabeledPointCloud(t.apply(self.points), self.labels, self.confidences)

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def label_ids(self) -> np.ndarray:
        return np.unique(self.labels)


Selector = Union[int, Sequence[int], np.ndarray, Callable[[np.ndarray], np.ndarray]]


def select_mask(cloud: LabeledPointCloud, selector: Selector) -> np.ndarray:
    if callable(selector):
        return np.asarray(selector(cloud.labels), dtype=bool)
    sel = np.asarray(selector)
    if sel.dtype == bool:
        if sel.shape != cloud.labels.shape:
            raise ValueError("boolean selector has the wrong length")
        return sel
    return np.isin(cloud.labels, sel.reshape(-1))


def transform_subset(cloud: LabeledPointCloud, selector: Selector, t: RigidTransform) -> LabeledPointCloud:
    """Move the selected points by ``t``; everything else is left in place."""
    mask = select_mask(cloud, selector)
    if t.is_identity() or not mask.any():
        return cloud
    pts = cloud.points.copy()
    pts[mask] = t.apply(pts[mask])
    return LabeledPointCloud(pts, cloud.labels, cloud.confidences)


def fuse_views(
    depths: Sequence[DepthMap],
    cameras: Sequence[RigidTransform],
    intrinsics: Sequence[CameraIntrinsics],
    masks: Sequence[np.ndarray],
    confidences: Optional[Sequence[Optional[np.ndarray]]] = None,
    conf_threshold: float = 0.4,
    label_ids: Optional[Iterable[int]] = None,
) -> LabeledPointCloud:
    """Unproject every valid, confident pixel of every view into the base frame.

    ``cameras`` are camera-to-base poses. When ``label_ids`` is given, a mask id
    outside it is an error.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError("conf_threshold must lie in [0, 1]")
    n = len(depths)
    if not (len(cameras) == len(intrinsics) == len(masks) == n):
        raise ValueError("per-view inputs differ in length")
    if confidences is None:
        confidences = [None] * n
    known = None if label_ids is None else np.array(sorted(set(int(i) for i in label_ids)))
    clouds = []
    for d, cam, k, m, c in zip(depths, cameras, intrinsics, masks, confidences):
        shape = (k.height, k.width)
        if d.values.shape != shape or np.shape(m) != shape or (c is not None and np.shape(c) != shape):
            raise ValueError(f"view dimensions disagree with intrinsics {shape}")
        m = np.asarray(m)
        if known is not None:
            unknown = np.setdiff1d(np.unique(m), known)
            if unknown.size:
                raise ValueError(f"unknown mask label id(s): {unknown.tolist()}")
        conf = np.ones(shape) if c is None else np.asarray(c, dtype=np.float64)
        keep = d.valid & (conf >= conf_threshold)
        pts, idx = unproject_depth(d.values, k, keep)
        clouds.append(
            LabeledPointCloud(cam.apply(pts), m.reshape(-1)[idx], conf.reshape(-1)[idx])
        )
    return LabeledPointCloud.concat(clouds)


@dataclass(frozen=True)
class Plane:
    """``a x + b y + c z + d = 0`` with unit normal and ``d >= 0``."""

    coefficients: np.ndarray
    inlier_count: int
    inlier_rms: float

    @property
    def normal(self) -> np.ndarray:
        return self.coefficients[:3]

    @property
    def offset(self) -> float:
        return float(self.coefficients[3])

    def distance(self, points) -> np.ndarray:
        return np.asarray(points) @ self.normal + self.offset


def _canonical_plane(normal: np.ndarray, d: float) -> np.ndarray:
    normal = normal / np.linalg.norm(normal)
    d = float(d)
    if d < 0 or (d == 0 and normal[np.flatnonzero(np.abs(normal) > 1e-12)[0]] < 0):
        normal, d = -normal, -d
    return np.concatenate([normal, [d]])


def _fit_plane_lsq(points: np.ndarray) -> np.ndarray:
    c = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - c, full_matrices=False)
    n = vt[-1]
    return _canonical_plane(n, -float(n @ c))


def ransac_plane(
    points,
    iterations: int = 500,
    inlier_dist: float = 0.005,
    rng_seed: int = 0,
) -> Plane:
    """Best-consensus plane over random 3-point hypotheses, refit by least squares."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n < 3:
        raise PlaneFitError(f"need at least 3 points, got {n}")
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise PlaneFitError("points are collinear")

    rng = np.random.default_rng(rng_seed)
    triples = rng.integers(0, n, size=(iterations, 3))
    p0, p1, p2 = pts[triples[:, 0]], pts[triples[:, 1]], pts[triples[:, 2]]
    normals = np.cross(p1 - p0, p2 - p0)
    norms = np.linalg.norm(normals, axis=1)
    ok = norms > 1e-12
    normals[ok] /= norms[ok, None]
    offsets = -np.einsum("ij,ij->i", normals, p0)

    best_count, best = -1, None
    chunk = max(1, 2_000_000 // max(n, 1))
    for s in range(0, iterations, chunk):
        sl = slice(s, s + chunk)
        dist = np.abs(pts @ normals[sl].T + offsets[sl])
        counts = (dist < inlier_dist).sum(axis=0)
        counts[~ok[sl]] = -1
        i = int(np.argmax(counts))
        if counts[i] > best_count:
            best_count, best = int(counts[i]), s + i
    if best is None or best_count < 3:
        raise PlaneFitError("no hypothesis gathered three inliers")

    inliers = np.abs(pts @ normals[best] + offsets[best]) < inlier_dist
    coeffs = _fit_plane_lsq(pts[inliers])
    # one re-selection pass against the refined plane
    refined = np.abs(pts @ coeffs[:3] + coeffs[3]) < inlier_dist
    if refined.sum() >= 3:
        inliers = refined
        coeffs = _fit_plane_lsq(pts[inliers])
    resid = pts[inliers] @ coeffs[:3] + coeffs[3]
    return Plane(coeffs, int(inliers.sum()), float(np.sqrt(np.mean(resid**2))))


def align_background_scale(
    original_first_frame: LabeledPointCloud,
    edited_bg: LabeledPointCloud,
    table_label: int = TABLE,
    iterations: int = 500,
    inlier_dist: float = 0.005,
    rng_seed: int = 0,
    max_normal_angle_deg: float = 5.0,
) -> Tuple[LabeledPointCloud, float]:
    """Rescale an edited background so its table plane matches the original's.

    Both clouds must be expressed in the reconstruction frame (the scaling is
    about its origin). The ratio of the two fitted plane offsets is the scale.
    """
    orig = original_first_frame.points[original_first_frame.labels == table_label]
    edit = edited_bg.points[edited_bg.labels == table_label]
    for name, p in (("original", orig), ("edited", edit)):
        if len(p) < 3:
            raise PlaneFitError(f"{name} cloud has {len(p)} table points, need 3")
    plane_o = ransac_plane(orig, iterations, inlier_dist, rng_seed)
    plane_e = ransac_plane(edit, iterations, inlier_dist, rng_seed)
    if abs(plane_e.offset) < 1e-6:
        raise PlaneFitError("edited table plane passes through the origin; scale undefined")
    cos = float(np.clip(plane_o.normal @ plane_e.normal, -1.0, 1.0))
    angle = math.degrees(math.acos(cos))
    if angle > max_normal_angle_deg:
        log.warning("table normals differ by %.1f deg; offset ratio may be unreliable", angle)
    scale = plane_o.offset / plane_e.offset
    scaled = LabeledPointCloud(edited_bg.points * scale, edited_bg.labels, edited_bg.confidences)
    return scaled, float(scale)


def outlier_filter(cloud: LabeledPointCloud, k_neighbors: int = 8, std_ratio: float = 2.0) -> LabeledPointCloud:
    """Drop points whose mean k-NN distance exceeds mean + std_ratio * std."""
    if k_neighbors < 1:
        raise ValueError("k_neighbors must be >= 1")
    n = len(cloud)
    k = min(k_neighbors, n - 1)
    if k < 1:
        return cloud
    dist, _ = cKDTree(cloud.points).query(cloud.points, k=k + 1)
    mean_d = dist[:, 1:].mean(axis=1)
    thresh = mean_d.mean() + std_ratio * mean_d.std()
    return cloud.select(mean_d <= thresh)


def voxel_downsample(cloud: LabeledPointCloud, voxel: float = 0.005) -> LabeledPointCloud:
    """Keep the first point falling in each voxel (deterministic)."""
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return cloud.select(np.sort(first))
