"""Triangle-mesh primitives, mesh file I/O and exact point-to-triangle distance.

Meshes are plain ``(M, 3, 3)`` float arrays: M triangles of three xyz vertices.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np


def _ring(radius: float, n: int, z: float) -> np.ndarray:
    a = np.arange(n) * (2 * math.pi / n)
    return np.stack([radius * np.cos(a), radius * np.sin(a), np.full(n, z)], axis=1)


def _stitch(r0: np.ndarray, r1: np.ndarray) -> list:
    n = len(r0)
    tris = []
    for i in range(n):
        j = (i + 1) % n
        tris.append([r0[i], r0[j], r1[j]])
        tris.append([r0[i], r1[j], r1[i]])
    return tris


def _fan(center: np.ndarray, ring: np.ndarray, flip: bool = False) -> list:
    n = len(ring)
    tris = []
    for i in range(n):
        j = (i + 1) % n
        tris.append([center, ring[j], ring[i]] if flip else [center, ring[i], ring[j]])
    return tris


def _frame_from_z(axis: np.ndarray) -> np.ndarray:
    """Rotation whose third column is ``axis``."""
    z = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def capsule_mesh(p0, p1, radius: float, n_around: int = 12, n_cap: int = 3, max_edge: float = 0.03) -> np.ndarray:
    """Closed capsule around segment p0-p1. Zero-length segments give a sphere."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    axis = p1 - p0
    length = float(np.linalg.norm(axis))
    rot = _frame_from_z(axis if length > 1e-12 else np.array([0.0, 0.0, 1.0]))

    rings = []
    # bottom hemisphere, pole first
    for i in range(n_cap, 0, -1):
        phi = (math.pi / 2) * i / n_cap
        rings.append(_ring(radius * math.cos(phi), n_around, -radius * math.sin(phi)))
    n_len = max(1, int(math.ceil(length / max_edge))) if length > 1e-12 else 0
    for i in range(n_len + 1):
        rings.append(_ring(radius, n_around, length * i / n_len if n_len else 0.0))
    for i in range(1, n_cap + 1):
        phi = (math.pi / 2) * i / n_cap
        rings.append(_ring(radius * math.cos(phi), n_around, length + radius * math.sin(phi)))
    # drop degenerate pole rings, replaced by fans
    bottom = np.array([0.0, 0.0, -radius])
    top = np.array([0.0, 0.0, length + radius])
    body = rings[1:-1]
    tris = _fan(bottom, body[0], flip=True)
    for a, b in zip(body[:-1], body[1:]):
        tris += _stitch(a, b)
    tris += _fan(top, body[-1])
    mesh = np.array(tris)
    return mesh @ rot.T + p0


def box_mesh(size, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    sx, sy, sz = (0.5 * float(s) for s in size)
    c = np.asarray(center, dtype=np.float64)
    v = np.array(
        [[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)]
    )
    faces = [
        (0, 1, 3), (0, 3, 2),  # -x
        (4, 6, 7), (4, 7, 5),  # +x
        (0, 4, 5), (0, 5, 1),  # -y
        (2, 3, 7), (2, 7, 6),  # +y
        (0, 2, 6), (0, 6, 4),  # -z
        (1, 5, 7), (1, 7, 3),  # +z
    ]
    return v[np.array(faces)] + c


def cylinder_mesh(radius: float, height: float, center=(0.0, 0.0, 0.0), n_around: int = 24) -> np.ndarray:
    """Closed cylinder along z, centered at ``center``."""
    c = np.asarray(center, dtype=np.float64)
    lo = _ring(radius, n_around, -0.5 * height)
    hi = _ring(radius, n_around, 0.5 * height)
    tris = _stitch(lo, hi)
    tris += _fan(np.array([0.0, 0.0, -0.5 * height]), lo, flip=True)
    tris += _fan(np.array([0.0, 0.0, 0.5 * height]), hi)
    return np.array(tris) + c


def quad_mesh(corners) -> np.ndarray:
    a, b, c, d = (np.asarray(p, dtype=np.float64) for p in corners)
    return np.array([[a, b, c], [a, c, d]])


def transform_mesh(mesh: np.ndarray, rotation: np.ndarray, translation) -> np.ndarray:
    return mesh @ np.asarray(rotation).T + np.asarray(translation)


def read_mesh(path, scale=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Read a triangle mesh from Wavefront OBJ or STL (ascii or binary)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        mesh = _read_obj(path)
    elif suffix == ".stl":
        mesh = _read_stl(path)
    else:
        raise ValueError(f"unsupported mesh format: {path.name}")
    return mesh * np.asarray(scale, dtype=np.float64)


def _read_obj(path: Path) -> np.ndarray:
    verts, tris = [], []
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):
                tris.append([idx[0], idx[k], idx[k + 1]])
    if not tris:
        return np.zeros((0, 3, 3))
    return np.asarray(verts, dtype=np.float64)[np.asarray(tris)]


def _read_stl(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if len(data) >= 84:
        (n,) = struct.unpack_from("<I", data, 80)
        if 84 + 50 * n == len(data):
            rec = np.dtype([("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
            arr = np.frombuffer(data, dtype=rec, count=n, offset=84)
            return arr["v"].astype(np.float64)
    verts = [
        [float(x) for x in line.split()[1:4]]
        for line in data.decode("ascii", errors="replace").splitlines()
        if line.strip().startswith("vertex")
    ]
    return np.asarray(verts, dtype=np.float64).reshape(-1, 3, 3)


def write_obj(mesh: np.ndarray, path) -> None:
    """Unshared-vertex OBJ; floats written with repr so reading back is exact."""
    lines = []
    for tri in np.asarray(mesh, dtype=np.float64):
        for v in tri:
            lines.append("v " + " ".join(repr(float(c)) for c in v))
    for i in range(len(mesh)):
        lines.append(f"f {3 * i + 1} {3 * i + 2} {3 * i + 3}")
    Path(path).write_text("\n".join(lines) + "\n")


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", a, b)


def closest_point_on_triangle(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Vectorized closest point (Voronoi-region walk); all inputs (N, 3)."""
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    bp = p - b
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    cp = p - c
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def take(mask, value_fn):
        nonlocal done
        m = mask & ~done
        if m.any():
            out[m] = value_fn(m)
        done |= m

    take((d1 <= 0) & (d2 <= 0), lambda m: a[m])
    take((d3 >= 0) & (d4 <= d3), lambda m: b[m])
    take(
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        lambda m: a[m] + (d1[m] / (d1[m] - d3[m]))[:, None] * ab[m],
    )
    take((d6 >= 0) & (d5 <= d6), lambda m: c[m])
    take(
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        lambda m: a[m] + (d2[m] / (d2[m] - d6[m]))[:, None] * ac[m],
    )
    take(
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
        lambda m: b[m]
        + ((d4[m] - d3[m]) / ((d4[m] - d3[m]) + (d5[m] - d6[m])))[:, None] * (c[m] - b[m]),
    )
    rest = ~done
    if rest.any():
        denom = va[rest] + vb[rest] + vc[rest]
        with np.errstate(divide="ignore", invalid="ignore"):
            v = np.where(denom != 0, vb[rest] / denom, 0.0)
            w = np.where(denom != 0, vc[rest] / denom, 0.0)
        out[rest] = a[rest] + v[:, None] * ab[rest] + w[:, None] * ac[rest]
    return out


def point_triangle_distance(p: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Distance from each p[i] to triangle tris[i]."""
    q = closest_point_on_triangle(p, tris[:, 0], tris[:, 1], tris[:, 2])
    return np.linalg.norm(p - q, axis=1)
