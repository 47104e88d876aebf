"""Conditioning signals for a video generator: normalized depth, edges, ray and action maps."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import cv2
import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, DepthMap, RigidTransform
from .kinematics import EndEffectorAction

F32_MAGIC = b"DEF3"
PNG16_MAX = 65535


class ChunkError(ValueError):
    pass


@dataclass(frozen=True)
class ChunkNormalization:
    d_min: float
    d_max: float
    constant: bool = False

    def invert(self, normalized: np.ndarray) -> np.ndarray:
        if self.constant:
            return np.full(np.shape(normalized), self.d_min)
        return self.d_min + np.asarray(normalized, dtype=np.float64) * (self.d_max - self.d_min)


def _values(d) -> np.ndarray:
    return d.values if isinstance(d, DepthMap) else np.asarray(d, dtype=np.float64)


def normalize_depth_chunk(depths: Sequence[Sequence]) -> Tuple[List[List[np.ndarray]], List[List[np.ndarray]], ChunkNormalization]:
    """Normalize every view and frame of a chunk with one shared affine map.

    ``depths`` is views x frames of DepthMaps (or arrays with NaN for invalid).
    Returns (normalized maps, validity masks, normalization). Invalid pixels
    map to 0; a constant chunk maps to 0.5 and is flagged.
    """
    grid = [[_values(d) for d in view] for view in depths]
    flat = [m for view in grid for m in view]
    if not flat:
        raise ChunkError("empty chunk")
    valid = [[np.isfinite(m) for m in view] for view in grid]
    lo, hi = np.inf, -np.inf
    for m in flat:
        ok = np.isfinite(m)
        if ok.any():
            lo = min(lo, float(m[ok].min()))
            hi = max(hi, float(m[ok].max()))
    if not np.isfinite(lo):
        raise ChunkError("chunk has no valid depth")
    norm = ChunkNormalization(lo, hi, hi == lo)
    out = []
    for view, vmask in zip(grid, valid):
        row = []
        for m, ok in zip(view, vmask):
            if norm.constant:
                n = np.where(ok, 0.5, 0.0)
            else:
                n = np.where(ok, (np.where(ok, m, lo) - lo) / (hi - lo), 0.0)
            row.append(n)
        out.append(row)
    return out, valid, norm


def canny_from_depth(d, low: float = 0.1, high: float = 0.2, sigma: float = 1.4) -> np.ndarray:
    """Binary (0/1 uint8) Canny edges of a normalized depth map.

    The gradient magnitude is scaled by its image maximum before the
    hysteresis thresholds apply, so edges depend only on relative structure.
    """
    if not 0.0 <= low < high <= 1.0:
        raise ValueError("need 0 <= low < high <= 1")
    img = np.nan_to_num(_values(d), nan=0.0)
    g = ndimage.gaussian_filter(img, sigma, mode="nearest")
    gx = ndimage.sobel(g, axis=1, mode="nearest")
    gy = ndimage.sobel(g, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak < 1e-9:
        return np.zeros(img.shape, dtype=np.uint8)
    mag = mag / peak
    # quantize gradient direction to 0, 45, 90, 135 degrees
    ang = (np.rad2deg(np.arctan2(gy, gx)) + 180.0) % 180.0
    sector = (np.floor((ang + 22.5) / 45.0).astype(int)) % 4
    p = np.pad(mag, 1)
    h, w = mag.shape

    def shifted(dy, dx):
        return p[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    steps = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros(mag.shape, dtype=bool)
    for s, (dy, dx) in steps.items():
        sel = sector == s
        # strict on one side so a symmetric ridge yields a single pixel
        keep |= sel & (mag > shifted(-dy, -dx)) & (mag >= shifted(dy, dx))
    nms = np.where(keep, mag, 0.0)
    weak = nms >= low
    strong = nms >= high
    lab, n = ndimage.label(weak, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros(img.shape, dtype=np.uint8)
    good = np.zeros(n + 1, dtype=bool)
    good[np.unique(lab[strong])] = True
    good[0] = False
    return good[lab].astype(np.uint8)


def ray_map(camera: RigidTransform, k: CameraIntrinsics) -> np.ndarray:
    """(6, H, W): ray origin then unit direction in the base frame, per pixel center."""
    u, v = np.meshgrid(np.arange(k.width, dtype=np.float64), np.arange(k.height, dtype=np.float64))
    rays = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    dirs = rays @ camera.rotation_matrix().T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origin = np.broadcast_to(np.asarray(camera.translation, dtype=np.float64), dirs.shape)
    return np.concatenate([origin, dirs], axis=-1).transpose(2, 0, 1).copy()


def action_vector(a: EndEffectorAction) -> np.ndarray:
    """Translation, first two rotation-matrix columns, gripper."""
    r = a.pose.rotation_matrix()
    return np.concatenate([np.asarray(a.pose.translation, dtype=np.float64), r[:, 0], r[:, 1], [a.gripper]])


def rotation_from_6d(v) -> np.ndarray:
    """Gram-Schmidt inverse of the two-column rotation encoding."""
    a, b = np.asarray(v[:3], dtype=np.float64), np.asarray(v[3:6], dtype=np.float64)
    x = a / np.linalg.norm(a)
    y = b - x * (x @ b)
    y /= np.linalg.norm(y)
    return np.stack([x, y, np.cross(x, y)], axis=1)


def action_map(actions: Union[EndEffectorAction, Mapping[str, EndEffectorAction]], width: int, height: int) -> np.ndarray:
    """(10 * arms, H, W) map with each arm's action vector broadcast over all pixels (arms sorted)."""
    if isinstance(actions, EndEffectorAction):
        actions = {"": actions}
    vec = np.concatenate([action_vector(actions[a]) for a in sorted(actions)])
    return np.broadcast_to(vec[:, None, None], (len(vec), height, width)).copy()


def write_f32(path, planes: np.ndarray) -> None:
    """Little-endian float32 planes behind a 16-byte header (magic, channels, width, height)."""
    planes = np.asarray(planes)
    if planes.ndim == 2:
        planes = planes[None]
    c, h, w = planes.shape
    with open(path, "wb") as f:
        f.write(F32_MAGIC + struct.pack("<III", c, w, h))
        f.write(planes.astype("<f4").tobytes())


def read_f32(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != F32_MAGIC:
        raise ValueError(f"{path}: not a float plane file")
    c, w, h = struct.unpack("<III", data[4:16])
    body = np.frombuffer(data, dtype="<f4", offset=16)
    if body.size != c * w * h:
        raise ValueError(f"{path}: expected {c * w * h} values, found {body.size}")
    return body.reshape(c, h, w).astype(np.float32)


def _write_png(path: Path, img: np.ndarray) -> None:
    ok, buf = cv2.imencode(".png", img)
    if not ok:
        raise OSError(f"could not encode {path}")
    path.write_bytes(buf.tobytes())


def read_png16(path) -> np.ndarray:
    """Normalized depth back to [0, 1]."""
    img = cv2.imdecode(np.frombuffer(Path(path).read_bytes(), dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ValueError(f"{path}: unreadable PNG")
    return img.astype(np.float64) / PNG16_MAX


def export_condition_stack(
    demo,
    out_dir,
    chunk_frames: int = 25,
    canny_low: float = 0.1,
    canny_high: float = 0.2,
) -> List[Path]:
    """Write per-chunk conditioning files for every view of ``demo``.

    Layout: ``<out_dir>/<demo_id>/chunk_<k>/<view>/`` with depth_norm, edge,
    valid, ray and action files per frame (global frame numbering), plus
    ``chunk_meta.json`` holding the normalization range. Returns the chunk
    directories.
    """
    if chunk_frames < 1:
        raise ValueError("chunk_frames must be >= 1")
    n = demo.frame_count
    root = Path(out_dir) / demo.demo_id
    chunks = []
    for ci, start in enumerate(range(0, n, chunk_frames)):
        end = min(start + chunk_frames, n)
        cdir = root / f"chunk_{ci}"
        depths = [[v.depths[t] for t in range(start, end)] for v in demo.views]
        try:
            normed, valid, norm = normalize_depth_chunk(depths)
        except ChunkError:
            normed = [[np.zeros((v.intrinsics.height, v.intrinsics.width)) for _ in range(start, end)] for v in demo.views]
            valid = [[np.zeros(m.shape, dtype=bool) for m in row] for row in normed]
            norm = None
        for v, rows, vrows in zip(demo.views, normed, valid):
            vdir = cdir / v.view_id
            vdir.mkdir(parents=True, exist_ok=True)
            k = v.intrinsics
            for i, t in enumerate(range(start, end)):
                nd = rows[i]
                _write_png(vdir / f"depth_norm_{t:04d}.png16", np.round(nd * PNG16_MAX).astype(np.uint16))
                _write_png(vdir / f"edge_{t:04d}.png8", canny_from_depth(nd, canny_low, canny_high) * np.uint8(255))
                _write_png(vdir / f"valid_{t:04d}.png8", vrows[i].astype(np.uint8) * np.uint8(255))
                write_f32(vdir / f"ray_{t:04d}.f32", ray_map(v.poses[t], k))
                write_f32(vdir / f"action_{t:04d}.f32", action_map({a: demo.actions[a][t] for a in demo.actions}, k.width, k.height))
        meta = {
            "chunk": ci,
            "frame_start": start,
            "frame_end": end,
            "views": [v.view_id for v in demo.views],
            "d_min": None if norm is None else norm.d_min,
            "d_max": None if norm is None else norm.d_max,
            "constant": bool(norm is not None and norm.constant),
            "empty": norm is None,
            "arms": sorted(demo.actions),
            "canny": [canny_low, canny_high],
        }
        (cdir / "chunk_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        chunks.append(cdir)
    return chunks


def load_chunk_depth(chunk_dir, view_id: str, frame: int) -> np.ndarray:
    """Metric depth reconstructed from a stored chunk (NaN where invalid)."""
    chunk_dir = Path(chunk_dir)
    meta = json.loads((chunk_dir / "chunk_meta.json").read_text())
    vdir = chunk_dir / view_id
    n = read_png16(vdir / f"depth_norm_{frame:04d}.png16")
    valid = read_png16(vdir / f"valid_{frame:04d}.png8") > 0
    if meta["empty"]:
        return np.full(n.shape, np.nan)
    norm = ChunkNormalization(meta["d_min"], meta["d_max"], meta["constant"])
    return np.where(valid, norm.invert(n), np.nan)
