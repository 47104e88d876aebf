"""Software depth rendering: point splatting, triangle rasterization, merge and hole filtering.

Renderers return depth snapped to a 2^-20 m grid (about 1 micrometer). The
snap absorbs last-bit floating-point differences so that rendering a rigidly
moved scene from a rigidly moved camera reproduces identical depth values.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .geometry import DEFAULT_FAR, DEFAULT_NEAR, CameraIntrinsics, DepthMap, RigidTransform, project_points
from .pointcloud import BACKGROUND, LabeledPointCloud, link_label

DEPTH_GRID = 2.0 ** -20
_CHUNK = 2_000_000


def quantize_depth(values: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(values, dtype=np.float64) / DEPTH_GRID) * DEPTH_GRID


def to_camera(points: np.ndarray, camera: RigidTransform) -> np.ndarray:
    """Base-frame points into the frame of a camera with camera-to-base pose ``camera``."""
    return (np.asarray(points, dtype=np.float64) - camera.translation) @ camera.rotation_matrix()


def _zbuffer(flat_idx: np.ndarray, z: np.ndarray, ids: np.ndarray, size: int):
    """Per-pixel minimum depth; ties broken by the smallest id."""
    depth = np.full(size, np.nan)
    label = np.zeros(size, dtype=np.int32)
    if flat_idx.size == 0:
        return depth, label
    order = np.lexsort((ids, z, flat_idx))
    fi = flat_idx[order]
    first = np.ones(len(fi), dtype=bool)
    first[1:] = fi[1:] != fi[:-1]
    sel = order[first]
    depth[flat_idx[sel]] = z[sel]
    label[flat_idx[sel]] = ids[sel]
    return depth, label


def _disc_offsets(radius: int) -> np.ndarray:
    r = int(radius)
    d = np.arange(-r, r + 1)
    dx, dy = np.meshgrid(d, d)
    keep = dx * dx + dy * dy <= r * r
    return np.stack([dx[keep], dy[keep]], axis=1)


def _surface_zbuffer(flat_idx, z, dist, ids, size: int, tolerance: float):
    """Z-buffer that treats samples within ``tolerance * zmin`` of the nearest as one surface.

    Among those, the sample landing closest to the pixel center wins. All keys
    are integers on fixed grids so the choice is reproducible.
    """
    depth = np.full(size, np.nan)
    label = np.zeros(size, dtype=np.int32)
    if flat_idx.size == 0:
        return depth, label
    big = np.iinfo(np.int64).max
    zi = np.round(z / DEPTH_GRID).astype(np.int64)
    zmin = np.full(size, big)
    np.minimum.at(zmin, flat_idx, zi)
    zm = zmin[flat_idx]
    cand = zi <= zm + np.floor(zm * tolerance).astype(np.int64)
    fi, zi = flat_idx[cand], zi[cand]
    # center distance first, then label, then depth
    key = (dist[cand] << 8) | ids[cand].astype(np.int64)
    kmin = np.full(size, big)
    np.minimum.at(kmin, fi, key)
    win = key == kmin[fi]
    fi, zi, key = fi[win], zi[win], key[win]
    zwin = np.full(size, big)
    np.minimum.at(zwin, fi, zi)
    hit = np.unique(fi)
    depth[hit] = zwin[hit] * DEPTH_GRID
    label[hit] = (kmin[hit] & 0xFF).astype(np.int32)
    return depth, label


def render_pointcloud_depth(
    cloud: LabeledPointCloud,
    camera: RigidTransform,
    k: CameraIntrinsics,
    splat_radius: int = 1,
    near: float = DEFAULT_NEAR,
    far: float = DEFAULT_FAR,
    with_labels: bool = False,
    depth_tolerance: float = 0.0,
):
    """Z-buffered disc splatting of a base-frame cloud into a camera.

    Each point covers the pixels within ``splat_radius`` of its nearest pixel,
    all at the point's own depth; the nearest sample wins. With a positive
    ``depth_tolerance`` samples within that fraction of the nearest depth count
    as the same surface and the one closest to the pixel center is kept, which
    stops dilated splats of a slanted surface from biasing its own pixels.
    With ``with_labels`` the winning label image is returned as well.
    """
    if splat_radius < 0:
        raise ValueError("splat_radius must be >= 0")
    w, h = k.width, k.height
    if len(cloud) == 0:
        dm = DepthMap.invalid(w, h, far)
        return (dm, np.zeros((h, w), dtype=np.uint8)) if with_labels else dm
    pc = to_camera(cloud.points, camera)
    u, v, z, front = project_points(pc, k, near)
    keep = front & (z < far)
    uk, vk = u[keep], v[keep]
    iu = np.floor(uk + 0.5).astype(np.int64)
    iv = np.floor(vk + 0.5).astype(np.int64)
    zk = quantize_depth(z[keep])
    lab = cloud.labels[keep].astype(np.int32)
    offs = _disc_offsets(splat_radius)
    pu = iu[:, None] + offs[:, 0]
    pv = iv[:, None] + offs[:, 1]
    inside = (pu >= 0) & (pu < w) & (pv >= 0) & (pv < h)
    flat = (pv * w + pu)[inside]
    pz = np.broadcast_to(zk[:, None], pu.shape)[inside]
    pl = np.broadcast_to(lab[:, None], pu.shape)[inside]
    if depth_tolerance > 0:
        du = (uk - iu)[:, None] - offs[:, 0]
        dv = (vk - iv)[:, None] - offs[:, 1]
        dist = np.round((du * du + dv * dv)[inside] / DEPTH_GRID).astype(np.int64)
        depth, label = _surface_zbuffer(flat, pz, dist, pl, w * h, depth_tolerance)
    else:
        depth, label = _zbuffer(flat, pz, pl, w * h)
    dm = DepthMap(depth.reshape(h, w), far)
    if with_labels:
        return dm, label.reshape(h, w).astype(np.uint8)
    return dm


def _clip_near(tris: np.ndarray, ids: np.ndarray, near: float):
    """Clip camera-frame triangles against z = near."""
    z = tris[:, :, 2]
    front = z > near
    nfront = front.sum(axis=1)
    whole = nfront == 3
    partial = np.flatnonzero((nfront > 0) & ~whole)
    out_t, out_i = [tris[whole]], [ids[whole]]
    for t in partial:
        poly = []
        tri = tris[t]
        for a in range(3):
            p, q = tri[a], tri[(a + 1) % 3]
            pin, qin = p[2] > near, q[2] > near
            if pin:
                poly.append(p)
            if pin != qin:
                s = (near - p[2]) / (q[2] - p[2])
                x = p + s * (q - p)
                x[2] = near * (1 + 1e-12)
                poly.append(x)
        for j in range(1, len(poly) - 1):
            out_t.append(np.array([[poly[0], poly[j], poly[j + 1]]]))
            out_i.append(ids[t : t + 1])
    return np.concatenate(out_t), np.concatenate(out_i)


def rasterize_triangles(
    tris_cam: np.ndarray,
    k: CameraIntrinsics,
    ids: Optional[np.ndarray] = None,
    near: float = DEFAULT_NEAR,
    far: float = DEFAULT_FAR,
) -> Tuple[np.ndarray, np.ndarray]:
    """Rasterize camera-frame triangles (M, 3, 3) at pixel centers.

    Depth is interpolated perspective-correctly; both faces are drawn.
    Returns ``(depth (h, w) with NaN for empty, id image (h, w))``.
    """
    w, h = k.width, k.height
    tris = np.asarray(tris_cam, dtype=np.float64).reshape(-1, 3, 3)
    ids = np.zeros(len(tris), dtype=np.int32) if ids is None else np.asarray(ids, dtype=np.int32)
    if len(tris) == 0:
        return np.full((h, w), np.nan), np.zeros((h, w), dtype=np.int32)
    tris, ids = _clip_near(tris, ids, near)
    if len(tris) == 0:
        return np.full((h, w), np.nan), np.zeros((h, w), dtype=np.int32)
    z = tris[:, :, 2]
    u = k.fx * tris[:, :, 0] / z + k.cx
    v = k.fy * tris[:, :, 1] / z + k.cy
    area = (u[:, 1] - u[:, 0]) * (v[:, 2] - v[:, 0]) - (u[:, 2] - u[:, 0]) * (v[:, 1] - v[:, 0])
    u0 = np.maximum(np.ceil(u.min(axis=1)), 0).astype(np.int64)
    u1 = np.minimum(np.floor(u.max(axis=1)), w - 1).astype(np.int64)
    v0 = np.maximum(np.ceil(v.min(axis=1)), 0).astype(np.int64)
    v1 = np.minimum(np.floor(v.max(axis=1)), h - 1).astype(np.int64)
    nu = np.maximum(u1 - u0 + 1, 0)
    nv = np.maximum(v1 - v0 + 1, 0)
    live = np.flatnonzero((nu > 0) & (nv > 0) & (np.abs(area) > 1e-12))
    counts = nu[live] * nv[live]

    all_idx, all_z, all_id = [], [], []
    start = 0
    cum = np.cumsum(counts)
    while start < len(live):
        base = cum[start - 1] if start else 0
        stop = int(np.searchsorted(cum, base + _CHUNK, side="right"))
        stop = max(stop, start + 1)
        sel = live[start:stop]
        cnt = counts[start:stop]
        start = stop
        t = np.repeat(sel, cnt)
        local = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        pu = u0[t] + local % nu[t]
        pv = v0[t] + local // nu[t]
        uu, vv = u[t], v[t]
        # edge functions, normalized by the signed area
        w0 = ((uu[:, 1] - pu) * (vv[:, 2] - pv) - (uu[:, 2] - pu) * (vv[:, 1] - pv)) / area[t]
        w1 = ((uu[:, 2] - pu) * (vv[:, 0] - pv) - (uu[:, 0] - pu) * (vv[:, 2] - pv)) / area[t]
        w2 = 1.0 - w0 - w1
        eps = -1e-9
        inside = (w0 >= eps) & (w1 >= eps) & (w2 >= eps)
        if not inside.any():
            continue
        t, pu, pv = t[inside], pu[inside], pv[inside]
        zz = z[t]
        inv = w0[inside] / zz[:, 0] + w1[inside] / zz[:, 1] + w2[inside] / zz[:, 2]
        depth = 1.0 / inv
        ok = (depth > near) & (depth < far)
        all_idx.append((pv * w + pu)[ok])
        all_z.append(depth[ok])
        all_id.append(ids[t][ok])
    if not all_idx:
        return np.full((h, w), np.nan), np.zeros((h, w), dtype=np.int32)
    depth, label = _zbuffer(np.concatenate(all_idx), quantize_depth(np.concatenate(all_z)), np.concatenate(all_id), w * h)
    return depth.reshape(h, w), label.reshape(h, w)


def render_triangles_depth(tris_world: np.ndarray, camera: RigidTransform, k: CameraIntrinsics, ids=None, near=DEFAULT_NEAR, far=DEFAULT_FAR):
    """Rasterize base-frame triangles; returns (DepthMap, id image)."""
    tris = to_camera(np.asarray(tris_world).reshape(-1, 3), camera).reshape(-1, 3, 3)
    depth, label = rasterize_triangles(tris, k, ids, near, far)
    return DepthMap(depth, far), label


def render_mesh_depth(m, q, camera: RigidTransform, k: CameraIntrinsics, links: Optional[Sequence[int]] = None, with_labels: bool = False, near=DEFAULT_NEAR, far=DEFAULT_FAR):
    """Depth of every link mesh posed at ``q``; labels are per-link robot ids."""
    tris, owner = m.posed_mesh(q, links)
    ids = np.array([link_label(i) for i in range(len(m.links))], dtype=np.int32)[owner] if len(owner) else owner
    dm, label = render_triangles_depth(tris, camera, k, ids, near, far)
    if with_labels:
        return dm, label.astype(np.uint8)
    return dm


def merge_depth(a: DepthMap, b: DepthMap) -> DepthMap:
    """Per-pixel minimum over valid samples."""
    if a.values.shape != b.values.shape:
        raise ValueError(f"depth maps differ in size: {a.values.shape} vs {b.values.shape}")
    return DepthMap(np.fmin(a.values, b.values), min(a.far, b.far))


def merge_labeled(a: Tuple[DepthMap, np.ndarray], b: Tuple[DepthMap, np.ndarray]) -> Tuple[DepthMap, np.ndarray]:
    """``merge_depth`` that also carries the winning label image."""
    da, la = a
    db, lb = b
    merged = merge_depth(da, db)
    take_b = db.valid & (~da.valid | (db.values < da.values))
    return merged, np.where(take_b, lb, la)


def _speckles(values: np.ndarray, valid: np.ndarray, min_region: int, jump: float) -> np.ndarray:
    """Boolean mask of small depth-continuous regions that stand off their surroundings."""
    h, w = values.shape
    if min_region <= 1 or not valid.any():
        return np.zeros_like(valid)
    idx = np.arange(h * w).reshape(h, w)
    rows, cols = [], []
    for a, b, ok, step in (
        (idx[:, :-1], idx[:, 1:], valid[:, :-1] & valid[:, 1:], values[:, :-1] - values[:, 1:]),
        (idx[:-1, :], idx[1:, :], valid[:-1, :] & valid[1:, :], values[:-1, :] - values[1:, :]),
    ):
        with np.errstate(invalid="ignore"):
            link = ok & (np.abs(step) <= jump)
        rows.append(a[link])
        cols.append(b[link])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    g = coo_matrix((np.ones(len(r), dtype=np.int8), (r, c)), shape=(h * w, h * w))
    _, comp = connected_components(g, directed=False)
    comp = comp.reshape(h, w)
    flat_valid = valid.reshape(-1)
    sizes = np.bincount(comp.reshape(-1)[flat_valid], minlength=comp.max() + 1)
    small = np.flatnonzero((sizes > 0) & (sizes < min_region))
    out = np.zeros((h, w), dtype=bool)
    if small.size == 0:
        return out
    is_small = np.zeros(len(sizes), dtype=bool)
    is_small[small] = True
    cand = valid & is_small[comp]
    lab, n = ndimage.label(cand, structure=np.ones((3, 3)))
    for sl_i, sl in enumerate(ndimage.find_objects(lab), start=1):
        y0, y1 = max(sl[0].start - 1, 0), min(sl[0].stop + 1, h)
        x0, x1 = max(sl[1].start - 1, 0), min(sl[1].stop + 1, w)
        win_lab = lab[y0:y1, x0:x1]
        win_comp = comp[y0:y1, x0:x1]
        win_val = values[y0:y1, x0:x1]
        win_valid = valid[y0:y1, x0:x1]
        for cid in np.unique(win_comp[win_lab == sl_i]):
            region = (win_comp == cid) & win_valid
            grown = ndimage.binary_dilation(region, structure=np.ones((3, 3)))
            ring = grown & ~region & win_valid
            if not ring.any():
                continue
            if abs(np.median(win_val[region]) - np.median(win_val[ring])) > jump:
                out[y0:y1, x0:x1] |= region
    return out


def filter_depth(d: DepthMap, hole_max: int = 2, speckle_min_region: int = 6, jump: float = 0.05) -> DepthMap:
    """Remove depth speckles, then fill small enclosed holes.

    A speckle is a 4-connected depth-continuous region (neighbor steps at most
    ``jump``) with fewer than ``speckle_min_region`` pixels whose median differs
    from its surrounding ring's median by more than ``jump``. A hole is an
    invalid 4-connected region off the image border, spanning at most
    ``hole_max`` pixels in each direction; each hole pixel takes the median of
    valid pixels in its (2 * hole_max + 1)^2 window. Other pixels are kept.
    """
    values = d.values
    h, w = values.shape
    valid = d.valid
    speck = _speckles(values, valid, speckle_min_region, jump)
    keep = valid & ~speck
    out = np.where(keep, values, np.nan)
    if hole_max <= 0:
        return DepthMap(out, d.far)
    lab, n = ndimage.label(~keep)
    if n == 0:
        return DepthMap(out, d.far)
    has_speck = np.zeros(n + 1, dtype=bool)
    has_speck[lab[speck]] = True
    fill = np.zeros(n + 1, dtype=bool)
    for i, sl in enumerate(ndimage.find_objects(lab), start=1):
        touches = sl[0].start == 0 or sl[1].start == 0 or sl[0].stop == h or sl[1].stop == w
        small = (sl[0].stop - sl[0].start) <= hole_max and (sl[1].stop - sl[1].start) <= hole_max
        fill[i] = small and not touches and not has_speck[i]
    ys, xs = np.nonzero(fill[lab])
    if ys.size:
        r = hole_max
        padded = np.pad(out, r, constant_values=np.nan)
        dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
        win = padded[ys[:, None] + r + dy.reshape(-1), xs[:, None] + r + dx.reshape(-1)]
        out[ys, xs] = np.nanmedian(win, axis=1)
    return DepthMap(out, d.far)
