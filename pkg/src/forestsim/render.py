"""Headless z-buffer rasterizer producing RGB and planar depth.

Geometry arrives as flat world-space triangle soups. The kernels are compiled
with numba and release the GIL so cameras can render on worker threads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

FAR_SENTINEL = np.float32(np.finfo(np.float32).max)
DEPTH_QUANTUM = 1e-3  # meters; contract for surfaces the mesh represents exactly
BACKGROUND = (135, 190, 235)
SUN = np.array([0.4, 0.3, 0.85]) / np.linalg.norm([0.4, 0.3, 0.85])

MAT_FLAT = 0  # unlit, untextured; drones
MAT_TERRAIN = 1
MAT_BARK = 2
MAT_FOLIAGE = 3
MAT_ROCK = 4
MAT_GRASS = 5
MAT_FIDUCIAL = 6  # unlit and never shaded

# (finest cell size m, amplitude) of the procedural albedo per material; octaves double in size
_NOISE = np.array(
    [
        [1.0, 0.0],
        [0.03, 0.8],
        [0.02, 0.6],
        [0.04, 0.65],
        [0.03, 0.55],
        [0.02, 0.6],
        [1.0, 0.0],
    ]
)
_OCTAVE_WEIGHTS = (0.36, 0.33, 0.31)  # finest first


@dataclass(frozen=True)
class Intrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    near: float
    far: float

    @classmethod
    def from_fov(cls, width: int, height: int, hfov: float, near: float, far: float) -> "Intrinsics":
        fx = (width / 2.0) / math.tan(hfov / 2.0)
        return cls(width, height, fx, fx, width / 2.0, height / 2.0, near, far)

    def ray_dirs(self) -> np.ndarray:
        """(H, W, 3) camera-frame directions with unit forward component."""
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        d = np.empty((self.height, self.width, 3))
        d[..., 0] = 1.0
        d[..., 1] = ((self.cx - u) / self.fx)[None, :]
        d[..., 2] = ((self.cy - v) / self.fy)[:, None]
        return d


@dataclass
class ShadeGrid:
    """Bucketed canopy spheres for the vertical below-canopy test."""

    centers: np.ndarray
    radii: np.ndarray
    origin: np.ndarray
    cell: float
    nx: int
    ny: int
    starts: np.ndarray
    items: np.ndarray

    @classmethod
    def build(cls, centers: np.ndarray, radii: np.ndarray, cell: float = 1.0) -> "ShadeGrid":
        centers = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 3)
        radii = np.ascontiguousarray(radii, dtype=np.float64)
        if len(radii) == 0:
            return cls(centers, radii, np.zeros(2), cell, 1, 1, np.zeros(2, np.int64), np.zeros(0, np.int64))
        lo = (centers[:, :2] - radii[:, None]).min(axis=0)
        hi = (centers[:, :2] + radii[:, None]).max(axis=0)
        nx = int(math.ceil((hi[0] - lo[0]) / cell)) + 1
        ny = int(math.ceil((hi[1] - lo[1]) / cell)) + 1
        starts, items = _bucket_spheres(centers, radii, lo, cell, nx, ny)
        return cls(centers, radii, lo, cell, nx, ny, starts, items)


@numba.njit(cache=True, nogil=True)
def _bucket_spheres(centers, radii, lo, cell, nx, ny):
    counts = np.zeros(nx * ny + 1, np.int64)
    for k in range(len(radii)):
        c0 = centers[k, 0]
        c1 = centers[k, 1]
        r = radii[k]
        for iy in range(int((c1 - r - lo[1]) // cell), int((c1 + r - lo[1]) // cell) + 1):
            for ix in range(int((c0 - r - lo[0]) // cell), int((c0 + r - lo[0]) // cell) + 1):
                counts[iy * nx + ix + 1] += 1
    starts = np.cumsum(counts)
    fill = starts[:-1].copy()
    items = np.empty(starts[-1], np.int64)
    for k in range(len(radii)):
        c0 = centers[k, 0]
        c1 = centers[k, 1]
        r = radii[k]
        for iy in range(int((c1 - r - lo[1]) // cell), int((c1 + r - lo[1]) // cell) + 1):
            for ix in range(int((c0 - r - lo[0]) // cell), int((c0 + r - lo[0]) // cell) + 1):
                b = iy * nx + ix
                items[fill[b]] = k
                fill[b] += 1
    return starts, items


@numba.njit(inline="always")
def _span(a, c, lo, hi):
    """Intersect [lo, hi] with {px : a * px + c >= -1e-9}."""
    if a > 1e-12:
        b = (-1e-9 - c) / a
        if b > lo:
            lo = b
    elif a < -1e-12:
        b = (-1e-9 - c) / a
        if b < hi:
            hi = b
    elif c < -1e-9:
        hi = lo - 1.0
    return lo, hi


@numba.njit(cache=True, nogil=True)
def _raster(cv, tris, cull, skip_lo, skip_hi, W, H, fx, fy, cx, cy, near, far, izbuf, ids):
    """Nearest triangle per pixel; ``izbuf`` holds inverse planar depth (0 = empty)."""
    inear = 1.0 / near
    ifar = 1.0 / far
    pf = np.empty(4)
    pl = np.empty(4)
    pu = np.empty(4)
    sx = np.empty(4)
    sy = np.empty(4)
    iz = np.empty(4)
    for t in range(tris.shape[0]):
        if skip_lo <= t < skip_hi:
            continue
        a0 = tris[t, 0]
        a1 = tris[t, 1]
        a2 = tris[t, 2]
        f0 = cv[a0, 0]
        f1 = cv[a1, 0]
        f2 = cv[a2, 0]
        if f0 < near and f1 < near and f2 < near:
            continue
        if f0 > far and f1 > far and f2 > far:
            continue
        if cull[t]:
            # outward-wound closed surface: skip faces pointing away from the camera
            e1x = cv[a1, 0] - f0
            e1y = cv[a1, 1] - cv[a0, 1]
            e1z = cv[a1, 2] - cv[a0, 2]
            e2x = cv[a2, 0] - f0
            e2y = cv[a2, 1] - cv[a0, 1]
            e2z = cv[a2, 2] - cv[a0, 2]
            nx = e1y * e2z - e1z * e2y
            ny = e1z * e2x - e1x * e2z
            nz = e1x * e2y - e1y * e2x
            if nx * f0 + ny * cv[a0, 1] + nz * cv[a0, 2] >= 0.0:
                continue
        n = 0
        for e in range(3):
            ia = tris[t, e]
            ib = tris[t, (e + 1) % 3]
            fa = cv[ia, 0]
            fb = cv[ib, 0]
            if fa >= near:
                pf[n] = fa
                pl[n] = cv[ia, 1]
                pu[n] = cv[ia, 2]
                n += 1
            if (fa >= near) != (fb >= near):
                s = (near - fa) / (fb - fa)
                pf[n] = near
                pl[n] = cv[ia, 1] + s * (cv[ib, 1] - cv[ia, 1])
                pu[n] = cv[ia, 2] + s * (cv[ib, 2] - cv[ia, 2])
                n += 1
        for k in range(n):
            sx[k] = cx - fx * pl[k] / pf[k]
            sy[k] = cy - fy * pu[k] / pf[k]
            iz[k] = 1.0 / pf[k]
        for k in range(1, n - 1):
            x0 = sx[0]
            y0 = sy[0]
            x1 = sx[k]
            y1 = sy[k]
            x2 = sx[k + 1]
            y2 = sy[k + 1]
            area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
            if abs(area) < 1e-12:
                continue
            inv = 1.0 / area
            xmin = min(x0, min(x1, x2))
            xmax = max(x0, max(x1, x2))
            ymin = min(y0, min(y1, y2))
            ymax = max(y0, max(y1, y2))
            ix0 = max(int(math.ceil(xmin - 0.5)), 0)
            ix1 = min(int(math.floor(xmax - 0.5)), W - 1)
            iy0 = max(int(math.ceil(ymin - 0.5)), 0)
            iy1 = min(int(math.floor(ymax - 0.5)), H - 1)
            # barycentric weight i = a_i * px + b_i * py + c_i; inverse depth is affine too
            a0 = (y1 - y2) * inv
            b0 = (x2 - x1) * inv
            c0 = (x1 * y2 - x2 * y1) * inv
            a1 = (y2 - y0) * inv
            b1 = (x0 - x2) * inv
            c1 = (x2 * y0 - x0 * y2) * inv
            a2 = (y0 - y1) * inv
            b2 = (x1 - x0) * inv
            c2 = (x0 * y1 - x1 * y0) * inv
            z0 = iz[0]
            z1 = iz[k]
            z2 = iz[k + 1]
            za = a0 * z0 + a1 * z1 + a2 * z2
            zb = b0 * z0 + b1 * z1 + b2 * z2
            zc = c0 * z0 + c1 * z1 + c2 * z2
            for y in range(iy0, iy1 + 1):
                py = y + 0.5
                r0 = b0 * py + c0
                r1 = b1 * py + c1
                r2 = b2 * py + c2
                # exact span of pixel centers inside all three edges (with a small overlap tolerance)
                lo = ix0 + 0.5
                hi = ix1 + 0.5
                lo, hi = _span(a0, r0, lo, hi)
                lo, hi = _span(a1, r1, lo, hi)
                lo, hi = _span(a2, r2, lo, hi)
                if hi < lo:
                    continue
                xs = int(math.ceil(lo - 0.5))
                xe = int(math.floor(hi - 0.5))
                rz = zb * py + zc
                for x in range(xs, xe + 1):
                    q = za * (x + 0.5) + rz
                    if q > inear or q < ifar:
                        continue
                    if q > izbuf[y, x]:
                        izbuf[y, x] = q
                        ids[y, x] = t


@numba.njit(inline="always")
def _hash2(ix, iy):
    h = ix * 73856093 ^ iy * 19349663
    h = (h ^ (h >> 13)) * 1274126177
    h = h ^ (h >> 16)
    return (h & 0xFFFF) * (1.0 / 65535.0)


@numba.njit(inline="always")
def _smooth(t):
    return t * t * (3.0 - 2.0 * t)


@numba.njit(cache=True, nogil=True)
def _value_noise2(x, y):
    fx = math.floor(x)
    fy = math.floor(y)
    ix = np.int64(fx)
    iy = np.int64(fy)
    tx = _smooth(x - fx)
    ty = _smooth(y - fy)
    c00 = _hash2(ix, iy)
    c10 = _hash2(ix + 1, iy)
    c01 = _hash2(ix, iy + 1)
    c11 = _hash2(ix + 1, iy + 1)
    a = c00 + tx * (c10 - c00)
    b = c01 + tx * (c11 - c01)
    return a + ty * (b - a)


@numba.njit(cache=True, nogil=True)
def _shade(
    ids, zbuf, cam, rot, fx, fy, cx, cy,
    tri_color, tri_mat, tri_offset, tri_axis, noise, octave_w,
    s_centers, s_radii, s_origin, s_cell, s_nx, s_ny, s_starts, s_items,
    shade_factor, bg, rgb, depth,
):
    H, W = ids.shape
    dus = np.empty(W)
    for x in range(W):
        dus[x] = (cx - (x + 0.5)) / fx
    inv_cell = 1.0 / s_cell
    for y in range(H):
        dv = (cy - (y + 0.5)) / fy
        bx = rot[0, 0] + rot[0, 2] * dv
        by = rot[1, 0] + rot[1, 2] * dv
        bz = rot[2, 0] + rot[2, 2] * dv
        for x in range(W):
            t = ids[y, x]
            if t < 0:
                rgb[y, x, 0] = bg[0]
                rgb[y, x, 1] = bg[1]
                rgb[y, x, 2] = bg[2]
                depth[y, x] = np.float32(3.4028234663852886e38)
                continue
            d = zbuf[y, x]
            du = dus[x]
            px = cam[0] + d * (bx + rot[0, 1] * du)
            py = cam[1] + d * (by + rot[1, 1] * du)
            pz = cam[2] + d * (bz + rot[2, 1] * du)
            m = tri_mat[t]
            factor = 1.0
            amp = noise[m, 1]
            if amp > 0.0:
                qx = px - tri_offset[t, 0]
                qy = py - tri_offset[t, 1]
                qz = pz - tri_offset[t, 2]
                # planar projection along the face's dominant normal axis
                ax = tri_axis[t]
                u = qy if ax == 0 else qx
                v = qy if ax == 2 else qz
                inv_fp = fx / d
                acc = 0.0
                cell = noise[m, 0]
                s1 = 1.0 / cell
                for o in range(octave_w.shape[0]):
                    if o > 0:
                        cell *= 2.0
                        s1 *= 0.5
                    # octaves finer than ~1-2 px fade to their mean to avoid aliasing
                    fade = min(max(cell * inv_fp - 1.0, 0.0), 1.0)
                    n = 0.5
                    if fade > 0.0:
                        n = 0.5 + fade * (_value_noise2(u * s1 + 17.3 * o, v * s1 + 5.1 * o) - 0.5)
                    acc += octave_w[o] * n
                factor = 1.0 - amp + 2.0 * amp * acc
            if m != 6 and s_radii.shape[0] > 0:
                gx = int(math.floor((px - s_origin[0]) * inv_cell))
                gy = int(math.floor((py - s_origin[1]) * inv_cell))
                if 0 <= gx < s_nx and 0 <= gy < s_ny:
                    b = gy * s_nx + gx
                    for j in range(s_starts[b], s_starts[b + 1]):
                        k = s_items[j]
                        ddx = px - s_centers[k, 0]
                        ddy = py - s_centers[k, 1]
                        r = s_radii[k]
                        d2 = ddx * ddx + ddy * ddy
                        if d2 < r * r and pz < s_centers[k, 2] - math.sqrt(r * r - d2):
                            factor *= shade_factor
                            break
            r0 = min(max(round(tri_color[t, 0] * factor * 255.0), 0.0), 255.0)
            r1 = min(max(round(tri_color[t, 1] * factor * 255.0), 0.0), 255.0)
            r2 = min(max(round(tri_color[t, 2] * factor * 255.0), 0.0), 255.0)
            if r0 == bg[0] and r1 == bg[1] and r2 == bg[2]:
                r2 = r2 - 1.0 if r2 > 0 else r2 + 1.0
            rgb[y, x, 0] = np.uint8(r0)
            rgb[y, x, 1] = np.uint8(r1)
            rgb[y, x, 2] = np.uint8(r2)
            depth[y, x] = np.float32(d)


@dataclass
class TriangleSoup:
    """World-space geometry for one snapshot."""

    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int32
    colors: np.ndarray  # (T, 3) float64 in [0, 1], lighting included
    materials: np.ndarray  # (T,) int8
    offsets: np.ndarray  # (T, 3) float64, subtracted before albedo lookup
    ranges: dict  # owner body id -> (first, last+1) triangle indices
    cull: np.ndarray | None = None  # (T,) uint8; 1 = outward-wound closed surface, back faces skipped
    axes: np.ndarray | None = None  # (T,) int8 dominant normal axis, selects the albedo projection plane


def lambert(normals: np.ndarray, two_sided: np.ndarray | None = None) -> np.ndarray:
    ndl = normals @ SUN
    if two_sided is not None:
        ndl = np.where(two_sided, np.abs(ndl), ndl)
    return 0.5 + 0.5 * np.clip(ndl, 0.0, 1.0)


def dominant_axes(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.argmax(np.abs(face_normals(vertices, triangles)), axis=1).astype(np.int8))


def face_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a = vertices[triangles[:, 0]]
    n = np.cross(vertices[triangles[:, 1]] - a, vertices[triangles[:, 2]] - a)
    length = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(length == 0, 1.0, length)


def render_soup(
    soup: TriangleSoup,
    cam_pos: np.ndarray,
    cam_rot: np.ndarray,
    intr: Intrinsics,
    shade: ShadeGrid,
    shade_factor: float,
    skip: tuple[int, int] = (0, 0),
    background=BACKGROUND,
    cull: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize ``soup`` from a camera at ``cam_pos`` whose axes are the columns of ``cam_rot``.

    ``cull`` overrides ``soup.cull`` for this camera.
    """
    cv = (soup.vertices - cam_pos) @ cam_rot
    if cull is None:
        cull = soup.cull if soup.cull is not None else np.zeros(len(soup.triangles), np.uint8)
    izbuf = np.zeros((intr.height, intr.width))
    ids = np.full((intr.height, intr.width), -1, dtype=np.int64)
    _raster(
        np.ascontiguousarray(cv), soup.triangles, cull, skip[0], skip[1], intr.width, intr.height,
        intr.fx, intr.fy, intr.cx, intr.cy, intr.near, intr.far, izbuf, ids,
    )
    with np.errstate(divide="ignore"):
        zbuf = 1.0 / izbuf
    axes = soup.axes if soup.axes is not None else dominant_axes(soup.vertices, soup.triangles)
    rgb = np.empty((intr.height, intr.width, 3), dtype=np.uint8)
    depth = np.empty((intr.height, intr.width), dtype=np.float32)
    _shade(
        ids, zbuf, np.ascontiguousarray(cam_pos, dtype=np.float64), np.ascontiguousarray(cam_rot, dtype=np.float64),
        intr.fx, intr.fy, intr.cx, intr.cy,
        soup.colors, soup.materials, soup.offsets, axes, _NOISE, np.array(_OCTAVE_WEIGHTS),
        shade.centers, shade.radii, shade.origin, shade.cell, shade.nx, shade.ny, shade.starts, shade.items,
        float(shade_factor), np.array(background, dtype=np.float64), rgb, depth,
    )
    return rgb, depth


def box_mesh(center, size) -> tuple[np.ndarray, np.ndarray]:
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(size, dtype=np.float64) / 2.0
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
    v = c + corners * h
    f = np.array(
        [
            [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
            [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
            [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],
        ],
        dtype=np.int32,
    )
    return v, f


def drone_mesh(scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Quadrotor silhouette: body, two crossed arms, four rotor discs."""
    parts = [box_mesh((0, 0, 0), (0.32, 0.22, 0.14))]
    arm = 0.62
    d = arm / (2 * math.sqrt(2))
    parts.append(_rotated_box((0, 0, 0.02), (arm, 0.05, 0.04), math.pi / 4))
    parts.append(_rotated_box((0, 0, 0.02), (arm, 0.05, 0.04), -math.pi / 4))
    for sx in (-1, 1):
        for sy in (-1, 1):
            parts.append(box_mesh((sx * d, sy * d, 0.06), (0.2, 0.2, 0.03)))
    verts, faces, base = [], [], 0
    for v, f in parts:
        verts.append(v * scale)
        faces.append(f + base)
        base += len(v)
    return np.vstack(verts), np.vstack(faces).astype(np.int32)


def _rotated_box(center, size, yaw):
    v, f = box_mesh((0, 0, 0), size)
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return v @ rot.T + np.asarray(center, dtype=np.float64), f


def hsv_to_rgb(h_deg: float, s: float, v: float) -> tuple[float, float, float]:
    h = (h_deg % 360.0) / 60.0
    i = int(h) % 6
    f = h - int(h)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
