"""Multi-source distance sensor: depth-map sampling, exact ray casting and DEM lookup, fused and noised."""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numba
import numpy as np

from .geometry import Pose6DOF
from .render import FAR_SENTINEL, drone_mesh
from .scene import Archetype, Scene, Terrain, canopy_geometry, terrain_height

FUSION_TOLERANCE = 0.05
DIRECTION_TOLERANCE = 1e-9


class SourceMask(enum.IntFlag):
    NONE = 0
    DEPTH = 1
    RAY = 2
    DEM = 4

    def label(self) -> str:
        names = [n.lower() for n, bit in (("DEPTH", 1), ("RAY", 2), ("DEM", 4)) if self & bit]
        return "|".join(names)


class HitKind(str, enum.Enum):
    TERRAIN = "terrain"
    CANOPY = "canopy"
    FLORA = "flora"
    DRONE = "drone"


@dataclass(frozen=True)
class RayHit:
    distance: float
    kind: HitKind
    index: int = -1  # flora index or body id; -1 for terrain


# ---------------------------------------------------------------------------
# exact ray casting


@numba.njit(cache=True)
def _terrain_hit(heights, ox, oy, cell, px, py, pz, dx, dy, dz, t_max):
    """Nearest t in [0, t_max] where the ray meets the bilinear heightfield, or -1."""
    rows, cols = heights.shape
    x1 = ox + (cols - 1) * cell
    y1 = oy + (rows - 1) * cell
    t0 = 0.0
    t1 = t_max
    # clip to the footprint
    if dx != 0.0:
        a = (ox - px) / dx
        b = (x1 - px) / dx
        t0 = max(t0, min(a, b))
        t1 = min(t1, max(a, b))
    elif px < ox or px > x1:
        return -1.0
    if dy != 0.0:
        a = (oy - py) / dy
        b = (y1 - py) / dy
        t0 = max(t0, min(a, b))
        t1 = min(t1, max(a, b))
    elif py < oy or py > y1:
        return -1.0
    if t0 > t1:
        return -1.0
    tm = 0.5 * (t0 + t1) if t1 - t0 < 1e-12 else t0 + 1e-12 * max(1.0, t1 - t0)
    c = int(math.floor((px + tm * dx - ox) / cell))
    r = int(math.floor((py + tm * dy - oy) / cell))
    c = min(max(c, 0), cols - 2)
    r = min(max(r, 0), rows - 2)
    step_c = 1 if dx > 0 else -1
    step_r = 1 if dy > 0 else -1
    t_enter = t0
    while True:
        # parameter where the ray leaves this cell
        t_exit = t1
        if dx != 0.0:
            bx = ox + (c + (1 if dx > 0 else 0)) * cell
            t_exit = min(t_exit, (bx - px) / dx)
        if dy != 0.0:
            by = oy + (r + (1 if dy > 0 else 0)) * cell
            t_exit = min(t_exit, (by - py) / dy)
        h00 = heights[r, c]
        h01 = heights[r, c + 1]
        h10 = heights[r + 1, c]
        h11 = heights[r + 1, c + 1]
        u0 = (px - (ox + c * cell)) / cell
        v0 = (py - (oy + r * cell)) / cell
        du = dx / cell
        dv = dy / cell
        e = h00 - h01 - h10 + h11
        bu = h01 - h00
        bv = h10 - h00
        A = -e * du * dv
        B = dz - bu * du - bv * dv - e * (u0 * dv + v0 * du)
        C = pz - h00 - bu * u0 - bv * v0 - e * u0 * v0
        lo = max(t_enter, 0.0)
        hi = t_exit
        best = -1.0
        if abs(A) < 1e-14:
            if B != 0.0:
                t = -C / B
                if lo - 1e-12 <= t <= hi + 1e-12:
                    best = t
            elif C == 0.0:
                best = lo
        else:
            disc = B * B - 4.0 * A * C
            if disc >= 0.0:
                sq = math.sqrt(disc)
                q = -0.5 * (B + sq) if B >= 0 else -0.5 * (B - sq)
                ra = q / A
                rb = C / q if q != 0.0 else ra
                if ra > rb:
                    ra, rb = rb, ra
                if lo - 1e-12 <= ra <= hi + 1e-12:
                    best = ra
                elif lo - 1e-12 <= rb <= hi + 1e-12:
                    best = rb
        if best >= 0.0:
            return max(best, 0.0)
        if t_exit >= t1:
            return -1.0
        # advance to the neighbouring cell across the nearer boundary
        tx = math.inf
        ty = math.inf
        if dx != 0.0:
            tx = (ox + (c + (1 if dx > 0 else 0)) * cell - px) / dx
        if dy != 0.0:
            ty = (oy + (r + (1 if dy > 0 else 0)) * cell - py) / dy
        if tx <= ty:
            c += step_c
        if ty <= tx:
            r += step_r
        if c < 0 or c > cols - 2 or r < 0 or r > rows - 2:
            return -1.0
        t_enter = t_exit


@numba.njit(cache=True)
def _triangles_hit(v0, e1, e2, px, py, pz, dx, dy, dz, t_max):
    """Moller-Trumbore over all triangles; returns (t, index) of the nearest hit."""
    best = t_max
    idx = -1
    for i in range(v0.shape[0]):
        ax, ay, az = e1[i, 0], e1[i, 1], e1[i, 2]
        bx, by, bz = e2[i, 0], e2[i, 1], e2[i, 2]
        hx = dy * bz - dz * by
        hy = dz * bx - dx * bz
        hz = dx * by - dy * bx
        det = ax * hx + ay * hy + az * hz
        if abs(det) < 1e-14:
            continue
        inv = 1.0 / det
        sx = px - v0[i, 0]
        sy = py - v0[i, 1]
        sz = pz - v0[i, 2]
        u = (sx * hx + sy * hy + sz * hz) * inv
        if u < 0.0 or u > 1.0:
            continue
        qx = sy * az - sz * ay
        qy = sz * ax - sx * az
        qz = sx * ay - sy * ax
        v = (dx * qx + dy * qy + dz * qz) * inv
        if v < 0.0 or u + v > 1.0:
            continue
        t = (bx * qx + by * qy + bz * qz) * inv
        if 0.0 <= t < best:
            best = t
            idx = i
    return best, idx


@numba.njit(cache=True)
def _spheres_hit(centers, radii, px, py, pz, dx, dy, dz, t_max):
    best = t_max
    idx = -1
    for i in range(centers.shape[0]):
        lx = centers[i, 0] - px
        ly = centers[i, 1] - py
        lz = centers[i, 2] - pz
        b = lx * dx + ly * dy + lz * dz
        c = lx * lx + ly * ly + lz * lz - radii[i] * radii[i]
        disc = b * b - c
        if disc < 0.0:
            continue
        sq = math.sqrt(disc)
        t = b - sq
        if t < 0.0:
            t = b + sq  # origin inside the sphere
        if 0.0 <= t < best:
            best = t
            idx = i
    return best, idx


class RayScene:
    """Geometry for exact ray queries at one instant.

    Canopies are analytic spheres, other flora and drones are triangles, and
    terrain is the bilinear heightfield itself.
    """

    def __init__(
        self,
        terrain: Optional[Terrain] = None,
        sphere_centers=None,
        sphere_radii=None,
        sphere_ids=None,
        triangles=None,
        triangle_kinds=None,
        triangle_ids=None,
    ):
        self.terrain = terrain
        self.centers = np.ascontiguousarray(np.zeros((0, 3)) if sphere_centers is None else sphere_centers, dtype=np.float64).reshape(-1, 3)
        self.radii = np.ascontiguousarray(np.zeros(0) if sphere_radii is None else sphere_radii, dtype=np.float64)
        self.sphere_ids = np.arange(len(self.radii)) if sphere_ids is None else np.asarray(sphere_ids)
        tri = np.zeros((0, 3, 3)) if triangles is None else np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
        self.v0 = np.ascontiguousarray(tri[:, 0])
        self.e1 = np.ascontiguousarray(tri[:, 1] - tri[:, 0])
        self.e2 = np.ascontiguousarray(tri[:, 2] - tri[:, 0])
        n = len(tri)
        self.tri_kinds = [HitKind.FLORA] * n if triangle_kinds is None else list(triangle_kinds)
        self.tri_ids = np.full(n, -1) if triangle_ids is None else np.asarray(triangle_ids)
        if self.terrain is not None:
            self._heights = np.ascontiguousarray(self.terrain.heights, dtype=np.float64)

    def cast(self, origin, direction, max_range: float = 1e4) -> Optional[RayHit]:
        return cast_ray(self, origin, direction, max_range)


class RayCaster:
    """Builds per-instant RayScenes for one Scene; static flora triangles are built once."""

    def __init__(self, scene: Scene, drone_scale: float = 1.0):
        self.scene = scene
        tris, ids = [], []
        for i, inst in enumerate(scene.flora):
            if inst.archetype == Archetype.CANOPY:
                continue
            mesh = scene.meshes[inst.archetype]
            cy, sy = math.cos(inst.yaw), math.sin(inst.yaw)
            rot = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
            v = (mesh.vertices * inst.scale) @ rot.T + np.asarray(inst.position)
            tris.append(v[mesh.faces])
            ids.append(np.full(len(mesh.faces), i))
        self._flora_tris = np.concatenate(tris) if tris else np.zeros((0, 3, 3))
        self._flora_ids = np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64)
        self._canopy_idx = np.array([i for i, f in enumerate(scene.flora) if f.archetype == Archetype.CANOPY], dtype=np.int64)
        self._centers, self._radii = scene.canopy_spheres()
        dv, df = drone_mesh(drone_scale)
        self._drone_tris = dv[df]

    def at(self, flora_offsets: Optional[np.ndarray] = None, drones: Optional[Mapping[int, Pose6DOF]] = None, exclude_body: Optional[int] = None) -> RayScene:
        tris = self._flora_tris
        centers = self._centers
        if flora_offsets is not None and len(flora_offsets):
            tris = tris + flora_offsets[self._flora_ids][:, None, :]
            if len(self._canopy_idx):
                centers = centers + flora_offsets[self._canopy_idx]
        kinds = [HitKind.FLORA] * len(tris)
        ids = [self._flora_ids]
        parts = [tris]
        for body_id, pose in sorted((drones or {}).items()):
            if body_id == exclude_body:
                continue
            parts.append(self._drone_tris @ pose.rotation().T + pose.position)
            kinds.extend([HitKind.DRONE] * len(self._drone_tris))
            ids.append(np.full(len(self._drone_tris), body_id))
        return RayScene(
            self.scene.terrain, centers, self._radii, self._canopy_idx,
            np.concatenate(parts), kinds, np.concatenate(ids),
        )


def cast_ray(target: RayScene, origin, direction, max_range: float = 1e4) -> Optional[RayHit]:
    """Nearest intersection along a unit-length ray, or None on a miss."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    if not (np.all(np.isfinite(o)) and np.all(np.isfinite(d))):
        raise ValueError("ray origin and direction must be finite")
    if abs(float(np.linalg.norm(d)) - 1.0) > DIRECTION_TOLERANCE:
        raise ValueError("ray direction must be normalized")
    px, py, pz = (float(v) for v in o)
    dx, dy, dz = (float(v) for v in d)
    best: Optional[RayHit] = None
    limit = float(max_range)
    if target.terrain is not None:
        t = target.terrain
        th = _terrain_hit(target._heights, t.origin[0], t.origin[1], t.cell_size, px, py, pz, dx, dy, dz, limit)
        if th >= 0.0:
            best = RayHit(th, HitKind.TERRAIN)
            limit = th
    if len(target.radii):
        ts, i = _spheres_hit(target.centers, target.radii, px, py, pz, dx, dy, dz, limit)
        if i >= 0:
            best = RayHit(ts, HitKind.CANOPY, int(target.sphere_ids[i]))
            limit = ts
    if len(target.v0):
        tt, i = _triangles_hit(target.v0, target.e1, target.e2, px, py, pz, dx, dy, dz, limit)
        if i >= 0:
            best = RayHit(tt, target.tri_kinds[i], int(target.tri_ids[i]))
    return best


# ---------------------------------------------------------------------------
# individual sources


def sample_depth_source(frame, region: tuple[int, int, int, int]) -> Optional[float]:
    """Median planar depth over ``region`` = (x, y, width, height), ignoring far-sentinel pixels."""
    depth = frame.depth if hasattr(frame, "depth") else np.asarray(frame)
    x, y, w, h = region
    H, W = depth.shape
    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > W or y + h > H:
        raise ValueError(f"region {region} outside {W}x{H} frame")
    vals = np.asarray(depth[y : y + h, x : x + w], dtype=np.float64).ravel()
    vals = vals[np.isfinite(vals) & (vals < float(FAR_SENTINEL))]
    if vals.size == 0:
        return None
    return float(np.median(vals))


def center_region(width: int, height: int, size: int = 5) -> tuple[int, int, int, int]:
    return ((width - size) // 2, (height - size) // 2, size, size)


def planar_to_range(planar: float, du: float = 0.0, dv: float = 0.0) -> float:
    """Convert optical-axis depth to distance along the pixel ray with normalized offsets (du, dv)."""
    return planar * math.sqrt(1.0 + du * du + dv * dv)


def dem_range(terrain: Terrain, position) -> Optional[float]:
    x, y, z = (float(v) for v in position)
    if not terrain.contains(x, y):
        return None
    diff = z - terrain_height(terrain, x, y)
    return diff if diff >= 0 else None


def fuse(depth: Optional[float], ray: Optional[float], dem: Optional[float], tolerance: float = FUSION_TOLERANCE) -> tuple[Optional[float], SourceMask]:
    """Minimum of the present sources; the mask marks those within ``tolerance`` of it."""
    present = [(v, bit) for v, bit in ((depth, SourceMask.DEPTH), (ray, SourceMask.RAY), (dem, SourceMask.DEM)) if v is not None]
    if not present:
        return None, SourceMask.NONE
    gt = min(v for v, _ in present)
    mask = SourceMask.NONE
    for v, bit in present:
        if v - gt <= tolerance:
            mask |= bit
    return gt, mask


# ---------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.0
    bias: float = 0.0
    quantum: float = 0.0
    dropout_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0 or self.quantum < 0:
            raise ValueError("sigma and quantum must be >= 0")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must lie in [0, 1)")

    def rng(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed))


def quantize(x: float, quantum: float) -> float:
    """Round to the nearest multiple of ``quantum``, halves away from zero."""
    if quantum == 0:
        return x
    n = math.floor(abs(x) / quantum + 0.5)
    return math.copysign(n * quantum, x)


def apply_noise(ground_truth: float, model: NoiseModel, rng: np.random.Generator) -> Optional[float]:
    """Noisy reading, or None for a dropout. Draws exactly two variates per call."""
    if ground_truth < 0:
        raise ValueError("ground_truth must be >= 0")
    u = rng.random()
    eta = rng.standard_normal()
    if u < model.dropout_prob:
        return None
    return max(quantize(ground_truth + model.bias + model.sigma * eta, model.quantum), 0.0)


# ---------------------------------------------------------------------------
# sensor


@dataclass(frozen=True)
class DistanceReading:
    tick: int
    ground_truth: float  # nan when no source saw anything
    noisy: float  # nan when invalid
    source_mask: SourceMask
    valid: bool


class RangeSensor:
    """Downward-looking rangefinder on a body, fed by three independent sources."""

    def __init__(
        self,
        caster: RayCaster,
        body_id: int,
        noise: NoiseModel = NoiseModel(),
        mount: Pose6DOF = Pose6DOF(0.0, 0.0, 0.0),
        direction=(0.0, 0.0, -1.0),
        min_range: float = 0.05,
        max_range: float = 100.0,
        region_size: int = 5,
    ):
        if not 0 <= min_range < max_range:
            raise ValueError("need 0 <= min_range < max_range")
        self.caster = caster
        self.body_id = body_id
        self.noise = noise
        self.mount = mount
        self.direction = np.asarray(direction, dtype=np.float64) / np.linalg.norm(direction)
        self.min_range = min_range
        self.max_range = max_range
        self.region_size = region_size
        self._rng = noise.rng()

    def measure(self, snapshot, frame=None) -> DistanceReading:
        """``frame`` is an optional depth frame from a camera whose axis matches the sensor ray."""
        pose = snapshot.poses[self.body_id].compose(self.mount)
        origin = pose.position
        dirw = pose.rotation() @ self.direction
        scene = self.caster.at(snapshot.flora_offsets, snapshot.poses, exclude_body=self.body_id)
        hit = cast_ray(scene, origin, dirw, self.max_range)
        ray = hit.distance if hit is not None else None
        depth = None
        if frame is not None:
            H, W = frame.depth.shape
            depth = sample_depth_source(frame, center_region(W, H, self.region_size))
        dem = None
        if dirw[2] < -0.999999:  # vertical DEM lookup only means range for a downward ray
            dem = dem_range(self.caster.scene.terrain, origin)
        gt, mask = fuse(depth, ray, dem)
        if gt is None:
            return DistanceReading(snapshot.tick, math.nan, math.nan, mask, False)
        noisy = apply_noise(gt, self.noise, self._rng)
        valid = noisy is not None and self.min_range <= gt <= self.max_range
        return DistanceReading(snapshot.tick, gt, noisy if valid else math.nan, mask, valid)


SENSOR_LOG_HEADER = ["tick", "gt", "noisy", "valid", "mask"]


class SensorLog:
    def __init__(self, path: str | Path):
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(SENSOR_LOG_HEADER)

    def write(self, r: DistanceReading) -> None:
        fmt = lambda v: "" if math.isnan(v) else repr(v)  # noqa: E731
        self._w.writerow([r.tick, fmt(r.ground_truth), fmt(r.noisy), int(r.valid), r.source_mask.label()])

    def close(self) -> None:
        self._fh.close()
