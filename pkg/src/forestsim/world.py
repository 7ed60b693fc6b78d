"""World server: owns the scene, advances ticks and renders every camera per snapshot."""
from __future__ import annotations

import csv
import io
import math
import os
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import BinaryIO, Iterator, Mapping

import numpy as np

from .geometry import IDENTITY, QUAT_TOLERANCE, Pose6DOF
from .render import (
    BACKGROUND,
    FAR_SENTINEL,
    MAT_BARK,
    MAT_FIDUCIAL,
    MAT_FLAT,
    MAT_FOLIAGE,
    MAT_GRASS,
    MAT_ROCK,
    MAT_TERRAIN,
    Intrinsics,
    ShadeGrid,
    TriangleSoup,
    dominant_axes,
    drone_mesh,
    face_normals,
    hsv_to_rgb,
    lambert,
    render_soup,
)
from .scene import Archetype, Scene, sway_offsets
from .vehicle import GustProcess

VISUAL_NONE = 0
VISUAL_DRONE = 1

ARCHETYPE_STYLE = {
    Archetype.TRUNK: ((0.42, 0.30, 0.20), MAT_BARK),
    Archetype.CANOPY: ((0.22, 0.45, 0.18), MAT_FOLIAGE),
    Archetype.BUSH: ((0.30, 0.50, 0.20), MAT_FOLIAGE),
    Archetype.ROCK: ((0.50, 0.50, 0.48), MAT_ROCK),
    Archetype.GRASS: ((0.45, 0.62, 0.25), MAT_GRASS),
}
TERRAIN_COLOR = (0.40, 0.45, 0.25)


class WorldError(Exception):
    pass


@dataclass(frozen=True)
class CameraSpec:
    camera_id: int
    owner_body: int
    width: int = 320
    height: int = 240
    hfov: float = math.pi / 2
    near: float = 0.05
    far: float = 200.0
    mount_offset: Pose6DOF = IDENTITY

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ValueError("camera width and height must be >= 16")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if not 0 < self.hfov < math.pi:
            raise ValueError("hfov must lie in (0, pi)")
        if not self.mount_offset.is_normalized():
            raise ValueError("mount_offset quaternion must be normalized")

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics.from_fov(self.width, self.height, self.hfov, self.near, self.far)


@dataclass(frozen=True, eq=False)
class Frame:
    camera_id: int
    tick: int
    sim_time: float
    rgb: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float32 planar meters, FAR_SENTINEL where empty

    def __post_init__(self):
        self.rgb.setflags(write=False)
        self.depth.setflags(write=False)

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, Frame)
            and (self.camera_id, self.tick, self.sim_time) == (other.camera_id, other.tick, other.sim_time)
            and np.array_equal(self.rgb, other.rgb)
            and self.depth.tobytes() == other.depth.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True)
class WorldSnapshot:
    tick: int
    sim_time: float
    poses: Mapping[int, Pose6DOF]
    wind_velocity: tuple[float, float, float]
    flora_offsets: np.ndarray = field(repr=False)  # (n_flora, 3)


@dataclass(frozen=True)
class WorldConfig:
    dt: float = 1.0 / 30.0
    shade_factor: float = 0.45
    drone_scale: float = 1.0
    fiducial: tuple[float, float, float, float] | None = None  # x, y, z, size; faces -x
    render_workers: int = 0  # 0: one per CPU core, capped at 4
    render_cache: bool = True

    def __post_init__(self):
        if not 0 < self.shade_factor <= 1:
            raise ValueError("shade_factor must be in (0, 1]")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.render_workers < 0:
            raise ValueError("render_workers must be >= 0")


@dataclass
class _Body:
    body_id: int
    visual: int
    hue: float
    pose: Pose6DOF
    pose_tick: int


def fiducial_color(tick: int) -> tuple[int, int, int]:
    return (tick & 0xFF, (tick >> 8) & 0xFF, 0x80 | ((tick >> 16) & 0x7F))


def decode_fiducial(rgb) -> int:
    r, g, b = (int(c) for c in rgb)
    return r | (g << 8) | ((b & 0x7F) << 16)


class WorldServer:
    """Game-engine stand-in.

    Poses for the next tick may be submitted at any time; ``advance_tick``
    freezes the latest pose of every body (held over when none arrived) and
    the wind-displaced flora into an immutable snapshot, and all frames of
    that tick are rendered from it.
    """

    def __init__(self, scene: Scene, config: WorldConfig = WorldConfig()):
        self.scene = scene
        self.config = config
        self.tick = -1
        self.snapshot: WorldSnapshot | None = None
        self._bodies: dict[int, _Body] = {}
        self._cameras: dict[int, CameraSpec] = {}
        self._lock = threading.Lock()
        w = scene.wind
        self._gust = GustProcess(w.mean_velocity, w.turbulence_intensity, w.correlation_time, w.gust_seed)
        self._gains = np.array([f.sway_gain for f in scene.flora], dtype=np.float64)
        self._phases = np.array([f.sway_phase for f in scene.flora], dtype=np.float64)
        self._build_static()
        self._soup_key = None
        self._layout_cache: dict | None = None
        self._soup: TriangleSoup | None = None
        self._shade: ShadeGrid | None = None
        self._render_cache: dict[int, tuple] = {}
        workers = config.render_workers or min(os.cpu_count() or 1, 4)
        self._pool = ThreadPoolExecutor(workers) if workers > 1 else None

    # -- static geometry -------------------------------------------------
    def _build_static(self) -> None:
        t = self.scene.terrain
        x0, y0 = t.origin
        xs = x0 + np.arange(t.cols) * t.cell_size
        ys = y0 + np.arange(t.rows) * t.cell_size
        gx, gy = np.meshgrid(xs, ys)
        tv = np.column_stack([gx.ravel(), gy.ravel(), t.heights.ravel()])
        r, c = np.meshgrid(np.arange(t.rows - 1), np.arange(t.cols - 1), indexing="ij")
        a = (r * t.cols + c).ravel()
        tt = np.concatenate([np.column_stack([a, a + 1, a + t.cols + 1]), np.column_stack([a, a + t.cols + 1, a + t.cols])])
        tcol = np.asarray(TERRAIN_COLOR) * lambert(face_normals(tv, tt))[:, None]

        verts = [tv]
        tris = [tt.astype(np.int32)]
        cols = [tcol]
        mats = [np.full(len(tt), MAT_TERRAIN, np.int8)]
        cull = [np.ones(len(tt), np.uint8)]  # heightfield faces point up
        canopy_tris = []
        vert_owner = [np.full(len(tv), -1, np.int64)]
        tri_owner = [np.full(len(tt), -1, np.int64)]
        base = len(tv)
        for i, inst in enumerate(self.scene.flora):
            mesh = self.scene.meshes[inst.archetype]
            cy, sy = math.cos(inst.yaw), math.sin(inst.yaw)
            rot = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
            v = (mesh.vertices * inst.scale) @ rot.T + np.asarray(inst.position)
            f = mesh.faces + base
            n = face_normals(v, mesh.faces)
            centroid = v.mean(axis=0)
            outward = np.einsum("ij,ij->i", n, v[mesh.faces].mean(axis=1) - centroid)
            n = np.where(outward[:, None] < 0, -n, n)
            f = np.where(outward[:, None] < 0, f[:, [0, 2, 1]], f)
            color, mat = ARCHETYPE_STYLE[inst.archetype]
            two_sided = np.full(len(f), inst.archetype == Archetype.GRASS)
            verts.append(v)
            tris.append(f.astype(np.int32))
            cols.append(np.asarray(color) * lambert(n, two_sided)[:, None])
            mats.append(np.full(len(f), mat, np.int8))
            cull.append(np.full(len(f), inst.archetype != Archetype.GRASS, np.uint8))
            if inst.archetype == Archetype.CANOPY:
                t0 = sum(len(x) for x in tris) - len(f)
                canopy_tris.append((t0, t0 + len(f)))
            vert_owner.append(np.full(len(v), i, np.int64))
            tri_owner.append(np.full(len(f), i, np.int64))
            base += len(v)
        self._static_verts = np.vstack(verts)
        self._static_tris = np.vstack(tris)
        self._static_colors = np.vstack(cols)
        self._static_mats = np.concatenate(mats)
        self._static_cull = np.concatenate(cull)
        self._static_axes = dominant_axes(self._static_verts, self._static_tris)
        self._canopy_tris = canopy_tris
        self._vert_flora = np.concatenate(vert_owner)
        self._tri_flora = np.concatenate(tri_owner)
        self._flora_vert_mask = self._vert_flora >= 0
        self._canopy_idx = np.array([i for i, f in enumerate(self.scene.flora) if f.archetype == Archetype.CANOPY], dtype=np.int64)
        self._canopy_centers, self._canopy_radii = self.scene.canopy_spheres()
        dv, df = drone_mesh(self.config.drone_scale)
        self._drone_v, self._drone_f = dv, df
        fid = self.config.fiducial
        if fid is not None:
            x, y, z, s = fid
            h = s / 2
            self._fid_v = np.array([[x, y - h, z - h], [x, y + h, z - h], [x, y + h, z + h], [x, y - h, z + h]])
            self._fid_f = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int32)

    # -- registration and pose intake -------------------------------------
    def register_body(self, body_id: int, initial_pose: Pose6DOF, visual: int = VISUAL_DRONE, hue: float = 0.0) -> bool:
        with self._lock:
            if body_id in self._bodies:
                raise WorldError(f"body {body_id} already registered")
            if visual not in (VISUAL_NONE, VISUAL_DRONE):
                raise WorldError(f"unknown visual {visual}")
            self._check_pose(initial_pose)
            self._bodies[body_id] = _Body(body_id, visual, hue, initial_pose, max(self.tick, 0))
            self._soup_key = None
            self._layout_cache = None
            return True

    def register_camera(self, camera: CameraSpec) -> bool:
        with self._lock:
            if camera.camera_id in self._cameras:
                raise WorldError(f"camera {camera.camera_id} already registered")
            if camera.owner_body not in self._bodies:
                raise WorldError(f"camera owner {camera.owner_body} is not a registered body")
            self._cameras[camera.camera_id] = camera
            return True

    @property
    def bodies(self) -> list[int]:
        return list(self._bodies)

    @property
    def cameras(self) -> list[CameraSpec]:
        return list(self._cameras.values())

    def body_hue(self, body_id: int) -> float:
        return self._bodies[body_id].hue

    @staticmethod
    def _check_pose(pose: Pose6DOF) -> None:
        if not pose.is_finite():
            raise WorldError("pose has non-finite components")
        if not pose.is_normalized(QUAT_TOLERANCE):
            raise WorldError(f"pose quaternion not normalized (|q| - 1 = {pose.quat_error():.3g})")

    def submit_pose(self, body_id: int, tick: int, pose: Pose6DOF) -> bool:
        """Store ``pose`` as the body's latest; the last submission before a tick wins."""
        with self._lock:
            body = self._bodies.get(body_id)
            if body is None:
                raise WorldError(f"unknown body {body_id}")
            self._check_pose(pose)
            body.pose = pose
            body.pose_tick = tick
            return True

    # -- ticking ----------------------------------------------------------
    def advance_tick(self) -> WorldSnapshot:
        with self._lock:
            if not self._bodies:
                raise WorldError("advance_tick needs at least one registered body")
            self.tick += 1
            wind = self._gust.current if self.tick == 0 else self._gust.step(self.config.dt)
            sim_time = self.tick * self.config.dt
            offsets = sway_offsets(self._gains, self._phases, wind, sim_time, self.scene.sway)
            offsets.setflags(write=False)
            poses = MappingProxyType({b.body_id: b.pose for b in self._bodies.values()})
            self.snapshot = WorldSnapshot(self.tick, sim_time, poses, tuple(float(v) for v in wind), offsets)
            return self.snapshot

    # -- geometry per snapshot -------------------------------------------
    def _layout(self) -> dict:
        """Topology and colors for the current body set; rebuilt on registration."""
        if self._layout_cache is not None:
            return self._layout_cache
        tris = [self._static_tris]
        cols = [self._static_colors]
        mats = [self._static_mats]
        cull = [self._static_cull]
        axes = [self._static_axes]
        base_v = len(self._static_verts)
        base_t = len(self._static_tris)
        ranges = {}
        drones = []
        for body in self._bodies.values():
            if body.visual != VISUAL_DRONE:
                continue
            nf = len(self._drone_f)
            tris.append(self._drone_f + base_v)
            cols.append(np.tile(hsv_to_rgb(body.hue, 0.85, 0.85), (nf, 1)))
            mats.append(np.full(nf, MAT_FLAT, np.int8))
            cull.append(np.zeros(nf, np.uint8))
            axes.append(np.zeros(nf, np.int8))
            ranges[body.body_id] = (base_t, base_t + nf)
            drones.append((body.body_id, base_v))
            base_v += len(self._drone_v)
            base_t += nf
        fid_slot = None
        if self.config.fiducial is not None:
            tris.append(self._fid_f + base_v)
            cols.append(np.zeros((2, 3)))
            mats.append(np.full(2, MAT_FIDUCIAL, np.int8))
            cull.append(np.zeros(2, np.uint8))
            axes.append(np.zeros(2, np.int8))
            fid_slot = (base_v, base_t)
            base_v += 4
            base_t += 2
        verts = np.empty((base_v, 3))
        if fid_slot is not None:
            verts[fid_slot[0] : fid_slot[0] + 4] = self._fid_v
        self._layout_cache = {
            "verts": verts,
            "tris": np.ascontiguousarray(np.vstack(tris), dtype=np.int32),
            "colors": np.ascontiguousarray(np.vstack(cols), dtype=np.float64),
            "mats": np.ascontiguousarray(np.concatenate(mats)),
            "cull": np.ascontiguousarray(np.concatenate(cull)),
            "axes": np.ascontiguousarray(np.concatenate(axes)),
            "offsets": np.zeros((base_t, 3)),
            "ranges": ranges,
            "drones": drones,
            "fiducial": fid_slot,
        }
        return self._layout_cache

    def soup(self, snap: WorldSnapshot) -> tuple[TriangleSoup, ShadeGrid]:
        """World-space triangles and canopy shade grid for ``snap`` (cached for the latest snapshot)."""
        key = (snap.tick, id(snap))
        if self._soup_key == key:
            return self._soup, self._shade
        lay = self._layout()
        n_static = len(self._static_verts)
        verts = lay["verts"].copy()
        verts[:n_static] = self._static_verts
        verts[:n_static][self._flora_vert_mask] += snap.flora_offsets[self._vert_flora[self._flora_vert_mask]]
        for body_id, base in lay["drones"]:
            pose = snap.poses[body_id]
            verts[base : base + len(self._drone_v)] = self._drone_v @ pose.rotation().T + pose.position
        offsets = lay["offsets"].copy()
        mask = self._tri_flora >= 0
        offsets[: len(self._tri_flora)][mask] = snap.flora_offsets[self._tri_flora[mask]]
        colors = lay["colors"]
        if lay["fiducial"] is not None:
            colors = colors.copy()
            t0 = lay["fiducial"][1]
            colors[t0 : t0 + 2] = np.array(fiducial_color(snap.tick)) / 255.0
        soup = TriangleSoup(verts, lay["tris"], colors, lay["mats"], offsets, lay["ranges"], lay["cull"], lay["axes"])
        centers = self._canopy_centers
        if len(self._canopy_idx):
            centers = centers + snap.flora_offsets[self._canopy_idx]
        shade = ShadeGrid.build(centers, self._canopy_radii)
        self._soup_key, self._soup, self._shade = key, soup, shade
        return soup, shade

    def camera_pose(self, snap: WorldSnapshot, camera: CameraSpec) -> Pose6DOF:
        if camera.owner_body not in snap.poses:
            raise WorldError(f"camera owner {camera.owner_body} missing from snapshot")
        return snap.poses[camera.owner_body].compose(camera.mount_offset)

    def _geometry_key(self, snap: WorldSnapshot) -> bytes:
        parts = [snap.flora_offsets.tobytes()]
        for body in self._bodies.values():
            if body.visual == VISUAL_DRONE:
                parts.append(struct.pack("<7d", *snap.poses[body.body_id].as_tuple()))
        if self.config.fiducial is not None:
            parts.append(struct.pack("<q", snap.tick))
        return b"".join(parts)

    def _cull_for(self, soup: TriangleSoup, shade: ShadeGrid, cam: np.ndarray) -> np.ndarray:
        """Back-face flags for one camera; a canopy enclosing the camera is drawn from inside."""
        if len(shade.radii) == 0:
            return soup.cull
        inside = np.flatnonzero(np.sum((shade.centers - cam) ** 2, axis=1) < shade.radii**2)
        if len(inside) == 0:
            return soup.cull
        cull = soup.cull.copy()
        for k in inside:
            a, b = self._canopy_tris[k]
            cull[a:b] = 0
        return cull

    def render(self, snap: WorldSnapshot, camera: CameraSpec) -> Frame:
        """Deterministic RGB + planar depth for ``camera`` against ``snap``."""
        pose = self.camera_pose(snap, camera)
        cache_key = None
        if self.config.render_cache:
            cache_key = (pose.as_tuple(), camera, self._geometry_key(snap))
            hit = self._render_cache.get(camera.camera_id)
            if hit is not None and hit[0] == cache_key:
                return Frame(camera.camera_id, snap.tick, snap.sim_time, hit[1], hit[2])
        soup, shade = self.soup(snap)
        skip = soup.ranges.get(camera.owner_body, (0, 0))
        rgb, depth = render_soup(
            soup, pose.position, pose.rotation(), camera.intrinsics, shade, self.config.shade_factor, skip,
            cull=self._cull_for(soup, shade, pose.position),
        )
        frame = Frame(camera.camera_id, snap.tick, snap.sim_time, rgb, depth)
        if cache_key is not None:
            self._render_cache[camera.camera_id] = (cache_key, frame.rgb, frame.depth)
        return frame

    def render_all(self, snap: WorldSnapshot) -> list[Frame]:
        cams = list(self._cameras.values())
        if self._pool is None or len(cams) < 2:
            return [self.render(snap, c) for c in cams]
        self.soup(snap)  # build once before fan-out
        return list(self._pool.map(lambda c: self.render(snap, c), cams))

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()


# ---------------------------------------------------------------------------
# dumps and logs

POSE_LOG_HEADER = ["tick", "sim_time", "body_id", "x", "y", "z", "qw", "qx", "qy", "qz"]


def pose_log_rows(snap: WorldSnapshot) -> Iterator[list]:
    for body_id in sorted(snap.poses):
        p = snap.poses[body_id]
        yield [snap.tick, repr(snap.sim_time), body_id, *(repr(float(v)) for v in p.as_tuple())]


class PoseLog:
    """Ground-truth pose CSV, one row per body per tick."""

    def __init__(self, path: str | Path | None = None, stream: io.TextIOBase | None = None):
        self._fh = open(path, "w", newline="") if path is not None else stream
        self._owned = path is not None
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(POSE_LOG_HEADER)

    def write_row(self, tick: int, sim_time: float, body_id: int, pose: Pose6DOF) -> None:
        self._writer.writerow([tick, repr(sim_time), body_id, *(repr(float(v)) for v in pose.as_tuple())])

    def write_snapshot(self, snap: WorldSnapshot) -> None:
        self._writer.writerows(pose_log_rows(snap))

    def close(self) -> None:
        if self._owned:
            self._fh.close()


def write_ppm(stream: BinaryIO, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    stream.write(b"P6\n%d %d\n255\n" % (w, h))
    stream.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm_stream(data: bytes) -> list[np.ndarray]:
    """All P6 images concatenated in ``data``."""
    images, pos = [], 0
    while pos < len(data):
        fields = []
        while len(fields) < 4:
            while pos < len(data) and data[pos : pos + 1].isspace():
                pos += 1
            if data[pos : pos + 1] == b"#":
                pos = data.index(b"\n", pos) + 1
                continue
            end = pos
            while end < len(data) and not data[end : end + 1].isspace():
                end += 1
            fields.append(data[pos:end])
            pos = end
        if fields[0] != b"P6" or fields[3] != b"255":
            raise ValueError("only 8-bit P6 images are supported")
        w, h = int(fields[1]), int(fields[2])
        pos += 1  # single whitespace before raster
        n = w * h * 3
        if pos + n > len(data):
            raise ValueError("truncated PPM raster")
        images.append(np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).reshape(h, w, 3))
        pos += n
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
    return images


DEPTH_MAGIC = b"DPT1"


def write_depth(stream: BinaryIO, depth: np.ndarray) -> None:
    h, w = depth.shape
    stream.write(DEPTH_MAGIC + struct.pack("<II", w, h))
    stream.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_depth(data: bytes) -> np.ndarray:
    if data[:4] != DEPTH_MAGIC:
        raise ValueError("not a DPT1 depth file")
    w, h = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * w * h:
        raise ValueError("DPT1 size mismatch")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w).astype(np.float32)


class FrameLog:
    """Concatenated P6 stream plus an index CSV of (index, tick, sim_time)."""

    def __init__(self, directory: str | Path, camera_id: int, with_depth: bool = False):
        d = Path(directory)
        self.ppm_path = d / f"frames_cam{camera_id}.ppm"
        self.index_path = d / f"frames_cam{camera_id}.csv"
        self._ppm = open(self.ppm_path, "wb")
        self._idx = open(self.index_path, "w", newline="")
        self._idx.write("index,tick,sim_time\n")
        self._depth = open(d / f"frames_cam{camera_id}.dpt", "wb") if with_depth else None
        self.count = 0

    def append(self, frame: Frame) -> None:
        write_ppm(self._ppm, frame.rgb)
        if self._depth is not None:
            write_depth(self._depth, frame.depth)
        self._idx.write(f"{self.count},{frame.tick},{frame.sim_time!r}\n")
        self.count += 1

    def close(self) -> None:
        self._ppm.close()
        self._idx.close()
        if self._depth is not None:
            self._depth.close()


def load_frame_log(directory: str | Path, camera_id: int) -> list[Frame]:
    d = Path(directory)
    images = read_ppm_stream((d / f"frames_cam{camera_id}.ppm").read_bytes())
    rows = list(csv.DictReader(open(d / f"frames_cam{camera_id}.csv", newline="")))
    if len(rows) != len(images):
        raise ValueError(f"frame log index has {len(rows)} rows but {len(images)} images")
    empty = np.zeros((0, 0), np.float32)
    return [Frame(camera_id, int(r["tick"]), float(r["sim_time"]), img, empty) for r, img in zip(rows, images)]


__all__ = [
    "BACKGROUND",
    "FAR_SENTINEL",
    "CameraSpec",
    "Frame",
    "FrameLog",
    "PoseLog",
    "WorldConfig",
    "WorldError",
    "WorldServer",
    "WorldSnapshot",
]
