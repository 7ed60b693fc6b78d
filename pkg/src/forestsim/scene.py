"""Procedural forest world: terrain heightfield, flora instances and wind parameters.

A scene is a pure function of ``(seed, SceneConfig)``. Every archetype owns a
single mesh, so there is exactly one level of detail by construction.
"""
from __future__ import annotations

import enum
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import build_dataclass, read_config

SCALE_MIN = 0.8
SCALE_MAX = 1.25
DEM_MAGIC = b"DEM1"


class OutOfBoundsError(ValueError):
    """Query outside the terrain footprint."""


class Archetype(enum.IntEnum):
    TRUNK = 0
    CANOPY = 1
    BUSH = 2
    ROCK = 3
    GRASS = 4


SWAYING = frozenset({Archetype.CANOPY, Archetype.BUSH, Archetype.GRASS})


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (n, 3) float64, model space, z up, base at origin
    faces: np.ndarray  # (m, 3) int32

    def __post_init__(self):
        self.vertices.setflags(write=False)
        self.faces.setflags(write=False)


@dataclass(frozen=True, eq=False)
class Terrain:
    rows: int
    cols: int
    cell_size: float
    heights: np.ndarray  # (rows, cols), row index along y
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError("terrain needs at least 2x2 nodes")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be > 0")
        h = np.ascontiguousarray(self.heights, dtype=np.float64)
        if h.shape != (self.rows, self.cols):
            raise ValueError(f"heights shape {h.shape} != ({self.rows}, {self.cols})")
        if not np.all(np.isfinite(h)):
            raise ValueError("terrain heights must be finite")
        h.setflags(write=False)
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def extent(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return (x0, y0, x0 + (self.cols - 1) * self.cell_size, y0 + (self.rows - 1) * self.cell_size)

    def contains(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.extent
        return x0 <= x <= x1 and y0 <= y <= y1

    def to_bytes(self) -> bytes:
        head = struct.pack("<IId2d", self.rows, self.cols, self.cell_size, *self.origin)
        return head + self.heights.astype("<f8").tobytes()

    def __eq__(self, other):
        return isinstance(other, Terrain) and self.to_bytes() == other.to_bytes()

    __hash__ = None


def terrain_height(terrain: Terrain, x: float, y: float) -> float:
    """Bilinear height at world (x, y); raises OutOfBoundsError off the grid."""
    if not terrain.contains(x, y):
        raise OutOfBoundsError(f"({x}, {y}) outside terrain footprint {terrain.extent}")
    gx = (x - terrain.origin[0]) / terrain.cell_size
    gy = (y - terrain.origin[1]) / terrain.cell_size
    c = min(int(math.floor(gx)), terrain.cols - 2)
    r = min(int(math.floor(gy)), terrain.rows - 2)
    fx = gx - c
    fy = gy - r
    h = terrain.heights
    return float(
        (1 - fx) * (1 - fy) * h[r, c]
        + fx * (1 - fy) * h[r, c + 1]
        + (1 - fx) * fy * h[r + 1, c]
        + fx * fy * h[r + 1, c + 1]
    )


def write_dem(terrain: Terrain, path: str | Path) -> None:
    head = DEM_MAGIC + struct.pack("<IIfdd", terrain.rows, terrain.cols, terrain.cell_size, *terrain.origin)
    Path(path).write_bytes(head + terrain.heights.astype("<f4").tobytes())


def read_dem(path: str | Path) -> Terrain:
    data = Path(path).read_bytes()
    if data[:4] != DEM_MAGIC:
        raise ValueError("not a DEM1 file")
    rows, cols, cell, ox, oy = struct.unpack_from("<IIfdd", data, 4)
    offset = 4 + struct.calcsize("<IIfdd")
    expected = offset + 4 * rows * cols
    if len(data) != expected:
        raise ValueError(f"DEM1 size mismatch: {len(data)} bytes, expected {expected}")
    heights = np.frombuffer(data, dtype="<f4", offset=offset).reshape(rows, cols).astype(np.float64)
    return Terrain(rows, cols, float(cell), heights, (ox, oy))


@dataclass(frozen=True)
class WindParams:
    mean_velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    turbulence_intensity: float = 0.0  # per-axis gust stdev, m/s
    gust_seed: int = 0
    correlation_time: float = 1.0

    def __post_init__(self):
        if self.turbulence_intensity < 0:
            raise ValueError("turbulence_intensity must be >= 0")
        if not self.correlation_time > 0:
            raise ValueError("correlation_time must be > 0")


@dataclass(frozen=True)
class SwayParams:
    k: float = 0.02  # meters of sway per m/s of wind
    omega: float = 1.5  # rad/s
    cap: float = 0.5  # meters

    def __post_init__(self):
        if self.k < 0 or self.cap < 0:
            raise ValueError("sway k and cap must be >= 0")


@dataclass(frozen=True)
class SceneConfig:
    area: tuple[float, float, float, float] = (-40.0, -40.0, 40.0, 40.0)  # x0, y0, x1, y1
    cell_size: float = 1.0
    roughness: float = 0.4  # meters of relief
    feature_size: float = 10.0  # meters between noise lattice points
    tree_count: int = 40
    bush_count: int = 60
    rock_count: int = 40
    grass_count: int = 120
    tree_height: float = 15.0
    tree_region: tuple[float, float, float, float] | None = None
    clutter_region: tuple[float, float, float, float] | None = None
    clearings: tuple[tuple[float, float, float, float], ...] = ()
    fixed_trees: tuple[tuple[float, float], ...] = ()
    wind_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    turbulence_intensity: float = 0.0
    gust_seed: int = 0
    correlation_time: float = 1.0
    sway_k: float = 0.02
    sway_omega: float = 1.5
    sway_cap: float = 0.5

    def __post_init__(self):
        x0, y0, x1, y1 = self.area
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"area must have positive extent, got {self.area}")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be > 0")
        if self.roughness < 0:
            raise ValueError("roughness must be >= 0")
        if min(self.tree_count, self.bush_count, self.rock_count, self.grass_count) < 0:
            raise ValueError("flora counts must be >= 0")
        if not self.tree_height > 0 or not self.feature_size > 0:
            raise ValueError("tree_height and feature_size must be > 0")

    @property
    def wind(self) -> WindParams:
        return WindParams(self.wind_mean, self.turbulence_intensity, self.gust_seed, self.correlation_time)

    @property
    def sway(self) -> SwayParams:
        return SwayParams(self.sway_k, self.sway_omega, self.sway_cap)


def load_scene_config(path: str | Path) -> SceneConfig:
    sections = read_config(path, default_section="scene")
    if set(sections) - {"scene"}:
        raise ValueError(f"unexpected sections {sorted(set(sections) - {'scene'})}")
    return build_dataclass(SceneConfig, sections.get("scene", {}), "scene")


@dataclass(frozen=True)
class FloraInstance:
    archetype: Archetype
    position: tuple[float, float, float]
    yaw: float
    scale: float
    sway_phase: float
    sway_gain: float

    def pack(self) -> bytes:
        return struct.pack("<B3d4d", int(self.archetype), *self.position, self.yaw, self.scale, self.sway_phase, self.sway_gain)


@dataclass(frozen=True, eq=False)
class Scene:
    seed: int
    config: SceneConfig
    terrain: Terrain
    flora: tuple[FloraInstance, ...]
    wind: WindParams
    sway: SwayParams
    bounds: tuple[float, float, float, float, float, float]
    meshes: dict = field(repr=False)

    def to_bytes(self) -> bytes:
        parts = [struct.pack("<Q", self.seed & 0xFFFFFFFFFFFFFFFF), self.terrain.to_bytes()]
        parts.append(struct.pack("<I", len(self.flora)))
        parts.extend(f.pack() for f in self.flora)
        w = self.wind
        parts.append(struct.pack("<4dQd", *w.mean_velocity, w.turbulence_intensity, w.gust_seed & (2**64 - 1), w.correlation_time))
        parts.append(struct.pack("<3d6d", self.sway.k, self.sway.omega, self.sway.cap, *self.bounds))
        for kind in Archetype:
            m = self.meshes[kind]
            parts.append(m.vertices.astype("<f8").tobytes() + m.faces.astype("<i4").tobytes())
        return b"".join(parts)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def __eq__(self, other):
        return isinstance(other, Scene) and self.to_bytes() == other.to_bytes()

    __hash__ = None

    def count(self, archetype: Archetype) -> int:
        return sum(1 for f in self.flora if f.archetype == archetype)

    def canopy_spheres(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space (centers, radii) of every canopy's bounding sphere at rest."""
        center_z, radius = canopy_geometry(self.config.tree_height)
        idx = [i for i, f in enumerate(self.flora) if f.archetype == Archetype.CANOPY]
        centers = np.array([self.flora[i].position for i in idx], dtype=np.float64).reshape(-1, 3)
        scales = np.array([self.flora[i].scale for i in idx], dtype=np.float64)
        centers[:, 2] += center_z * scales
        return centers, radius * scales


# ---------------------------------------------------------------------------
# archetype meshes


def icosphere(level: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere with a vertex at each pole."""
    lat = math.atan(0.5)
    verts = [(0.0, 0.0, 1.0)]
    for i in range(5):
        a = 2 * math.pi * i / 5
        verts.append((math.cos(lat) * math.cos(a), math.cos(lat) * math.sin(a), math.sin(lat)))
    for i in range(5):
        a = 2 * math.pi * (i + 0.5) / 5
        verts.append((math.cos(lat) * math.cos(a), math.cos(lat) * math.sin(a), -math.sin(lat)))
    verts.append((0.0, 0.0, -1.0))
    faces = []
    for i in range(5):
        j = (i + 1) % 5
        faces.append((0, 1 + i, 1 + j))
        faces.append((1 + i, 6 + i, 1 + j))
        faces.append((1 + j, 6 + i, 6 + j))
        faces.append((11, 6 + j, 6 + i))
    v = [np.array(p) for p in verts]
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(v, dtype=np.float64), np.array(faces, dtype=np.int32)


def canopy_geometry(tree_height: float) -> tuple[float, float]:
    """(center height, radius) of an unscaled canopy sphere."""
    return 0.68 * tree_height, 0.3 * tree_height


def _trunk_mesh(h: float) -> Mesh:
    sides = 8
    height, r0, r1 = 0.62 * h, 0.035 * h, 0.02 * h
    verts, faces = [], []
    for i in range(sides):
        a = 2 * math.pi * i / sides
        verts.append((r0 * math.cos(a), r0 * math.sin(a), -0.2))
        verts.append((r1 * math.cos(a), r1 * math.sin(a), height))
    for i in range(sides):
        j = (i + 1) % sides
        faces.append((2 * i, 2 * j, 2 * j + 1))
        faces.append((2 * i, 2 * j + 1, 2 * i + 1))
    return Mesh(np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int32))


def _canopy_mesh(h: float) -> Mesh:
    v, f = icosphere(1)
    cz, r = canopy_geometry(h)
    return Mesh(v * r + np.array([0.0, 0.0, cz]), f)


def _bush_mesh() -> Mesh:
    v, f = icosphere(1)
    return Mesh(v * np.array([0.8, 0.8, 0.55]) + np.array([0.0, 0.0, 0.4]), f)


def _rock_mesh() -> Mesh:
    v, f = icosphere(1)
    # fixed deformation; per-instance variety comes from yaw and scale
    rng = np.random.Generator(np.random.PCG64(0x5EED))
    bump = 1.0 + 0.18 * rng.uniform(-1.0, 1.0, size=len(v))
    return Mesh(v * bump[:, None] * np.array([0.55, 0.45, 0.35]) + np.array([0.0, 0.0, 0.1]), f)


def _grass_mesh() -> Mesh:
    w, h = 0.35, 0.5
    verts = [(-w, 0, 0), (w, 0, 0), (w, 0, h), (-w, 0, h), (0, -w, 0), (0, w, 0), (0, w, h), (0, -w, h)]
    faces = [(0, 1, 2), (0, 2, 3), (4, 5, 6), (4, 6, 7)]
    return Mesh(np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int32))


def archetype_meshes(tree_height: float) -> dict[Archetype, Mesh]:
    return {
        Archetype.TRUNK: _trunk_mesh(tree_height),
        Archetype.CANOPY: _canopy_mesh(tree_height),
        Archetype.BUSH: _bush_mesh(),
        Archetype.ROCK: _rock_mesh(),
        Archetype.GRASS: _grass_mesh(),
    }


# ---------------------------------------------------------------------------
# generation


def _value_noise(rng: np.random.Generator, rows: int, cols: int, cell: float, feature: float) -> np.ndarray:
    step = feature / cell
    lr = int(math.ceil((rows - 1) / step)) + 2
    lc = int(math.ceil((cols - 1) / step)) + 2
    lattice = rng.uniform(-1.0, 1.0, size=(lr, lc))
    gy = np.arange(rows) / step
    gx = np.arange(cols) / step
    iy = np.floor(gy).astype(int)
    ix = np.floor(gx).astype(int)
    ty = gy - iy
    tx = gx - ix
    sy = (ty * ty * (3 - 2 * ty))[:, None]
    sx = (tx * tx * (3 - 2 * tx))[None, :]
    a = lattice[iy][:, ix]
    b = lattice[iy][:, ix + 1]
    c = lattice[iy + 1][:, ix]
    d = lattice[iy + 1][:, ix + 1]
    return (a * (1 - sx) + b * sx) * (1 - sy) + (c * (1 - sx) + d * sx) * sy


def _in_box(x: float, y: float, box) -> bool:
    return box[0] <= x <= box[2] and box[1] <= y <= box[3]


def build_scene(seed: int, config: SceneConfig) -> Scene:
    """Generate the forest for ``(seed, config)``; identical inputs give identical scenes."""
    rng = np.random.Generator(np.random.PCG64(seed & 0xFFFFFFFFFFFFFFFF))
    x0, y0, x1, y1 = config.area
    cols = int(round((x1 - x0) / config.cell_size)) + 1
    rows = int(round((y1 - y0) / config.cell_size)) + 1
    noise = _value_noise(rng, rows, cols, config.cell_size, config.feature_size)
    # f32-representable heights keep DEM export lossless
    heights = (config.roughness * noise).astype(np.float32).astype(np.float64)
    terrain = Terrain(rows, cols, config.cell_size, heights, (x0, y0))
    tx0, ty0, tx1, ty1 = terrain.extent

    def place(region) -> tuple[float, float]:
        rx0, ry0, rx1, ry1 = region if region is not None else (tx0 + 0.5, ty0 + 0.5, tx1 - 0.5, ty1 - 0.5)
        rx0, ry0 = max(rx0, tx0), max(ry0, ty0)
        rx1, ry1 = min(rx1, tx1), min(ry1, ty1)
        for _ in range(1000):
            x = float(rng.uniform(rx0, rx1))
            y = float(rng.uniform(ry0, ry1))
            if not any(_in_box(x, y, b) for b in config.clearings):
                return x, y
        raise ValueError("could not place flora outside the configured clearings")

    def jitter() -> tuple[float, float]:
        yaw = float(rng.uniform(0.0, 2 * math.pi)) % (2 * math.pi)
        scale = float(np.exp(rng.uniform(math.log(SCALE_MIN), math.log(SCALE_MAX))))
        return yaw, min(max(scale, SCALE_MIN), SCALE_MAX)

    def on_ground(x: float, y: float) -> tuple[float, float, float]:
        return (x, y, terrain_height(terrain, x, y))

    flora: list[FloraInstance] = []

    def add_tree(x: float, y: float) -> None:
        yaw, scale = jitter()
        phase = float(rng.uniform(0.0, 2 * math.pi))
        gain = float(rng.uniform(0.8, 1.2))
        pos = on_ground(x, y)
        flora.append(FloraInstance(Archetype.TRUNK, pos, yaw, scale, 0.0, 0.0))
        flora.append(FloraInstance(Archetype.CANOPY, pos, yaw, scale, phase, gain))

    for fx, fy in config.fixed_trees:
        if not terrain.contains(fx, fy):
            raise ValueError(f"fixed tree ({fx}, {fy}) outside terrain")
        add_tree(fx, fy)
    for _ in range(config.tree_count):
        add_tree(*place(config.tree_region))
    gains = {Archetype.BUSH: (0.4, 0.8), Archetype.ROCK: None, Archetype.GRASS: (1.0, 1.5)}
    counts = {Archetype.BUSH: config.bush_count, Archetype.ROCK: config.rock_count, Archetype.GRASS: config.grass_count}
    for kind, n in counts.items():
        for _ in range(n):
            x, y = place(config.clutter_region)
            yaw, scale = jitter()
            phase = float(rng.uniform(0.0, 2 * math.pi))
            g = gains[kind]
            gain = float(rng.uniform(*g)) if g else 0.0
            flora.append(FloraInstance(kind, on_ground(x, y), yaw, scale, phase if g else 0.0, gain))

    top = float(heights.max()) + config.tree_height * SCALE_MAX
    bounds = (tx0, ty0, float(heights.min()) - 1.0, tx1, ty1, top)
    return Scene(
        seed=seed,
        config=config,
        terrain=terrain,
        flora=tuple(flora),
        wind=config.wind,
        sway=config.sway,
        bounds=bounds,
        meshes=archetype_meshes(config.tree_height),
    )


# ---------------------------------------------------------------------------
# wind sway


@dataclass(frozen=True)
class WindState:
    """Instantaneous wind velocity (mean plus gust) at one sim time."""

    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)


def wind_displacement(instance: FloraInstance, wind: WindState, t: float, sway: SwayParams = SwayParams()) -> np.ndarray:
    """Horizontal sway offset of one instance: gain * k * |v| * sin(omega t + phase), capped."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return sway_offsets(
        np.array([instance.sway_gain]), np.array([instance.sway_phase]), wind.velocity, t, sway
    )[0]


def sway_offsets(gains: np.ndarray, phases: np.ndarray, velocity, t: float, sway: SwayParams) -> np.ndarray:
    """Vectorized sway law for many instances; returns (n, 3)."""
    vx, vy, vz = (float(c) for c in velocity)
    out = np.zeros((len(gains), 3))
    speed = math.sqrt(vx * vx + vy * vy + vz * vz)
    horiz = math.hypot(vx, vy)
    if speed == 0.0 or horiz == 0.0:
        return out
    mag = gains * sway.k * speed * np.sin(sway.omega * t + phases)
    mag = np.clip(mag, -sway.cap, sway.cap)
    out[:, 0] = mag * (vx / horiz)
    out[:, 1] = mag * (vy / horiz)
    return out
