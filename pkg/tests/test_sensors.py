import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from forestsim.geometry import Pose6DOF
from forestsim.render import FAR_SENTINEL
from forestsim.scene import SceneConfig, Terrain, build_scene, terrain_height
from forestsim.sensors import (
    HitKind,
    NoiseModel,
    RangeSensor,
    RayCaster,
    RayScene,
    SensorLog,
    SourceMask,
    apply_noise,
    cast_ray,
    center_region,
    dem_range,
    fuse,
    planar_to_range,
    quantize,
    sample_depth_source,
)
from forestsim.world import WorldServer

DOWN = (0.0, 0.0, -1.0)


def flat(h=0.0, n=11, cell=1.0, origin=(-5.0, -5.0)):
    return Terrain(n, n, cell, np.full((n, n), h), origin)


def test_ray_down_onto_flat_terrain():
    hit = cast_ray(RayScene(flat(1.5)), (0.3, 0.7, 4.0), DOWN)
    assert hit.kind == HitKind.TERRAIN
    assert hit.distance == pytest.approx(2.5, abs=1e-12)


def test_ray_onto_plane_matches_analytic():
    # a planar heightfield is reproduced exactly by bilinear interpolation
    n = 21
    xs = -10.0 + np.arange(n)
    heights = np.tile(0.2 * xs + 1.0, (n, 1))
    t = Terrain(n, n, 1.0, heights, (-10.0, -10.0))
    o = np.array([-8.0, 0.4, 9.0])
    d = np.array([1.0, 0.1, -0.6])
    d /= np.linalg.norm(d)
    # o + s d hits z = 0.2 x + 1
    s = (0.2 * o[0] + 1.0 - o[2]) / (d[2] - 0.2 * d[0])
    hit = cast_ray(RayScene(t), o, d)
    assert hit.distance == pytest.approx(s, abs=1e-9)


def test_parallel_and_outside_rays_miss():
    t = flat(0.0)
    assert cast_ray(RayScene(t), (0.0, 0.0, 2.0), (1.0, 0.0, 0.0)) is None
    assert cast_ray(RayScene(t), (0.0, 0.0, 2.0), (0.0, 0.0, 1.0)) is None
    assert cast_ray(RayScene(t), (50.0, 0.0, 2.0), DOWN) is None
    assert cast_ray(RayScene(t), (0.0, 0.0, 2.0), DOWN, max_range=1.0) is None


def test_ray_sphere_analytic():
    s = RayScene(None, [[0.0, 0.0, 0.0]], [1.0])
    hit = cast_ray(s, (0.0, 0.0, 6.0), DOWN)
    assert hit.kind == HitKind.CANOPY and abs(hit.distance - 5.0) <= 1e-9
    # grazing offset ray: distance from the chord geometry
    off = 0.6
    hit = cast_ray(s, (off, 0.0, 6.0), DOWN)
    assert abs(hit.distance - (6.0 - math.sqrt(1 - off * off))) <= 1e-9
    # from inside, the exit point is the hit
    hit = cast_ray(s, (0.0, 0.0, 0.0), DOWN)
    assert abs(hit.distance - 1.0) <= 1e-12


def test_ray_triangle_and_nearest_wins():
    tri = [[[-1.0, -1.0, 2.0], [1.0, -1.0, 2.0], [0.0, 1.0, 2.0]]]
    s = RayScene(flat(0.0), [[0.0, 0.0, 4.0]], [0.5], triangles=tri)
    hit = cast_ray(s, (0.0, 0.0, 10.0), DOWN)
    assert hit.kind == HitKind.CANOPY and hit.distance == pytest.approx(5.5)
    hit = cast_ray(s, (0.0, 0.0, 3.0), DOWN)
    assert hit.kind == HitKind.FLORA and hit.distance == pytest.approx(1.0)
    hit = cast_ray(s, (3.0, 3.0, 3.0), DOWN)
    assert hit.kind == HitKind.TERRAIN and hit.distance == pytest.approx(3.0)


def test_ray_argument_checks():
    s = RayScene(flat())
    with pytest.raises(ValueError):
        cast_ray(s, (0.0, 0.0, 1.0), (0.0, 0.0, -2.0))
    with pytest.raises(ValueError):
        cast_ray(s, (0.0, math.nan, 1.0), DOWN)


@settings(max_examples=150, deadline=None)
@given(
    st.integers(0, 2**31 - 1),
    st.floats(-4.0, 4.0), st.floats(-4.0, 4.0),
    st.floats(-1.0, 1.0), st.floats(-1.0, 1.0),
)
def test_terrain_hit_lies_on_surface(seed, x, y, dx, dy):
    # components too small to move the ray by one ulp over its length are not meaningful
    assume(all(v == 0.0 or abs(v) > 1e-9 for v in (dx, dy)))
    rng = np.random.default_rng(seed)
    t = Terrain(9, 9, 1.0, rng.uniform(0.0, 2.0, (9, 9)), (-4.0, -4.0))
    d = np.array([dx, dy, -1.0])
    d /= np.linalg.norm(d)
    o = np.array([x, y, 5.0])
    hit = cast_ray(RayScene(t), o, d)
    if hit is None:
        # the ray must leave the footprint before reaching the surface
        s = np.linspace(0.0, 30.0, 3001)
        pts = o + s[:, None] * d
        inside = (np.abs(pts[:, 0]) <= 4.0) & (np.abs(pts[:, 1]) <= 4.0)
        for p in pts[inside]:
            assert p[2] >= terrain_height(t, p[0], p[1]) - 1e-9
        return
    p = o + hit.distance * d
    assert abs(p[2] - terrain_height(t, p[0], p[1])) < 1e-7
    # no earlier sample along the ray is already below ground
    for s in np.linspace(0.0, hit.distance, 200)[:-1]:
        q = o + s * d
        assume(abs(q[0]) <= 4.0 and abs(q[1]) <= 4.0)
        assert q[2] >= terrain_height(t, q[0], q[1]) - 1e-7


def test_sample_depth_source():
    d = np.full((10, 10), 3.0, dtype=np.float32)
    d[4, 4] = 100.0
    d[5, 5] = FAR_SENTINEL
    assert sample_depth_source(d, (3, 3, 4, 4)) == 3.0
    assert sample_depth_source(np.full((10, 10), FAR_SENTINEL, np.float32), (0, 0, 5, 5)) is None
    with pytest.raises(ValueError):
        sample_depth_source(d, (8, 8, 4, 4))
    assert center_region(320, 240) == (157, 117, 5, 5)
    assert planar_to_range(2.0, 0.75, 0.0) == pytest.approx(2.5)


def test_dem_range():
    t = flat(1.0)
    assert dem_range(t, (0.0, 0.0, 4.0)) == 3.0
    assert dem_range(t, (0.0, 0.0, 0.5)) is None
    assert dem_range(t, (40.0, 0.0, 4.0)) is None


def test_fuse():
    assert fuse(None, None, None) == (None, SourceMask.NONE)
    gt, mask = fuse(5.0, 5.02, 7.0)
    assert gt == 5.0 and mask == SourceMask.DEPTH | SourceMask.RAY
    assert mask.label() == "depth|ray"
    gt, mask = fuse(None, 3.0, 5.0)
    assert gt == 3.0 and mask.label() == "ray"


@given(st.lists(st.one_of(st.none(), st.floats(0.0, 1e3)), min_size=3, max_size=3))
def test_fuse_is_lower_bound(vals):
    gt, mask = fuse(*vals)
    present = [v for v in vals if v is not None]
    if not present:
        assert gt is None
        return
    assert all(gt <= v for v in present)
    assert gt in present
    assert mask != SourceMask.NONE


def test_quantize():
    assert quantize(3.26, 0.5) == 3.5
    assert quantize(3.24, 0.5) == 3.0
    assert quantize(0.25, 0.5) == 0.5
    assert quantize(-0.25, 0.5) == -0.5
    assert quantize(1.234, 0.0) == 1.234


def test_identity_noise_and_dropout():
    rng = np.random.default_rng(0)
    assert all(apply_noise(g, NoiseModel(), rng) == g for g in (0.0, 1.5, 42.0))
    drops = NoiseModel(dropout_prob=0.3, seed=4)
    rng = drops.rng()
    n = 20000
    missing = sum(apply_noise(1.0, drops, rng) is None for _ in range(n))
    p = 0.3
    assert abs(missing / n - p) < 4 * math.sqrt(p * (1 - p) / n)
    with pytest.raises(ValueError):
        NoiseModel(dropout_prob=1.0)
    with pytest.raises(ValueError):
        apply_noise(-1.0, NoiseModel(), rng)


def test_noise_is_clamped_at_zero():
    m = NoiseModel(bias=-5.0)
    assert apply_noise(1.0, m, m.rng()) == 0.0


def test_noise_deterministic_per_seed():
    m = NoiseModel(sigma=0.2, quantum=0.01, seed=77)
    a, b = m.rng(), m.rng()
    assert [apply_noise(2.0, m, a) for _ in range(50)] == [apply_noise(2.0, m, b) for _ in range(50)]


def test_range_sensor_over_flat_ground(tmp_path):
    scene = build_scene(2, SceneConfig(roughness=0.0, tree_count=0, bush_count=0, rock_count=0, grass_count=0))
    w = WorldServer(scene)
    ground = terrain_height(scene.terrain, 1.0, 2.0)
    w.register_body(1, Pose6DOF(1.0, 2.0, ground + 4.0))
    w.register_body(2, Pose6DOF(30.0, 30.0, ground + 4.0))
    sensor = RangeSensor(RayCaster(scene), 1)
    log = SensorLog(tmp_path / "s.csv")
    r = sensor.measure(w.advance_tick())
    log.write(r)
    log.close()
    assert r.valid and r.ground_truth == pytest.approx(4.0, abs=1e-9) and r.noisy == r.ground_truth
    assert r.source_mask == SourceMask.RAY | SourceMask.DEM
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "tick,gt,noisy,valid,mask"
    assert lines[1].endswith(",1,ray|dem")


def test_range_sensor_sees_drone_below():
    scene = build_scene(2, SceneConfig(roughness=0.0, tree_count=0, bush_count=0, rock_count=0, grass_count=0))
    w = WorldServer(scene)
    g = terrain_height(scene.terrain, 0.0, 0.0)
    w.register_body(1, Pose6DOF(0.0, 0.0, g + 6.0))
    w.register_body(2, Pose6DOF(0.0, 0.0, g + 3.0))
    r = RangeSensor(RayCaster(scene), 1).measure(w.advance_tick())
    assert r.valid and r.ground_truth < 3.0
    assert r.source_mask == SourceMask.RAY
