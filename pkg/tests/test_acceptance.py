"""End-to-end acceptance checks, one test per numbered criterion.

The last lines of the pytest report list each criterion with PASS/FAIL and
the measured numbers.
"""
import math
import struct
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import cpu_count
from forestsim import protocol as P
from forestsim.experiments import Scenario, canopy_segment, run_follow, run_matrix, run_out_and_back
from forestsim.geometry import Pose6DOF, quat_from_euler
from forestsim.orchestrator import launch, replay
from forestsim.profiler import read_profile, window_rates
from forestsim.render import DEPTH_QUANTUM
from forestsim.scene import SceneConfig, build_scene
from forestsim.sensors import NoiseModel, RangeSensor, RayCaster, apply_noise, center_region, dem_range, fuse, sample_depth_source
from forestsim.tracking import GridTrack, LKParams, TrackStatus, mse_grade, track_grid
from forestsim.vehicle import GRAVITY, Command, VehicleParams, VehicleState, hover_command, make_gust, gust_sample, step_dynamics
from forestsim.world import CameraSpec, WorldConfig, WorldServer, decode_fiducial

pytestmark = pytest.mark.slow

DOWN = quat_from_euler(pitch=math.pi / 2)  # camera +x axis rotated onto -z


def _files(directory: Path, pattern: str) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(directory.glob(pattern))}


# ---------------------------------------------------------------------------


@pytest.mark.criterion(1, "MSE grade hand case")
def test_mse_grade_oracle(measured):
    t0 = time.perf_counter()
    tracks = [
        GridTrack(0, (10.0, 20.0), (13.0, 24.0), (13.0, 24.0)),
        GridTrack(1, (30.0, 40.0), (30.0, 40.0), (30.0, 40.0)),
    ]
    g, pct = mse_grade(tracks)
    still = [GridTrack(i, (float(i), 2.0 * i), (float(i), 2.0 * i), (float(i), 2.0 * i)) for i in range(50)]
    g0, pct0 = mse_grade(still)
    elapsed = time.perf_counter() - t0
    measured(f"G={g!r} zero={g0!r} {elapsed * 1e3:.2f} ms")
    assert g == 12.5
    assert pct == 100.0
    assert g0 == 0.0 and pct0 == 100.0
    assert elapsed < 1.0


@pytest.mark.criterion(2, "bit-identical reruns of a seeded out-and-back")
def test_determinism(tmp_path, measured):
    sc = Scenario.parse("[run]\nscenario = out_and_back\nwind = high\nticks = 600\nwidth = 320\nheight = 240\n")
    runs = []
    for name in ("a", "b"):
        t0 = time.perf_counter()
        res = run_out_and_back(sc, tmp_path / name, trial_seed=11)
        runs.append((res, time.perf_counter() - t0))
    (ra, ta), (rb, tb) = runs
    a, b = tmp_path / "a", tmp_path / "b"
    frames_a, frames_b = _files(a, "frames_cam*"), _files(b, "frames_cam*")
    depth_a, depth_b = _files(a, "depth_cam*"), _files(b, "depth_cam*")
    measured(f"G={ra.report.G:.6f} runs {ta:.1f}s/{tb:.1f}s, {len(frames_a['frames_cam1.ppm']) >> 20} MiB frames")
    assert frames_a and frames_a == frames_b
    assert depth_a == depth_b
    assert (a / "poses.csv").read_bytes() == (b / "poses.csv").read_bytes()
    assert struct.pack("<d", ra.report.G) == struct.pack("<d", rb.report.G)
    assert (a / "track_cam1.csv").read_bytes() == (b / "track_cam1.csv").read_bytes()
    assert max(ta, tb) <= 120.0


@pytest.mark.criterion(3, "median G(high wind) >= 1.5 x median G(low wind) at both altitudes")
def test_wind_trend(tmp_path, measured):
    sc = Scenario.parse("[run]\nscenario = out_and_back\ntrials = 3\nlog_frames = false\n")
    t0 = time.perf_counter()
    rep = run_matrix(sc, tmp_path / "matrix")
    elapsed = time.perf_counter() - t0
    med = rep.medians()
    ratios = {alt: med[("high", alt)] / med[("low", alt)] for alt in ("low", "high")}
    measured(
        "medians " + ", ".join(f"{w}-wind/{a}-alt={v:.1f}" for (w, a), v in sorted(med.items()))
        + f"; ratios low-alt {ratios['low']:.2f}, high-alt {ratios['high']:.2f}; {elapsed / 60:.1f} min"
    )
    assert not rep.incomplete
    assert all(len(v) == 3 for v in rep.cells.values())
    for alt in ("low", "high"):
        assert ratios[alt] >= 1.5
    assert elapsed <= 15 * 60
    assert (tmp_path / "matrix" / "matrix.csv").exists()


@pytest.mark.criterion(4, "static windless out-and-back returns to start")
def test_static_return_to_start(measured):
    sc = Scenario.parse("[run]\nscenario = out_and_back\nwind = none\nstatic_flora = true\nlog_frames = false\n")
    res = run_out_and_back(sc)
    measured(f"G={res.report.G:.3f} px^2, tracked {res.report.percent_correct:.1f}%, end error {res.final_error:.4f} m")
    assert res.report.G < 2.0
    assert res.report.percent_correct >= 95.0
    assert res.final_error <= 0.25


def _forest_frame() -> np.ndarray:
    scene = build_scene(42, SceneConfig())
    world = WorldServer(scene)
    world.register_body(1, Pose6DOF.from_arrays((0.0, 0.0, 2.5), quat_from_euler(yaw=0.3)))
    cam = CameraSpec(1, 1, width=360, height=260, mount_offset=Pose6DOF.from_arrays((0, 0, 0), quat_from_euler(pitch=math.radians(40))))
    world.register_camera(cam)
    snap = world.advance_tick()
    return world.render(snap, cam).rgb


@pytest.mark.criterion(5, "optical flow recovers integer translations")
@pytest.mark.parametrize("dx,dy", [(3, 2), (-5, 1)])
def test_flow_translation(dx, dy, measured):
    big = _forest_frame()
    b = 20
    first = big[b : big.shape[0] - b, b : big.shape[1] - b]
    # content at (x, y) in ``first`` sits at (x + dx, y + dy) in ``second``
    second = big[b - dy : big.shape[0] - b - dy, b - dx : big.shape[1] - b - dx]
    rep = track_grid([first, second], 16, 24, LKParams())
    ok = 0
    for t in rep.tracks:
        if t.status is TrackStatus.TRACKED and abs(t.end[0] - t.start[0] - dx) <= 0.5 and abs(t.end[1] - t.start[1] - dy) <= 0.5:
            ok += 1
    frac = ok / len(rep.tracks)
    measured(f"({dx},{dy}): {100 * frac:.1f}% of {len(rep.tracks)} within 0.5 px")
    assert frac >= 0.95


@pytest.mark.criterion(6, "stereo-identical frames and snapshot isolation")
def test_synchronization(measured):
    cfg = SceneConfig(tree_count=12, bush_count=10, rock_count=5, grass_count=20, wind_mean=(6.0, 2.0, 0.0), turbulence_intensity=1.0, gust_seed=3)
    scene = build_scene(5, cfg)
    world = WorldServer(scene, WorldConfig(fiducial=(6.0, 0.0, 2.5, 1.0), render_cache=False))
    pose = Pose6DOF.from_arrays((0.0, 0.0, 2.5), [1.0, 0.0, 0.0, 0.0])
    world.register_body(1, pose)
    world.register_body(2, Pose6DOF.from_arrays((3.0, -1.5, 2.6), quat_from_euler(yaw=1.0)))
    left = CameraSpec(1, 1)
    right = CameraSpec(2, 1)  # same owner, same mount: a degenerate stereo pair
    world.register_camera(left)
    world.register_camera(right)
    checked = 0
    for tick in range(5):
        world.submit_pose(2, tick, Pose6DOF.from_arrays((3.0, -1.5 - 0.2 * tick, 2.6), quat_from_euler(yaw=1.0)))
        snap = world.advance_tick()
        fa = world.render(snap, left)
        # adversarial submissions between the two renders of this tick
        world.submit_pose(1, tick, Pose6DOF.from_arrays((5.0, 5.0, 9.0), quat_from_euler(yaw=2.0)))
        world.submit_pose(2, tick, Pose6DOF.from_arrays((0.5, 0.0, 2.5), quat_from_euler(yaw=0.0)))
        fb = world.render(snap, right)
        assert fa.tick == fb.tick == snap.tick == tick
        assert fa.rgb.tobytes() == fb.rgb.tobytes()
        assert fa.depth.tobytes() == fb.depth.tobytes()
        again = world.render_all(snap)
        assert again[0].rgb.tobytes() == fa.rgb.tobytes() and again[1].depth.tobytes() == fb.depth.tobytes()
        # the tick-encoded fiducial in both frames names the snapshot tick
        H, W = fa.height, fa.width
        assert decode_fiducial(fa.rgb[H // 2, W // 2]) == tick
        assert decode_fiducial(fb.rgb[H // 2, W // 2]) == tick
        world.submit_pose(1, tick, pose)
        checked += 1
    measured(f"{checked} ticks, frames byte-identical")


# long enough that a host well above the target rate still runs for 30 s
THROUGHPUT_TICKS = 2700


@pytest.mark.criterion(7, "throughput >= 30 ticks/s, 2 vehicles, 320x240 RGB+depth, 30 s")
@pytest.mark.xfail(cpu_count() < 4, reason="rate is specified for a 4-core desktop CPU; this host has fewer cores", strict=False)
def test_throughput(tmp_path, measured):
    cfg = tmp_path / "throughput.cfg"
    cfg.write_text(
        "[run]\nscenario = follow\nticks = %d\nwidth = 320\nheight = 240\n"
        "encoding = 1\nleader_camera = true\nlog_frames = false\n"
        # hovering drones in still air would otherwise be served from the frame cache
        "[world]\nrender_cache = false\n" % THROUGHPUT_TICKS
    )
    prof = tmp_path / "profile.csv"
    m = launch(cfg, tmp_path / "run", profile=prof, port=0, timeout=600)
    rows = read_profile(prof)
    walls = [r["wall"] for r in rows]
    # first row closes tick 0, which includes connection setup
    duration = walls[-1] - walls[0]
    rate = (len(walls) - 1) / duration
    windows = window_rates(walls)
    measured(
        f"{rate:.1f} ticks/s over {duration:.1f} s (slowest 1 s window {min(windows):.0f}) on {cpu_count()} CPU(s); "
        f"{len(m.processes)} processes"
    )
    assert [int(r["tick"]) for r in rows] == list(range(THROUGHPUT_TICKS))
    assert len([p for p in m.processes if p.role == "vehicle"]) == 2
    assert duration >= 29.0
    assert rate >= 30.0


@pytest.mark.criterion(8, "protocol round-trip, fuzz, split-stream")
def test_protocol_properties(measured):
    from test_protocol import random_message

    rng = np.random.default_rng(2024)
    n = 100_000
    failures = 0
    stream = bytearray()
    sample = []
    for i in range(n):
        msg = random_message(rng)
        data = P.encode(msg)
        if P.decode(data) != msg or P.encode(P.decode(data)) != data:
            failures += 1
        if i < 2000:
            stream += data
            sample.append(msg)
    assert failures == 0

    fuzz_rng = np.random.default_rng(99)
    crashes = 0
    decoded = 0
    seeds = [P.encode(m) for m in sample[:200]]
    for i in range(n):
        if i % 2:
            buf = bytes(fuzz_rng.integers(0, 256, int(fuzz_rng.integers(0, 120)), dtype=np.uint8))
        else:
            buf = bytearray(seeds[i % len(seeds)])
            for _ in range(int(fuzz_rng.integers(1, 4))):
                buf[int(fuzz_rng.integers(0, len(buf)))] = int(fuzz_rng.integers(0, 256))
            buf = bytes(buf[: int(fuzz_rng.integers(0, len(buf) + 1))])
        try:
            P.decode(buf)
            decoded += 1
        except P.DecodeError:
            pass
        except Exception:  # noqa: BLE001
            crashes += 1
    assert crashes == 0

    stream = bytes(stream)
    for trial in range(50):
        cuts = np.sort(rng.choice(np.arange(1, len(stream)), size=int(rng.integers(1, 400)), replace=False))
        dec = P.StreamDecoder()
        got = []
        prev = 0
        for c in list(cuts) + [len(stream)]:
            got.extend(dec.feed(stream[prev:c]))
            prev = c
        assert got == sample and dec.pending == 0
    measured(f"{n} round-trips, {n} fuzz inputs ({decoded} decoded), 50 random splits of {len(stream)} bytes")


@pytest.mark.criterion(9, "sensor fusion: flat ground, canopy, noise statistics")
def test_sensor_fusion(measured):
    h = 6.0
    flat = build_scene(1, SceneConfig(roughness=0.0, tree_count=0, bush_count=0, rock_count=0, grass_count=0))
    world = WorldServer(flat)
    world.register_body(1, Pose6DOF.from_arrays((1.3, -2.2, h), [1.0, 0.0, 0.0, 0.0]))
    cam = CameraSpec(1, 1, mount_offset=Pose6DOF.from_arrays((0, 0, 0), DOWN))
    world.register_camera(cam)
    snap = world.advance_tick()
    frame = world.render(snap, cam)
    sensor = RangeSensor(RayCaster(flat), 1, NoiseModel())
    depth = sample_depth_source(frame, center_region(frame.width, frame.height))
    ray = sensor.caster.at().cast((1.3, -2.2, h), (0.0, 0.0, -1.0)).distance
    dem = dem_range(flat.terrain, (1.3, -2.2, h))
    reading = sensor.measure(snap, frame)
    spread = max(depth, ray, dem) - min(depth, ray, dem)
    assert spread <= 2 * DEPTH_QUANTUM
    assert reading.valid and reading.source_mask.label() == "depth|ray|dem"
    assert abs(reading.ground_truth - h) <= 2 * DEPTH_QUANTUM

    # one tree; the sensor sits above the canopy crown
    forest = build_scene(1, SceneConfig(roughness=0.0, tree_count=0, bush_count=0, rock_count=0, grass_count=0, fixed_trees=((0.0, 0.0),)))
    centers, radii = forest.canopy_spheres()
    top = centers[0, 2] + radii[0]
    z = top + 3.0
    world = WorldServer(forest)
    world.register_body(1, Pose6DOF.from_arrays((centers[0, 0], centers[0, 1], z), [1.0, 0.0, 0.0, 0.0]))
    world.register_camera(cam)
    snap = world.advance_tick()
    frame = world.render(snap, cam)
    sensor = RangeSensor(RayCaster(forest), 1, NoiseModel())
    reading = sensor.measure(snap, frame)
    ray = sensor.caster.at().cast((centers[0, 0], centers[0, 1], z), (0.0, 0.0, -1.0)).distance
    dem = dem_range(forest.terrain, (centers[0, 0], centers[0, 1], z))
    assert ray == pytest.approx(3.0, abs=1e-9)
    assert reading.ground_truth == ray < dem
    gt, mask = fuse(None, ray, dem)
    assert gt == ray and mask.label() == "ray"

    sigma, bias, n = 0.1, 0.25, 10_000
    model = NoiseModel(sigma=sigma, bias=bias, seed=17)
    rng = model.rng()
    errs = np.array([apply_noise(10.0, model, rng) - 10.0 for _ in range(n)])
    band = 3 * sigma / math.sqrt(n)
    measured(f"flat spread {spread * 1e3:.3f} mm, canopy ray {ray:.3f} < dem {dem:.3f}, noise mean error {errs.mean():.5f} (bias {bias}, band {band:.4f})")
    assert abs(errs.mean() - bias) <= band


@pytest.mark.criterion(10, "dynamics: free fall, hover, OU gust statistics")
def test_dynamics(measured):
    dt, T = 1.0 / 30.0, 2.0
    params = VehicleParams(c_d=0.0)
    s = VehicleState.at((0.0, 0.0, 100.0))
    for _ in range(round(T / dt)):
        s = step_dynamics(s, Command(0.0, (1.0, 0.0, 0.0, 0.0)), (0.0, 0.0, 0.0), dt, params)
    fall = s.position[2] - 100.0
    assert abs(fall - (-0.5 * GRAVITY * T * T)) <= 1e-3

    hp = VehicleParams()
    h = VehicleState.at((1.0, 2.0, 3.0))
    drift = 0.0
    for _ in range(300):
        nxt = step_dynamics(h, hover_command(hp), (0.0, 0.0, 0.0), dt, hp)
        drift = max(drift, float(np.linalg.norm(nxt.position - h.position)))
        h = nxt
    assert drift < 1e-6

    sigma, tc = 1.7, 0.8
    g = make_gust((2.0, -1.0, 0.5), sigma, tc, seed=4242)
    n = 100_000
    out = np.empty((n, 3))
    for i in range(n):
        out[i], g = gust_sample(g, dt)
    std = out.std(axis=0)
    measured(f"free fall {fall:.6f} m (exact {-0.5 * GRAVITY * T * T:.6f}), hover drift {drift:.2e} m/step, gust stdev {np.round(std, 4).tolist()} (sigma {sigma})")
    assert np.all(np.abs(std - sigma) <= 0.05 * sigma)


@pytest.mark.criterion(11, "follow-scenario failures localized to the canopy segment")
def test_follow_localization(measured):
    sc = Scenario.parse("[run]\nscenario = follow\nwind = none\nstatic_flora = true\npursuit_gain = 0\nlog_frames = false\n")
    res = run_follow(sc)
    seg = canopy_segment(res.scene, res.leader_positions)
    assert seg is not None
    a, b = seg
    fails = res.failures
    inside = [t for t in fails if a - 10 <= t <= b + 10]
    outside = [t for t in fails if not a - 10 <= t <= b + 10]
    frac = len(inside) / len(fails) if fails else 1.0
    measured(f"canopy segment [{a}, {b}], {len(fails)} failures, {100 * frac:.1f}% inside, {len(outside)} on open ground")
    assert fails, "the canopy segment should cause failures"
    assert frac >= 0.9
    assert not outside


@pytest.mark.criterion(12, "replay reproduces live analysis byte-for-byte")
def test_replay_equivalence(tmp_path, measured):
    cfg = tmp_path / "oab.cfg"
    cfg.write_text("[run]\nscenario = out_and_back\nwind = low\nticks = 600\n")
    run_dir = tmp_path / "run"
    m = launch(cfg, run_dir, seed=3, port=0, timeout=600)
    assert m.status == "ok"
    res = replay(run_dir)
    names = sorted(p.name for p in res.outputs)
    for p in res.outputs:
        assert p.read_bytes() == (run_dir / p.name).read_bytes()
    measured(f"{len(names)} outputs compared: {', '.join(names)}")
    assert res.equivalent, res.mismatches
    cli = subprocess.run([sys.executable, "-m", "forestsim.cli", "replay", str(run_dir)], capture_output=True, text=True)
    assert cli.returncode == 0, cli.stderr
