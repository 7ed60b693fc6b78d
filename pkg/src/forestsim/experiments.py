"""Scenario definitions and runners: the out-and-back tracking study, its wind x altitude matrix, and the follow scenario."""
from __future__ import annotations

import csv
import dataclasses
import io
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError, build_dataclass, config_hash, dump_dataclass, parse_config
from .geometry import Pose6DOF, quat_from_euler
from .profiler import Profiler
from .runtime import (
    CameraConfig,
    GustConfig,
    SimResult,
    Simulation,
    VehicleSpec,
    follow_log_name,
    grid_report_name,
    hsv_log_rows,
)
from .scene import Scene, SceneConfig, build_scene
from .sensors import NoiseModel
from .tracking import HsvThreshold, LKParams, TrackReport, hsv_track, track_grid
from .vehicle import VehicleParams, Waypoint
from .world import VISUAL_DRONE, WorldConfig, load_frame_log

OUT_AND_BACK = "out_and_back"
FOLLOW = "follow"
SCENARIOS = (OUT_AND_BACK, FOLLOW)

# (mean speed m/s, gust stdev m/s)
WIND_LEVELS = {"none": (0.0, 0.0), "low": (2.0, 0.3), "high": (9.0, 2.0)}
ALTITUDES = {"low": 2.0, "high": 12.0}
WIND_HEADING = (0.8, 0.6, 0.0)

FOLLOWER_ID = 1
LEADER_ID = 2
OBSERVER_ID = 1


class AbortedRun(RuntimeError):
    """The vehicle did not finish its plan within the run; logs are kept."""


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = OUT_AND_BACK
    scene_seed: int = 7
    trial_seed: int = 1
    trials: int = 3
    trial_seeds: tuple[int, ...] = ()
    wind: str = "none"
    altitude: str = "low"
    altitude_m: Optional[float] = None
    tick_rate: float = 30.0
    ticks: int = 600
    mode: str = "lockstep"
    width: int = 320
    height: int = 240
    hfov_deg: float = 90.0
    camera_pitch_deg: float = 60.0
    encoding: int = 0
    log_frames: bool = True
    static_flora: bool = False
    # out-and-back maneuver
    settle_ticks: int = 90
    out_offset: tuple[float, float, float] = (-0.8, 0.4, 1.2)
    speed: float = 0.6
    # follow scenario
    leader_start: tuple[float, float, float] = (8.0, 0.0, 3.0)
    leader_turn: tuple[float, float, float] = (30.0, 0.0, 3.0)
    leader_speed: float = 3.0
    leader_hold: float = 1.0
    leader_camera: bool = False
    follow_hfov_deg: float = 60.0
    pursuit_gain: float = 0.0
    sensor: bool = False

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.trial_seeds and len(set(self.trial_seeds)) != len(self.trial_seeds):
            raise ValueError("trial_seeds must be distinct")
        if self.wind not in WIND_LEVELS:
            raise ValueError(f"wind must be one of {sorted(WIND_LEVELS)}")
        if self.altitude not in ALTITUDES:
            raise ValueError(f"altitude must be one of {sorted(ALTITUDES)}")
        if self.ticks < 2 or not self.tick_rate > 0:
            raise ValueError("need ticks >= 2 and tick_rate > 0")
        if self.mode not in ("lockstep", "realtime"):
            raise ValueError("mode must be lockstep or realtime")
        if self.encoding not in (0, 1):
            raise ValueError("encoding must be 0 or 1")

    @property
    def dt(self) -> float:
        return 1.0 / self.tick_rate

    @property
    def altitude_value(self) -> float:
        return self.altitude_m if self.altitude_m is not None else ALTITUDES[self.altitude]

    def seeds(self) -> tuple[int, ...]:
        if self.trial_seeds:
            return self.trial_seeds[: self.trials]
        return tuple(self.trial_seed + i for i in range(self.trials))


@dataclass(frozen=True)
class GridConfig:
    spacing: int = 16
    margin: int = 24


@dataclass(frozen=True)
class MatrixConfig:
    winds: tuple[str, ...] = ("low", "high")
    altitudes: tuple[str, ...] = ("low", "high")


_SECTIONS = ("run", "scene", "world", "vehicle", "tracking", "grid", "hsv", "noise", "matrix")


@dataclass(frozen=True)
class Scenario:
    """Everything a run needs, parsed from one scenario file."""

    run: ScenarioConfig
    scene_overrides: dict = field(default_factory=dict, compare=False)
    world_overrides: dict = field(default_factory=dict, compare=False)
    vehicle: VehicleParams = VehicleParams()
    lk: LKParams = LKParams()
    grid: GridConfig = GridConfig()
    hsv: HsvThreshold = HsvThreshold(340.0, 20.0, 0.5, 0.5, 4)
    noise: NoiseModel = NoiseModel(sigma=0.1)
    matrix: MatrixConfig = MatrixConfig()
    source: str = ""

    @classmethod
    def parse(cls, text: str) -> "Scenario":
        sections = parse_config(text, default_section="run")
        unknown = set(sections) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown sections {sorted(unknown)}")
        run = build_dataclass(ScenarioConfig, sections.get("run", {}), "run")
        scene_keys = {f.name for f in dataclasses.fields(SceneConfig)}
        world_keys = {f.name for f in dataclasses.fields(WorldConfig)} - {"dt"}
        for key in sections.get("scene", {}):
            if key not in scene_keys:
                raise ConfigError(f"unknown key {key!r} in [scene]")
        for key in sections.get("world", {}):
            if key not in world_keys:
                raise ConfigError(f"unknown key {key!r} in [world]")
        grid_values = dict(sections.get("grid", {}))
        return cls(
            run=run,
            scene_overrides=dict(sections.get("scene", {})),
            world_overrides=dict(sections.get("world", {})),
            vehicle=build_dataclass(VehicleParams, sections.get("vehicle", {}), "vehicle"),
            lk=build_dataclass(LKParams, sections.get("tracking", {}), "tracking"),
            grid=build_dataclass(GridConfig, grid_values, "grid"),
            hsv=build_dataclass(HsvThreshold, {"hue_lo": "340", "hue_hi": "20", "sat_min": "0.5", "val_min": "0.5", **sections.get("hsv", {})}, "hsv"),
            noise=build_dataclass(NoiseModel, {"sigma": "0.1", **sections.get("noise", {})}, "noise"),
            matrix=build_dataclass(MatrixConfig, sections.get("matrix", {}), "matrix"),
            source=text,
        )

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        try:
            text = Path(path).read_text()
        except (OSError, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
        return cls.parse(text)

    def with_run(self, **changes) -> "Scenario":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, **changes))

    def canonical(self) -> str:
        """Normalized text of every effective parameter; the config hash is taken over this."""
        parts = [
            dump_dataclass(self.run, "run"),
            dump_dataclass(self.scene_config(self.run.trial_seed), "scene"),
            dump_dataclass(self.world_config(), "world", exclude=("dt",)),  # dt follows tick_rate
            dump_dataclass(self.vehicle, "vehicle"),
            dump_dataclass(self.lk, "tracking"),
            dump_dataclass(self.grid, "grid"),
            dump_dataclass(self.hsv, "hsv"),
            dump_dataclass(self.noise, "noise"),
            dump_dataclass(self.matrix, "matrix"),
        ]
        return "\n".join(parts)

    def config_hash(self) -> str:
        return config_hash(self.canonical())

    # -- derived configuration --------------------------------------------
    def scene_config(self, trial_seed: int) -> SceneConfig:
        r = self.run
        speed, sigma = WIND_LEVELS[r.wind]
        hx, hy, hz = WIND_HEADING
        base = dict(_default_scene(r))
        base.update(
            wind_mean=(speed * hx, speed * hy, speed * hz),
            turbulence_intensity=sigma,
            gust_seed=trial_seed,
        )
        if r.static_flora:
            base["sway_k"] = 0.0
        cfg = SceneConfig(**base)
        if self.scene_overrides:
            cfg = build_dataclass(SceneConfig, self.scene_overrides, "scene", **{k: v for k, v in dataclasses.asdict(cfg).items() if k not in self.scene_overrides})
        return cfg

    def world_config(self) -> WorldConfig:
        base = {"dt": self.run.dt}
        if self.run.scenario == FOLLOW:
            base["drone_scale"] = 2.0
        defaults = {k: v for k, v in base.items() if k not in self.world_overrides}
        return build_dataclass(WorldConfig, self.world_overrides, "world", **defaults)

    def build(self, trial_seed: Optional[int] = None) -> tuple[Scene, WorldConfig, list[VehicleSpec]]:
        seed = self.run.trial_seed if trial_seed is None else trial_seed
        scene_cfg = self.scene_config(seed)
        scene = build_scene(self.run.scene_seed, scene_cfg)
        gust = GustConfig(scene_cfg.wind_mean, scene_cfg.turbulence_intensity, scene_cfg.correlation_time, seed)
        if self.run.scenario == OUT_AND_BACK:
            specs = [self._out_and_back_spec(gust)]
        else:
            specs = self._follow_specs(gust)
        return scene, self.world_config(), specs

    def _out_and_back_spec(self, gust: GustConfig) -> VehicleSpec:
        r = self.run
        alt = r.altitude_value
        start = (0.0, 0.0, alt)
        out = tuple(s + o for s, o in zip(start, r.out_offset))
        settle = r.settle_ticks * r.dt
        plan = (
            Waypoint(start, hold_time=settle, speed=r.speed),
            Waypoint(out, hold_time=0.3, speed=r.speed),
            Waypoint(start, hold_time=0.0, speed=r.speed),
        )
        mount = Pose6DOF.from_arrays((0.0, 0.0, 0.0), quat_from_euler(pitch=math.radians(r.camera_pitch_deg)))
        cam = CameraConfig(r.width, r.height, math.radians(r.hfov_deg), 0.05, 200.0, mount, r.encoding)
        return VehicleSpec(
            body_id=OBSERVER_ID,
            start=start,
            plan=plan,
            yaw=0.0,
            params=self.vehicle,
            visual=VISUAL_DRONE,
            hue=210.0,
            camera=cam,
            gust=gust,
            analysis="grid",
            track_start=r.settle_ticks,
            grid_spacing=self.grid.spacing,
            grid_margin=self.grid.margin,
            lk=self.lk,
            log_frames=r.log_frames,
            sensor=self.noise if r.sensor else None,
        )

    def _follow_specs(self, gust: GustConfig) -> list[VehicleSpec]:
        r = self.run
        follower_start = (0.0, 0.0, r.leader_start[2])
        cam = CameraConfig(r.width, r.height, math.radians(r.follow_hfov_deg), 0.05, 200.0, Pose6DOF(0, 0, 0), r.encoding)
        follower = VehicleSpec(
            body_id=FOLLOWER_ID,
            start=follower_start,
            plan=(Waypoint(follower_start, hold_time=0.0, speed=1.0),),
            params=self.vehicle,
            visual=VISUAL_DRONE,
            hue=220.0,
            camera=cam,
            gust=gust,
            analysis="hsv",
            hsv=self.hsv,
            pursuit_gain=r.pursuit_gain,
            log_frames=r.log_frames,
            sensor=self.noise if r.sensor else None,
        )
        leader_plan = (
            Waypoint(r.leader_turn, hold_time=r.leader_hold, speed=r.leader_speed),
            Waypoint(r.leader_start, hold_time=0.0, speed=r.leader_speed),
        )
        leader_cam = None
        if r.leader_camera:
            leader_cam = CameraConfig(r.width, r.height, math.radians(r.hfov_deg), 0.05, 200.0, Pose6DOF(0, 0, 0), r.encoding)
        leader = VehicleSpec(
            body_id=LEADER_ID,
            start=r.leader_start,
            plan=leader_plan,
            params=self.vehicle,
            visual=VISUAL_DRONE,
            hue=0.0,
            camera=leader_cam,
            gust=gust,
            analysis="none",
            log_frames=r.log_frames,
        )
        return [follower, leader]


def _default_scene(r: ScenarioConfig) -> dict:
    if r.scenario == OUT_AND_BACK:
        return dict(
            clearings=((-2.5, -2.5, 2.5, 2.5),),
            fixed_trees=((10.0, 0.0),),
        )
    # open ground in front of the follower, dense forest band further out
    return dict(
        tree_count=60,
        tree_region=(16.0, -14.0, 40.0, 14.0),
        clearings=((-4.0, -6.0, 15.0, 6.0),),
        bush_count=30,
        rock_count=20,
        grass_count=60,
    )


# ---------------------------------------------------------------------------
# runners


@dataclass
class OutAndBackResult:
    report: TrackReport
    seed: int
    out_dir: Optional[Path]
    final_error: float
    sim: SimResult


def run_out_and_back(scenario: Scenario, out_dir: Optional[Path] = None, trial_seed: Optional[int] = None, profiler: Optional[Profiler] = None) -> OutAndBackResult:
    if scenario.run.scenario != OUT_AND_BACK:
        raise ValueError("scenario is not out_and_back")
    seed = scenario.run.trial_seed if trial_seed is None else trial_seed
    scene, world_cfg, specs = scenario.build(seed)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    sim = Simulation(scene, world_cfg, specs, scenario.run.ticks, out_dir, profiler).run()
    agent = sim.agents[OBSERVER_ID]
    if out_dir is not None:
        write_summary(Path(out_dir))
    if not agent.guidance.complete:
        raise AbortedRun(f"plan incomplete after {scenario.run.ticks} ticks (waypoint {agent.guidance.index})")
    err = float(np.linalg.norm(agent.state.position - np.asarray(specs[0].start)))
    return OutAndBackResult(agent.report, seed, Path(out_dir) if out_dir else None, err, sim)


@dataclass
class FollowResult:
    rows: list[tuple[int, Optional[tuple[float, float]]]]
    leader_positions: list[np.ndarray]
    follower_positions: list[np.ndarray]
    scene: Scene
    sim: SimResult

    @property
    def failures(self) -> list[int]:
        return [t for t, c in self.rows if c is None]


def run_follow(scenario: Scenario, out_dir: Optional[Path] = None, trial_seed: Optional[int] = None, profiler: Optional[Profiler] = None) -> FollowResult:
    if scenario.run.scenario != FOLLOW:
        raise ValueError("scenario is not follow")
    seed = scenario.run.trial_seed if trial_seed is None else trial_seed
    scene, world_cfg, specs = scenario.build(seed)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    leader, follower = [], []

    def record(snap, frames):
        leader.append(snap.poses[LEADER_ID].position.copy())
        follower.append(snap.poses[FOLLOWER_ID].position.copy())

    sim = Simulation(scene, world_cfg, specs, scenario.run.ticks, out_dir, profiler, on_tick=record).run()
    if out_dir is not None:
        write_summary(Path(out_dir))
    return FollowResult(sim.agents[FOLLOWER_ID].hsv_rows, leader, follower, scene, sim)


def under_canopy(scene: Scene, position, offsets: Optional[np.ndarray] = None) -> bool:
    """True when ``position`` lies below some canopy sphere (inside its vertical shadow)."""
    centers, radii = scene.canopy_spheres()
    x, y, z = (float(v) for v in position)
    d2 = (centers[:, 0] - x) ** 2 + (centers[:, 1] - y) ** 2
    inside = d2 < radii**2
    if not inside.any():
        return False
    bottom = centers[inside, 2] - np.sqrt(radii[inside] ** 2 - d2[inside])
    return bool(np.any(z < bottom))


def canopy_segment(scene: Scene, positions: Sequence) -> Optional[tuple[int, int]]:
    ticks = [t for t, p in enumerate(positions) if under_canopy(scene, p)]
    return (ticks[0], ticks[-1]) if ticks else None


# ---------------------------------------------------------------------------
# matrix


@dataclass
class MatrixReport:
    cells: dict[tuple[str, str], list[tuple[float, float, int]]]
    config_hash: str
    seeds: tuple[int, ...]
    incomplete: list[tuple[str, str, int, str]] = field(default_factory=list)

    def median(self, wind: str, alt: str) -> float:
        vals = [g for g, _, _ in self.cells.get((wind, alt), []) if not math.isnan(g)]
        return statistics.median(vals) if vals else math.nan

    def medians(self) -> dict[tuple[str, str], float]:
        return {k: self.median(*k) for k in self.cells}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["wind", "alt", "trial", "G", "percent", "seed"])
        for (wind, alt), rows in self.cells.items():
            for i, (g, pct, seed) in enumerate(rows):
                w.writerow([wind, alt, i, repr(g), repr(pct), seed])
        return buf.getvalue()

    def table(self) -> str:
        winds = sorted({k[0] for k in self.cells}, key=list(WIND_LEVELS).index)
        alts = sorted({k[1] for k in self.cells}, key=list(ALTITUDES).index)
        lines = ["median G [px^2] " + " ".join(f"{a + '-alt':>12}" for a in alts)]
        for wnd in winds:
            lines.append(f"{wnd + '-wind':<15} " + " ".join(f"{self.median(wnd, a):12.3f}" for a in alts))
        return "\n".join(lines) + "\n"


def run_matrix(scenario: Scenario, out_dir: Optional[Path] = None, progress=None) -> MatrixReport:
    """All wind x altitude cells, one out-and-back per trial seed, sequentially."""
    seeds = scenario.run.seeds()
    report = MatrixReport({}, scenario.config_hash(), seeds)
    for wind in scenario.matrix.winds:
        for alt in scenario.matrix.altitudes:
            cell = scenario.with_run(wind=wind, altitude=alt, scenario=OUT_AND_BACK)
            rows = report.cells.setdefault((wind, alt), [])
            for seed in seeds:
                trial_dir = Path(out_dir) / f"{wind}_{alt}_{seed}" if out_dir is not None else None
                try:
                    res = run_out_and_back(cell, trial_dir, seed)
                except AbortedRun as exc:
                    report.incomplete.append((wind, alt, seed, str(exc)))
                    continue
                rows.append((res.report.G, res.report.percent_correct, seed))
                if progress is not None:
                    progress(wind, alt, seed, res)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "matrix.csv").write_text(report.to_csv())
        (Path(out_dir) / "matrix_table.txt").write_text(report.table())
    return report


# ---------------------------------------------------------------------------
# analysis of logged runs (shared by live runs and replay)


def analyze_frames(run_dir: Path, dest: Path, scenario: Scenario) -> list[Path]:
    """Recompute tracking outputs from recorded frames into ``dest``."""
    scene, world_cfg, specs = scenario.build()
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    for spec in specs:
        if spec.camera is None or spec.analysis == "none":
            continue
        frames = load_frame_log(run_dir, spec.body_id)
        if spec.analysis == "grid":
            used = [f for f in frames if f.tick >= spec.track_start]
            rep = track_grid(used, spec.grid_spacing, spec.grid_margin, spec.lk)
            path = dest / grid_report_name(spec.body_id)
            path.write_text(rep.to_csv())
        else:
            rows = [(f.tick, hsv_track(f, spec.hsv)) for f in frames]
            path = dest / follow_log_name(spec.body_id)
            path.write_text(hsv_log_rows(rows))
        written.append(path)
    written.append(write_summary(dest))
    return written


def read_track_summary(path: Path) -> tuple[float, int, int, float]:
    rows = list(csv.reader(open(path, newline="")))
    g, n, total, pct = rows[-1]
    return float(g), int(n), int(total), float(pct)


def write_summary(directory: Path) -> Path:
    """Aggregate tracking outputs in ``directory`` into summary.csv."""
    lines = ["kind,camera,metric,value"]
    for path in sorted(directory.glob("track_cam*.csv")):
        cam = path.stem.removeprefix("track_cam")
        g, n, total, pct = read_track_summary(path)
        lines += [f"grid,{cam},G,{g!r}", f"grid,{cam},tracked,{n}", f"grid,{cam},total,{total}", f"grid,{cam},percent,{pct!r}"]
    for path in sorted(directory.glob("follow_cam*.csv")):
        cam = path.stem.removeprefix("follow_cam")
        rows = list(csv.DictReader(open(path, newline="")))
        if rows and list(rows[0]) != ["tick", "found", "cx", "cy"]:
            raise ValueError(f"{path}: unexpected follow log schema")
        fails = [int(r["tick"]) for r in rows if r["found"] == "0"]
        lines += [f"hsv,{cam},ticks,{len(rows)}", f"hsv,{cam},failures,{len(fails)}"]
        if fails:
            lines += [f"hsv,{cam},first_failure,{fails[0]}", f"hsv,{cam},last_failure,{fails[-1]}"]
    out = directory / "summary.csv"
    out.write_text("\n".join(lines) + "\n")
    return out


ANALYSIS_GLOBS = ("track_cam*.csv", "follow_cam*.csv", "summary.csv")


def summarize(directory: str | Path) -> dict:
    """Table-shaped and series-shaped views of one run directory or a matrix directory."""
    d = Path(directory)
    out: dict = {}
    if (d / "matrix.csv").exists():
        rows = list(csv.DictReader(open(d / "matrix.csv", newline="")))
        if rows and list(rows[0]) != ["wind", "alt", "trial", "G", "percent", "seed"]:
            raise ValueError("unexpected matrix.csv schema")
        cells: dict = {}
        for r in rows:
            cells.setdefault((r["wind"], r["alt"]), []).append(float(r["G"]))
        out["matrix"] = {k: statistics.median(v) for k, v in cells.items()}
    for path in sorted(d.glob("follow_cam*.csv")):
        rows = list(csv.DictReader(open(path, newline="")))
        out[path.stem] = [(int(r["tick"]), r["found"] == "1", float(r["cx"]) if r["cx"] else math.nan, float(r["cy"]) if r["cy"] else math.nan) for r in rows]
    for path in sorted(d.glob("track_cam*.csv")):
        out[path.stem] = read_track_summary(path)
    return out
