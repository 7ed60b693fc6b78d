"""Tick loops: vehicle agents, the in-process simulation, and the networked server and vehicle processes.

Lockstep mode is deterministic: tick ``t`` is rendered only after every
vehicle has submitted its pose for ``t``, and a vehicle steps to ``t + 1``
only after TICK_DONE(t). Realtime mode paces ticks by the wall clock, holds
stale poses and drops stale frames.
"""
from __future__ import annotations

import logging
import math
import queue
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace
from typing import Callable, Optional, Sequence

import numpy as np

from . import protocol as P
from .geometry import IDENTITY, Pose6DOF
from .profiler import NullProfiler, Profiler
from .scene import Scene, sway_offsets
from .sensors import NoiseModel, RangeSensor, RayCaster, SensorLog
from .session import Acceptor, ClientConnection, Closed, PortInUse, Session, connect, listen
from .tracking import GridTracker, HsvThreshold, LKParams, TrackReport, hsv_track
from .vehicle import GustProcess, VehicleParams, VehicleState, Waypoint, WaypointGuidance, step_dynamics
from .world import VISUAL_DRONE, CameraSpec, Frame, FrameLog, PoseLog, WorldConfig, WorldError, WorldServer

log = logging.getLogger(__name__)

LOCKSTEP = "lockstep"
REALTIME = "realtime"
_EMPTY_DEPTH = np.zeros((0, 0), np.float32)


class RunError(RuntimeError):
    exit_code = 3


class RunTimeout(RunError):
    exit_code = 4


@dataclass(frozen=True)
class CameraConfig:
    width: int = 320
    height: int = 240
    hfov: float = math.pi / 2
    near: float = 0.05
    far: float = 200.0
    mount: Pose6DOF = IDENTITY
    encoding: int = P.Encoding.RGB8


@dataclass(frozen=True)
class GustConfig:
    mean_wind: tuple[float, float, float] = (0.0, 0.0, 0.0)
    sigma: float = 0.0
    correlation_time: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class VehicleSpec:
    body_id: int
    start: tuple[float, float, float]
    plan: tuple[Waypoint, ...]
    yaw: float = 0.0
    params: VehicleParams = VehicleParams()
    visual: int = VISUAL_DRONE
    hue: float = 0.0
    camera: Optional[CameraConfig] = None  # camera id equals body id
    gust: GustConfig = GustConfig()
    analysis: str = "none"  # none | grid | hsv
    track_start: int = 0
    grid_spacing: int = 16
    grid_margin: int = 24
    lk: LKParams = LKParams()
    hsv: Optional[HsvThreshold] = None
    pursuit_gain: float = 0.0
    log_frames: bool = True
    sensor: Optional[NoiseModel] = None

    def camera_spec(self) -> Optional[CameraSpec]:
        c = self.camera
        if c is None:
            return None
        return CameraSpec(self.body_id, self.body_id, c.width, c.height, c.hfov, c.near, c.far, c.mount)

    def hello(self) -> P.Hello:
        cam = None
        if self.camera is not None:
            c = self.camera
            cam = P.CameraInfo(self.body_id, c.width, c.height, c.hfov, c.near, c.far, c.mount.as_tuple())
        return P.Hello(P.PROTOCOL_VERSION, self.body_id, cam, self.visual)


def pose_message(body_id: int, tick: int, pose: Pose6DOF) -> P.Pose:
    return P.Pose(body_id, tick, *pose.as_tuple())


def message_pose(msg: P.Pose) -> Pose6DOF:
    return Pose6DOF(msg.x, msg.y, msg.z, msg.qw, msg.qx, msg.qy, msg.qz)


def frame_messages(frame: Frame, encoding: int) -> tuple[P.FrameHeader, bytes]:
    header = P.FrameHeader(frame.camera_id, frame.tick, frame.sim_time, frame.width, frame.height, int(encoding))
    depth = frame.depth if encoding == P.Encoding.RGB8_DEPTH_F32 else None
    return header, P.pack_frame(frame.rgb, depth, encoding)


def decode_frame_messages(header: P.FrameHeader, payload: bytes) -> Frame:
    rgb, depth = P.unpack_frame(header, payload)
    return Frame(header.camera_id, header.tick, header.sim_time, rgb.copy(), _EMPTY_DEPTH if depth is None else depth)


# ---------------------------------------------------------------------------
# vehicle agent


def grid_report_name(camera_id: int) -> str:
    return f"track_cam{camera_id}.csv"


def follow_log_name(camera_id: int) -> str:
    return f"follow_cam{camera_id}.csv"


def hsv_log_rows(rows: Sequence[tuple[int, Optional[tuple[float, float]]]]) -> str:
    out = ["tick,found,cx,cy"]
    for tick, c in rows:
        out.append(f"{tick},0,," if c is None else f"{tick},1,{c[0]!r},{c[1]!r}")
    return "\n".join(out) + "\n"


class VehicleAgent:
    """Vehicle-side logic independent of transport.

    ``on_frame`` receives this body's camera frames for the current tick and
    ``on_tick_done(t)`` closes tick ``t``; it returns the pose for ``t + 1``
    or None after the final tick.
    """

    def __init__(self, spec: VehicleSpec, dt: float, ticks: int, out_dir: Optional[Path], scene: Optional[Scene] = None, profiler: Optional[Profiler] = None):
        self.spec = spec
        self.dt = dt
        self.ticks = ticks
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.profiler = profiler or NullProfiler()
        self.state = VehicleState.at(spec.start, spec.yaw)
        self.guidance = WaypointGuidance(list(spec.plan), spec.params, spec.yaw)
        g = spec.gust
        self.gust = GustProcess(g.mean_wind, g.sigma, g.correlation_time, g.seed)
        self.wind = self.gust.current
        self.tick = 0
        self.done = False
        self.frames_seen = 0
        self.tracker: Optional[GridTracker] = None
        self.report: Optional[TrackReport] = None
        self.hsv_rows: list[tuple[int, Optional[tuple[float, float]]]] = []
        self._pending_frame: Optional[Frame] = None
        cam = spec.camera
        self._frame_log = None
        self._pose_log = None
        self._sensor_log = None
        if self.out_dir is not None:
            self._pose_log = PoseLog(self.out_dir / f"vehicle{spec.body_id}_poses.csv")
            if cam is not None and spec.log_frames:
                self._frame_log = FrameLog(self.out_dir, spec.body_id, with_depth=cam.encoding == P.Encoding.RGB8_DEPTH_F32)
        self.sensor = None
        if spec.sensor is not None:
            if scene is None:
                raise ValueError("a range sensor needs the scene")
            self.sensor = RangeSensor(RayCaster(scene), spec.body_id, spec.sensor)
            self._scene = scene
            self._gains = np.array([f.sway_gain for f in scene.flora])
            self._phases = np.array([f.sway_phase for f in scene.flora])
            self.readings = []
            if self.out_dir is not None:
                self._sensor_log = SensorLog(self.out_dir / f"sensor_{spec.body_id}.csv")

    @property
    def body_id(self) -> int:
        return self.spec.body_id

    def pose(self) -> Pose6DOF:
        return self.state.pose()

    def pose_message(self) -> P.Pose:
        return pose_message(self.body_id, self.tick, self.pose())

    def on_frame(self, frame: Frame) -> None:
        if frame.camera_id != self.body_id or frame.tick != self.tick:
            raise RunError(f"body {self.body_id} got frame cam={frame.camera_id} tick={frame.tick} during tick {self.tick}")
        self.frames_seen += 1
        self._pending_frame = frame
        if self._frame_log is not None:
            self._frame_log.append(frame)
        s = self.spec
        if s.analysis == "grid" and frame.tick >= s.track_start:
            with self.profiler.instrument("track"):
                if self.tracker is None:
                    self.tracker = GridTracker(frame.rgb, s.grid_spacing, s.grid_margin, s.lk, tick=frame.tick)
                else:
                    self.tracker.update(frame.rgb, frame.tick)
        elif s.analysis == "hsv" and s.hsv is not None:
            with self.profiler.instrument("track"):
                c = hsv_track(frame, s.hsv)
            self.hsv_rows.append((frame.tick, c))
            if c is not None and s.pursuit_gain:
                # yaw toward the blob; image x grows to the body's right
                err = (c[0] - (frame.width - 1) / 2) / frame.width
                self.guidance.yaw -= s.pursuit_gain * err * self.dt

    def on_tick_done(self, tick: int) -> Optional[Pose6DOF]:
        if tick != self.tick:
            raise RunError(f"body {self.body_id} expected TICK_DONE({self.tick}), got {tick}")
        if self._pose_log is not None:
            self._pose_log.write_row(tick, tick * self.dt, self.body_id, self.pose())
        if self.sensor is not None:
            self._measure(tick)
        self._pending_frame = None
        if tick >= self.ticks - 1:
            self.finish()
            return None
        cmd = self.guidance(self.state, self.dt)
        self.state = step_dynamics(self.state, cmd, self.wind, self.dt, self.spec.params)
        self.wind = self.gust.step(self.dt)
        self.tick += 1
        return self.pose()

    def _measure(self, tick: int) -> None:
        offsets = sway_offsets(self._gains, self._phases, self.wind, tick * self.dt, self._scene.sway)
        snap = SimpleNamespace(tick=tick, poses={self.body_id: self.pose()}, flora_offsets=offsets)
        frame = self._pending_frame
        if frame is not None and frame.depth.size == 0:
            frame = None
        r = self.sensor.measure(snap, frame)
        self.readings.append(r)
        if self._sensor_log is not None:
            self._sensor_log.write(r)

    def finish(self) -> None:
        if self.done:
            return
        self.done = True
        if self.tracker is not None:
            self.report = self.tracker.report()
        if self.out_dir is not None:
            if self.report is not None:
                (self.out_dir / grid_report_name(self.body_id)).write_text(self.report.to_csv())
            if self.spec.analysis == "hsv":
                (self.out_dir / follow_log_name(self.body_id)).write_text(hsv_log_rows(self.hsv_rows))
        self.close()

    def close(self) -> None:
        for f in (self._frame_log, self._pose_log, self._sensor_log):
            if f is not None:
                f.close()
        self._frame_log = self._pose_log = self._sensor_log = None


# ---------------------------------------------------------------------------
# in-process runner


@dataclass
class SimResult:
    ticks: int
    agents: dict[int, VehicleAgent]
    wall_seconds: float
    profile: list = field(default_factory=list)


def _register(world: WorldServer, spec: VehicleSpec, pose: Pose6DOF) -> None:
    world.register_body(spec.body_id, pose, spec.visual, spec.hue)
    cam = spec.camera_spec()
    if cam is not None:
        world.register_camera(cam)


class Simulation:
    """Single-process lockstep run with the same agent logic and wire encoding as the networked run."""

    def __init__(
        self,
        scene: Scene,
        world_config: WorldConfig,
        specs: Sequence[VehicleSpec],
        ticks: int,
        out_dir: Optional[Path] = None,
        profiler: Optional[Profiler] = None,
        on_tick: Optional[Callable] = None,
    ):
        if ticks < 1:
            raise ValueError("ticks must be >= 1")
        self.scene = scene
        self.world_config = world_config
        self.specs = list(specs)
        self.ticks = ticks
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.profiler = profiler or NullProfiler()
        self.on_tick = on_tick

    def run(self) -> SimResult:
        t_start = time.perf_counter()
        world = WorldServer(self.scene, self.world_config)
        agents = {s.body_id: VehicleAgent(s, self.world_config.dt, self.ticks, self.out_dir, self.scene, self.profiler) for s in self.specs}
        pose_log = PoseLog(self.out_dir / "poses.csv") if self.out_dir is not None else None
        try:
            pending = {b: a.pose() for b, a in agents.items()}
            for s in self.specs:
                _register(world, s, pending[s.body_id])
            enc = {s.body_id: s.camera.encoding for s in self.specs if s.camera is not None}
            for t in range(self.ticks):
                with self.profiler.instrument("protocol"):
                    for b, pose in pending.items():
                        msg = P.decode(P.encode(pose_message(b, t, pose)))
                        world.submit_pose(b, msg.tick, message_pose(msg))
                snap = world.advance_tick()
                with self.profiler.instrument("render"):
                    frames = world.render_all(snap)
                if pose_log is not None:
                    pose_log.write_snapshot(snap)
                for f in frames:
                    with self.profiler.instrument("protocol"):
                        header, payload = frame_messages(f, enc[f.camera_id])
                        got = decode_frame_messages(P.decode(P.encode(header)), P.decode(P.encode(P.FramePayload(payload))).data)
                    agents[world_camera_owner(world, f.camera_id)].on_frame(got)
                pending = {}
                for b, a in agents.items():
                    nxt = a.on_tick_done(t)
                    if nxt is not None:
                        pending[b] = nxt
                if self.on_tick is not None:
                    self.on_tick(snap, frames)
                self.profiler.end_tick(t, len(frames))
        finally:
            for a in agents.values():
                a.close()
            if pose_log is not None:
                pose_log.close()
            world.close()
        return SimResult(self.ticks, agents, time.perf_counter() - t_start, list(self.profiler.samples))


def world_camera_owner(world: WorldServer, camera_id: int) -> int:
    for c in world.cameras:
        if c.camera_id == camera_id:
            return c.owner_body
    raise WorldError(f"unknown camera {camera_id}")


# ---------------------------------------------------------------------------
# networked server


@dataclass
class _Peer:
    session: Session
    hello: P.Hello
    spec: VehicleSpec
    registered: bool = False
    pose_tick: int = -1
    finished: bool = False


class WorldProcess:
    """The world-server side of a networked run."""

    def __init__(
        self,
        scene: Scene,
        world_config: WorldConfig,
        specs: Sequence[VehicleSpec],
        ticks: int,
        host: str = "127.0.0.1",
        port: int = 0,
        out_dir: Optional[Path] = None,
        mode: str = LOCKSTEP,
        profiler: Optional[Profiler] = None,
        stall_timeout: float = 60.0,
    ):
        if mode not in (LOCKSTEP, REALTIME):
            raise ValueError(f"unknown mode {mode!r}")
        self.world = WorldServer(scene, world_config)
        self.specs = {s.body_id: s for s in specs}
        self.ticks = ticks
        self.mode = mode
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.profiler = profiler or NullProfiler()
        self.stall_timeout = stall_timeout
        self.events: queue.Queue = queue.Queue()
        self.srv = listen(host, port)
        self.port = self.srv.getsockname()[1]
        self.peers: dict[int, _Peer] = {}
        self.errors: list[str] = []
        self.tick_times: list[float] = []

    # -- event handling ----------------------------------------------------
    def _reject(self, session: Session, code: P.ErrorCode, text: str) -> None:
        self.errors.append(f"session {session.sid}: {text}")
        log.warning("rejecting session %d: %s", session.sid, text)
        session.close(P.Error(int(code), text), wait=1.0)

    def _handle(self, session: Session, item) -> None:
        if isinstance(item, Closed):
            peer = self.peers.get(session.body_id) if session.body_id is not None else None
            if peer is not None and not peer.finished:
                raise RunError(f"vehicle {session.body_id} disconnected before the run finished ({item.reason})")
            return
        if isinstance(item, P.DecodeError):
            self._reject(session, P.ErrorCode.DECODE_ERROR, f"{item.code}: {item}")
            if session.body_id is not None:
                raise RunError(f"vehicle {session.body_id} sent an undecodable stream: {item}")
            return
        if session.hello is None:
            if not isinstance(item, P.Hello):
                self._reject(session, P.ErrorCode.HANDSHAKE_VIOLATION, f"expected HELLO, got {type(item).__name__}")
                return
            if item.protocol_version != P.PROTOCOL_VERSION:
                self._reject(session, P.ErrorCode.VERSION_MISMATCH, f"protocol version {item.protocol_version} != {P.PROTOCOL_VERSION}")
                return
            if item.body_id in self.peers:
                self._reject(session, P.ErrorCode.DUPLICATE_BODY, f"body {item.body_id} already connected")
                return
            spec = self.specs.get(item.body_id)
            if spec is None:
                self._reject(session, P.ErrorCode.UNKNOWN_BODY, f"body {item.body_id} is not part of this scenario")
                return
            session.hello = item
            session.body_id = item.body_id
            self.peers[item.body_id] = _Peer(session, item, spec)
            session.send(P.HelloAck(item.body_id))
            return
        peer = self.peers[session.body_id]
        if isinstance(item, P.Hello):
            self._reject(session, P.ErrorCode.HANDSHAKE_VIOLATION, "duplicate HELLO")
            raise RunError(f"vehicle {session.body_id} violated the handshake")
        if isinstance(item, P.Pose):
            if item.body_id != session.body_id:
                session.send(P.Error(int(P.ErrorCode.UNKNOWN_BODY), f"session owns body {session.body_id}, not {item.body_id}"))
                return
            pose = message_pose(item)
            if not peer.registered:
                self._register_peer(peer, pose)
            else:
                try:
                    self.world.submit_pose(item.body_id, item.tick, pose)
                except WorldError as exc:
                    session.send(P.Error(int(P.ErrorCode.BAD_POSE), str(exc)))
                    return
            peer.pose_tick = item.tick
            return
        session.send(P.Error(int(P.ErrorCode.HANDSHAKE_VIOLATION), f"unexpected {type(item).__name__} from a vehicle"))

    def _register_peer(self, peer: _Peer, pose: Pose6DOF) -> None:
        h = peer.hello
        spec = peer.spec
        self.world.register_body(h.body_id, pose, h.visual, spec.hue)
        if h.camera is not None:
            c = h.camera
            self.world.register_camera(CameraSpec(c.camera_id, h.body_id, c.width, c.height, c.hfov, c.near, c.far, Pose6DOF(*c.mount)))
        peer.registered = True

    def _pump(self, until: Callable[[], bool], deadline: Optional[float]) -> None:
        last = time.monotonic()
        while not until():
            timeout = 0.5
            if deadline is not None:
                timeout = deadline - time.monotonic()
                if timeout <= 0:
                    return
            try:
                session, item = self.events.get(timeout=min(timeout, 0.5))
            except queue.Empty:
                if deadline is None and time.monotonic() - last > self.stall_timeout:
                    raise RunTimeout(f"no progress for {self.stall_timeout:.0f} s")
                continue
            last = time.monotonic()
            self._handle(session, item)

    # -- main loop ---------------------------------------------------------
    def serve(self, ready: Optional[Callable[[int], None]] = None) -> None:
        acceptor = Acceptor(self.srv, self.events, drop_frames=self.mode == REALTIME)
        if ready is not None:
            ready(self.port)
        pose_log = PoseLog(self.out_dir / "poses.csv") if self.out_dir is not None else None
        try:
            expected = set(self.specs)
            self._pump(lambda: set(self.peers) == expected and all(p.registered for p in self.peers.values()), None)
            enc = {b: (p.hello.camera is not None, self.specs[b].camera.encoding if self.specs[b].camera else 0) for b, p in self.peers.items()}
            t0 = time.monotonic()
            for t in range(self.ticks):
                with self.profiler.instrument("protocol"):
                    if self.mode == LOCKSTEP:
                        self._pump(lambda: all(p.pose_tick >= t for p in self.peers.values()), None)
                    else:
                        self._pump(lambda: False, t0 + t * self.world.config.dt)
                snap = self.world.advance_tick()
                with self.profiler.instrument("render"):
                    frames = self.world.render_all(snap)
                if pose_log is not None:
                    pose_log.write_snapshot(snap)
                with self.profiler.instrument("protocol"):
                    for f in frames:
                        owner = world_camera_owner(self.world, f.camera_id)
                        header, payload = frame_messages(f, enc[owner][1])
                        self.peers[owner].session.send_frame(f.camera_id, header, payload)
                    for p in self.peers.values():
                        p.session.send(P.TickDone(t))
                        if t == self.ticks - 1:
                            p.finished = True
                self.tick_times.append(time.monotonic())
                self.profiler.end_tick(t, len(frames))
            # let vehicles drain their last frames and hang up
            self._pump(lambda: all(p.session.backlog == 0 for p in self.peers.values()), time.monotonic() + 10.0)
        finally:
            if pose_log is not None:
                pose_log.close()
            acceptor.close()
            self.world.close()


def run_vehicle(spec: VehicleSpec, dt: float, ticks: int, host: str, port: int, out_dir: Optional[Path], scene: Optional[Scene] = None, connect_timeout: float = 30.0) -> int:
    """Vehicle process body; returns an exit status (0 ok, 3 connection or protocol failure)."""
    try:
        conn = ClientConnection(connect(host, port, connect_timeout))
    except OSError as exc:
        print(f"vehicle {spec.body_id}: cannot reach world server at {host}:{port}: {exc}", file=sys.stderr)
        return 3
    agent = VehicleAgent(spec, dt, ticks, out_dir, scene)
    try:
        conn.send(spec.hello())
        msg = conn.recv()
        if isinstance(msg, P.Error):
            print(f"vehicle {spec.body_id}: server refused: [{msg.code}] {msg.text}", file=sys.stderr)
            return 3
        if not isinstance(msg, P.HelloAck) or msg.assigned != spec.body_id:
            print(f"vehicle {spec.body_id}: bad handshake reply {msg!r}", file=sys.stderr)
            return 3
        conn.send(agent.pose_message())
        header: Optional[P.FrameHeader] = None
        while True:
            msg = conn.recv()
            if isinstance(msg, P.FrameHeader):
                header = msg
            elif isinstance(msg, P.FramePayload):
                if header is None:
                    raise RunError("FRAME_PAYLOAD without FRAME_HEADER")
                frame = decode_frame_messages(header, msg.data)
                header = None
                if frame.tick == agent.tick:
                    agent.on_frame(frame)
            elif isinstance(msg, P.TickDone):
                if msg.tick < agent.tick:
                    continue
                if msg.tick >= ticks - 1 and agent.tick < ticks - 1:
                    # realtime lag: the run ended before this vehicle caught up
                    agent.finish()
                    return 0
                # one step per TICK_DONE; in lockstep msg.tick == agent.tick
                nxt = agent.on_tick_done(agent.tick)
                if nxt is None:
                    return 0
                conn.send(pose_message(spec.body_id, agent.tick, nxt))
            elif isinstance(msg, P.Error):
                print(f"vehicle {spec.body_id}: server error [{msg.code}] {msg.text}", file=sys.stderr)
                if msg.code in (P.ErrorCode.BAD_POSE, P.ErrorCode.UNKNOWN_BODY):
                    continue
                return 3
            else:
                raise RunError(f"unexpected {type(msg).__name__} from server")
    except (OSError, ConnectionError, P.DecodeError, RunError) as exc:
        print(f"vehicle {spec.body_id}: connection lost: {exc}", file=sys.stderr)
        return 3
    finally:
        agent.close()
        conn.close()
