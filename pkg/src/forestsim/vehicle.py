"""Quadrotor stand-in for a SITL autopilot: point-mass dynamics, gusts, waypoint guidance."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Pose6DOF, matrix_to_quat, quat_log_rate, quat_normalize, quat_slerp, quat_to_matrix

GRAVITY = 9.81


@dataclass(frozen=True)
class VehicleParams:
    mass: float = 1.5
    c_d: float = 0.3  # linear drag, 1/s
    tau_att: float = 0.15
    capture_radius: float = 0.25
    kp_pos: float = 1.2
    kv: float = 3.0
    ki: float = 1.0
    max_tilt_deg: float = 35.0
    gravity: float = GRAVITY

    def __post_init__(self):
        if not self.mass > 0 or not self.tau_att > 0:
            raise ValueError("mass and tau_att must be > 0")
        if self.c_d < 0:
            raise ValueError("c_d must be >= 0")


@dataclass
class VehicleState:
    position: np.ndarray
    velocity: np.ndarray
    orientation: np.ndarray  # unit quaternion (w, x, y, z)
    angular_rate: np.ndarray
    time: float = 0.0

    @classmethod
    def at(cls, position, yaw: float = 0.0) -> "VehicleState":
        q = np.array([math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)])
        return cls(np.asarray(position, dtype=np.float64).copy(), np.zeros(3), q, np.zeros(3), 0.0)

    def pose(self) -> Pose6DOF:
        return Pose6DOF.from_arrays(self.position, self.orientation)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in (self.position, self.velocity, self.orientation, self.angular_rate)) and math.isfinite(self.time)


@dataclass(frozen=True)
class Command:
    thrust: float  # newtons along body z
    attitude: tuple[float, float, float, float]  # setpoint quaternion


def hover_command(params: VehicleParams, yaw: float = 0.0) -> Command:
    return Command(params.mass * params.gravity, (math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)))


def step_dynamics(state: VehicleState, command: Command, wind, dt: float, params: VehicleParams = VehicleParams()) -> VehicleState:
    """Advance one step.

    Attitude relaxes toward the setpoint with time constant ``tau_att``. The
    translational ODE ``dv/dt = f - c_d (v - wind)`` is integrated exactly for
    the step's constant thrust direction, so free fall and drag relaxation
    match their closed forms.
    """
    if not 0.0 < dt <= 0.1:
        raise ValueError(f"dt must be in (0, 0.1], got {dt}")
    wind = np.asarray(wind, dtype=np.float64)
    q_sp = np.asarray(command.attitude, dtype=np.float64)
    if not (math.isfinite(command.thrust) and np.all(np.isfinite(q_sp)) and np.all(np.isfinite(wind)) and state.is_finite()):
        raise ValueError("non-finite input to step_dynamics")
    if command.thrust < 0:
        raise ValueError("thrust must be >= 0")
    q_sp = quat_normalize(q_sp)

    alpha = -math.expm1(-dt / params.tau_att)
    q_new = quat_normalize(quat_slerp(state.orientation, q_sp, alpha))
    rate = quat_log_rate(state.orientation, q_new, dt)

    body_z = quat_to_matrix(q_new)[:, 2]
    f = (command.thrust / params.mass) * body_z
    f[2] -= params.gravity
    v0 = state.velocity
    c = params.c_d
    if c > 0.0:
        v_inf = wind + f / c
        decay = math.exp(-c * dt)
        frac = -math.expm1(-c * dt) / c
        v1 = v_inf + (v0 - v_inf) * decay
        p1 = state.position + v_inf * dt + (v0 - v_inf) * frac
    else:
        v1 = v0 + f * dt
        p1 = state.position + v0 * dt + 0.5 * f * dt * dt
    return VehicleState(p1, v1, q_new, rate, state.time + dt)


# ---------------------------------------------------------------------------
# gusts


@dataclass(frozen=True)
class GustState:
    mean_wind: tuple[float, float, float]
    turbulence_intensity: float  # per-axis stdev, m/s
    correlation_time: float
    gust: tuple[float, float, float]
    rng_state: dict = field(repr=False, compare=False)

    @property
    def output(self) -> np.ndarray:
        return np.asarray(self.mean_wind, dtype=np.float64) + np.asarray(self.gust)


def make_gust(mean_wind, turbulence_intensity: float, correlation_time: float, seed: int) -> GustState:
    """Gust process started from its stationary distribution."""
    if turbulence_intensity < 0 or not correlation_time > 0:
        raise ValueError("need turbulence_intensity >= 0 and correlation_time > 0")
    bitgen = np.random.PCG64(seed & 0xFFFFFFFFFFFFFFFF)
    rng = np.random.Generator(bitgen)
    g0 = turbulence_intensity * rng.standard_normal(3) if turbulence_intensity > 0 else np.zeros(3)
    return GustState(
        tuple(float(v) for v in mean_wind),
        float(turbulence_intensity),
        float(correlation_time),
        tuple(float(v) for v in g0),
        bitgen.state,
    )


def gust_sample(gust: GustState, dt: float) -> tuple[np.ndarray, GustState]:
    """One Ornstein-Uhlenbeck update per axis; returns (wind velocity, next state)."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    sigma = gust.turbulence_intensity
    if sigma == 0.0:
        return np.asarray(gust.mean_wind, dtype=np.float64), gust
    bitgen = np.random.PCG64()
    bitgen.state = gust.rng_state
    eta = np.random.Generator(bitgen).standard_normal(3)
    a = math.exp(-dt / gust.correlation_time)
    g = np.asarray(gust.gust) * a + sigma * math.sqrt(-math.expm1(-2.0 * dt / gust.correlation_time)) * eta
    nxt = replace(gust, gust=tuple(float(v) for v in g), rng_state=bitgen.state)
    return nxt.output, nxt


class GustProcess:
    """Stateful convenience wrapper used by the tick loops."""

    def __init__(self, mean_wind, turbulence_intensity: float, correlation_time: float, seed: int):
        self.state = make_gust(mean_wind, turbulence_intensity, correlation_time, seed)

    @property
    def current(self) -> np.ndarray:
        return self.state.output

    def step(self, dt: float) -> np.ndarray:
        out, self.state = gust_sample(self.state, dt)
        return out


# ---------------------------------------------------------------------------
# guidance


@dataclass(frozen=True)
class Waypoint:
    position: tuple[float, float, float]
    hold_time: float = 0.0
    speed: float = 1.0

    def __post_init__(self):
        if not self.speed > 0:
            raise ValueError("waypoint speed must be > 0")
        if self.hold_time < 0:
            raise ValueError("hold_time must be >= 0")


def attitude_for(accel, yaw: float, params: VehicleParams) -> Command:
    """Thrust magnitude and attitude that realize a desired world acceleration."""
    g = params.gravity
    a = np.asarray(accel, dtype=np.float64).copy()
    a[2] = max(a[2] + g, 0.2 * g)
    horiz = math.hypot(a[0], a[1])
    max_h = a[2] * math.tan(math.radians(params.max_tilt_deg))
    if horiz > max_h:
        a[0] *= max_h / horiz
        a[1] *= max_h / horiz
    thrust_vec = params.mass * a
    thrust = float(np.linalg.norm(thrust_vec))
    zb = thrust_vec / thrust
    xc = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    yb = np.cross(zb, xc)
    yb /= np.linalg.norm(yb)
    xb = np.cross(yb, zb)
    q = matrix_to_quat(np.column_stack([xb, yb, zb]))
    return Command(thrust, tuple(float(v) for v in q))


class WaypointGuidance:
    """Cascaded position/velocity controller that walks a waypoint plan.

    A waypoint is captured once the vehicle is within ``capture_radius``; the
    controller then holds it for ``hold_time`` before moving on. After the last
    hold the plan is complete and the vehicle keeps station there.
    """

    def __init__(self, plan: list[Waypoint], params: VehicleParams = VehicleParams(), yaw: float = 0.0):
        if not plan:
            raise ValueError("plan must be non-empty")
        self.plan = list(plan)
        self.params = params
        self.yaw = yaw
        self.index = 0
        self.captured = False
        self.held = 0.0
        self.complete = False
        self.integral = np.zeros(3)

    @property
    def target(self) -> Waypoint:
        return self.plan[self.index]

    def __call__(self, state: VehicleState, dt: float) -> Command:
        p = self.params
        wp = self.target
        err = np.asarray(wp.position, dtype=np.float64) - state.position
        if not self.captured and np.linalg.norm(err) <= p.capture_radius:
            self.captured = True
            self.held = 0.0
        elif self.captured and not self.complete:
            self.held += dt
            if self.held >= wp.hold_time - 1e-12:
                if self.index + 1 < len(self.plan):
                    self.index += 1
                    self.captured = False
                    wp = self.target
                    err = np.asarray(wp.position, dtype=np.float64) - state.position
                else:
                    self.complete = True
        v_des = p.kp_pos * err
        n = np.linalg.norm(v_des)
        if n > wp.speed:
            v_des *= wp.speed / n
        v_err = v_des - state.velocity
        self.integral += v_err * dt
        lim = 3.0 / max(p.ki, 1e-9)
        n = np.linalg.norm(self.integral)
        if n > lim:
            self.integral *= lim / n
        accel = p.kv * v_err + p.ki * self.integral + p.c_d * state.velocity
        return attitude_for(accel, self.yaw, p)


def guidance(state: VehicleState, plan: list[Waypoint], params: VehicleParams = VehicleParams(), dt: float = 1 / 30) -> Command:
    """Single-shot command toward the first waypoint of ``plan``."""
    return WaypointGuidance(plan, params, yaw=_yaw_of(state))(state, dt)


def _yaw_of(state: VehicleState) -> float:
    w, x, y, z = state.orientation
    return math.atan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
