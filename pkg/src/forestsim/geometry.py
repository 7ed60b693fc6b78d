"""Rigid-body math shared by every module.

World frame is right-handed with z up. Body frames follow the
forward-left-up convention, so a camera looks along its own +x axis.
Quaternions are stored scalar-first (w, x, y, z).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

QUAT_TOLERANCE = 1e-6


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = math.sqrt(float(q @ q))
    if n == 0.0 or not math.isfinite(n):
        raise ValueError(f"cannot normalize quaternion {q!r}")
    return q / n


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=np.float64)


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix whose columns are the body axes in world coordinates."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    return q if q[0] >= 0.0 else -q


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    s = math.sin(angle / 2.0)
    return np.array([math.cos(angle / 2.0), axis[0] * s, axis[1] * s, axis[2] * s])


def quat_from_euler(roll: float = 0.0, pitch: float = 0.0, yaw: float = 0.0) -> np.ndarray:
    """Z-Y-X composition: yaw about z, then pitch about y, then roll about x.

    In the z-up/forward-left-up convention a positive pitch tips the nose down.
    """
    qz = quat_from_axis_angle((0, 0, 1), yaw)
    qy = quat_from_axis_angle((0, 1, 0), pitch)
    qx = quat_from_axis_angle((1, 0, 0), roll)
    return quat_mul(quat_mul(qz, qy), qx)


def quat_yaw(q) -> float:
    w, x, y, z = q
    return math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


def quat_slerp(a, b, t: float) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dot = float(a @ b)
    if dot < 0.0:
        b = -b
        dot = -dot
    if dot > 0.9995:
        return quat_normalize(a + t * (b - a))
    theta = math.acos(min(dot, 1.0))
    s = math.sin(theta)
    return (math.sin((1.0 - t) * theta) * a + math.sin(t * theta) * b) / s


def quat_log_rate(a, b, dt: float) -> np.ndarray:
    """Body-frame angular rate that carries orientation a to b in dt."""
    d = quat_mul(quat_conj(a), b)
    if d[0] < 0.0:
        d = -d
    v = d[1:]
    s = math.sqrt(float(v @ v))
    if s < 1e-15:
        return np.zeros(3)
    angle = 2.0 * math.atan2(s, d[0])
    return v / s * (angle / dt)


@dataclass(frozen=True)
class Pose6DOF:
    """Position in meters plus a unit orientation quaternion."""

    x: float
    y: float
    z: float
    qw: float = 1.0
    qx: float = 0.0
    qy: float = 0.0
    qz: float = 0.0

    @classmethod
    def from_arrays(cls, position, quat) -> "Pose6DOF":
        p = [float(v) for v in position]
        q = [float(v) for v in quat]
        return cls(p[0], p[1], p[2], q[0], q[1], q[2], q[3])

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def quat(self) -> np.ndarray:
        return np.array([self.qw, self.qx, self.qy, self.qz])

    def quat_error(self) -> float:
        return abs(math.sqrt(self.qw**2 + self.qx**2 + self.qy**2 + self.qz**2) - 1.0)

    def is_normalized(self, tol: float = QUAT_TOLERANCE) -> bool:
        return self.quat_error() <= tol

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_tuple())

    def as_tuple(self) -> tuple[float, ...]:
        return (self.x, self.y, self.z, self.qw, self.qx, self.qy, self.qz)

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def compose(self, other: "Pose6DOF") -> "Pose6DOF":
        """Pose of ``other`` (expressed in this frame) in this pose's parent frame."""
        pos = self.position + self.rotation() @ other.position
        q = quat_mul(self.quat, other.quat)
        return Pose6DOF.from_arrays(pos, q)


IDENTITY = Pose6DOF(0.0, 0.0, 0.0)
