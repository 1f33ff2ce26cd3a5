"""Rigid transforms, quaternion algebra and the piecewise vehicle trajectory.

Quaternions are stored as ``(w, x, y, z)`` numpy arrays. A transform
``T_ab`` maps points expressed in frame ``b`` into frame ``a``:
``p_a = R_ab @ p_b + t_ab``.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

_SMALL_ANGLE = 1e-12


class OutOfRangeError(ValueError):
    """Raised when a trajectory is queried outside of its knot span."""


# ---------------------------------------------------------------------------
# quaternion / SO(3) helpers
# ---------------------------------------------------------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    return q / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
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


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the representative with ``w >= 0``."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0.0:
        q = -q
    return quat_normalize(q)


def hat(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def exp_so3(omega: Sequence[float]) -> np.ndarray:
    """Axis-angle vector (radians) to unit quaternion."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    if theta < _SMALL_ANGLE:
        # first-order Taylor branch
        return quat_normalize(np.concatenate([[1.0], 0.5 * omega]))
    half = 0.5 * theta
    return np.concatenate([[math.cos(half)], math.sin(half) / theta * omega])


def log_so3(q: np.ndarray) -> np.ndarray:
    """Unit quaternion to axis-angle vector with angle in ``[0, pi]``."""
    q = quat_normalize(q)
    if q[0] < 0.0:
        q = -q
    v = q[1:]
    s = float(np.linalg.norm(v))
    if s < _SMALL_ANGLE:
        return 2.0 * v
    theta = 2.0 * math.atan2(s, q[0])
    return theta / s * v


def rotation_angle(q: np.ndarray) -> float:
    """Geodesic angle (radians) of the rotation represented by ``q``."""
    q = quat_normalize(q)
    return 2.0 * math.atan2(float(np.linalg.norm(q[1:])), abs(float(q[0])))


def so3_exp_matrix(omega: Sequence[float]) -> np.ndarray:
    return quat_to_matrix(exp_so3(omega))


def right_jacobian_so3(omega: Sequence[float]) -> np.ndarray:
    """``Exp(w + dw) ~= Exp(w) Exp(J_r(w) dw)``."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    W = hat(omega)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * W + W @ W / 6.0
    a = (1.0 - math.cos(theta)) / theta**2
    b = (theta - math.sin(theta)) / theta**3
    return np.eye(3) - a * W + b * (W @ W)


# ---------------------------------------------------------------------------
# rigid transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        q = quat_normalize(np.asarray(self.rotation, dtype=np.float64).reshape(4))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(matrix_to_quat(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_rt(cls, rot: np.ndarray, trans: Sequence[float]) -> "RigidTransform":
        return cls(matrix_to_quat(rot), trans)

    @classmethod
    def from_rotvec(cls, omega: Sequence[float], trans: Sequence[float] = (0, 0, 0)) -> "RigidTransform":
        return cls(exp_so3(omega), trans)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        qi = quat_conj(self.rotation)
        return RigidTransform(qi, -quat_to_matrix(qi) @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def to_dict(self) -> dict:
        return {"rotation": [float(v) for v in self.rotation], "translation": [float(v) for v in self.translation]}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.array(d["rotation"], dtype=float), np.array(d["translation"], dtype=float))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a @ b``: applies ``b`` first, then ``a``."""
    q = quat_normalize(quat_mul(a.rotation, b.rotation))
    return RigidTransform(q, a.R @ b.translation + a.translation)


def pose_error(a: RigidTransform, b: RigidTransform) -> tuple[float, float]:
    """Geodesic rotation error in degrees and translation error in centimeters."""
    rel = quat_mul(quat_conj(a.rotation), b.rotation)
    rot_deg = math.degrees(rotation_angle(rel))
    trans_cm = 100.0 * float(np.linalg.norm(a.translation - b.translation))
    return rot_deg, trans_cm


# ---------------------------------------------------------------------------
# trajectory
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoseDerivative:
    """Pose and its time derivative at one instant.

    ``velocity`` is the world-frame linear velocity of the translation and
    ``angular_velocity`` the body-frame rate, so ``dR/dt = R @ hat(angular_velocity)``.
    """

    pose: RigidTransform
    velocity: np.ndarray
    angular_velocity: np.ndarray


class Trajectory:
    """Time-sorted pose knots, interpolated linearly (translation) and by
    shortest-arc SLERP (rotation)."""

    def __init__(self, times: Iterable[float], poses: Iterable[RigidTransform]):
        times = np.asarray(list(times), dtype=np.float64)
        poses = list(poses)
        if len(times) != len(poses):
            raise ValueError("times and poses must have equal length")
        if len(times) < 2:
            raise ValueError("a trajectory needs at least 2 knots")
        if not np.all(np.diff(times) > 0):
            raise ValueError("knot timestamps must be strictly increasing")
        self.times = times
        self.times.setflags(write=False)
        self.poses = tuple(poses)
        self._times_list = times.tolist()
        self._R = [p.R for p in self.poses]
        # per-segment body rotation increment, sign-fixed for the shortest arc
        self._seg_rotvec = []
        for p0, p1 in zip(self.poses[:-1], self.poses[1:]):
            rel = quat_mul(quat_conj(p0.rotation), p1.rotation)
            if rel[0] < 0.0:
                rel = -rel
            self._seg_rotvec.append(log_so3(rel))

    @property
    def start(self) -> float:
        return float(self.times[0])

    @property
    def end(self) -> float:
        return float(self.times[-1])

    def __len__(self) -> int:
        return len(self.times)

    def _segment(self, t: float) -> int:
        if not (self.start <= t <= self.end) or not math.isfinite(t):
            raise OutOfRangeError(f"t={t} outside trajectory span [{self.start}, {self.end}]")
        i = bisect.bisect_right(self._times_list, t) - 1
        return min(i, len(self.times) - 2)

    def interpolate(self, t: float) -> RigidTransform:
        return self.interpolate_with_derivative(t).pose

    def interpolate_with_derivative(self, t: float) -> PoseDerivative:
        """Pose at ``t`` plus its right-hand time derivative (left-hand at the last knot)."""
        t = float(t)
        i = self._segment(t)
        t0, t1 = self._times_list[i], self._times_list[i + 1]
        dt = t1 - t0
        p0, p1 = self.poses[i], self.poses[i + 1]
        phi = self._seg_rotvec[i]
        velocity = (p1.translation - p0.translation) / dt
        angular = phi / dt
        if t == t0:
            pose = p0
        elif t == t1:
            pose = p1
        else:
            s = (t - t0) / dt
            q = quat_normalize(quat_mul(p0.rotation, exp_so3(s * phi)))
            pose = RigidTransform(q, (1.0 - s) * p0.translation + s * p1.translation)
        return PoseDerivative(pose, velocity, angular)


def interpolate_pose(traj: Trajectory, t: float) -> RigidTransform:
    return traj.interpolate(t)


def sensor_pose(
    traj: Trajectory, t_frame: float, delta: float, extrinsic: RigidTransform
) -> RigidTransform:
    """World pose of a sensor whose frame is stamped ``t_frame`` on its own clock."""
    return compose(traj.interpolate(t_frame + delta), extrinsic)


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
