"""Rigid-body pose math: right-handed frames, unit quaternions in (w, x, y, z) order."""

from __future__ import annotations

import numpy as np

UNIT_NORM_TOL = 1e-9


def _as_vec(v, n, name):
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.shape != (n,):
        raise ValueError(f"{name} must have {n} components, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite {name}: {a}")
    return a


def quat_normalize(q) -> np.ndarray:
    q = _as_vec(q, 4, "quaternion")
    n = float(np.linalg.norm(q))
    if n < 1e-12:
        raise ValueError("zero-norm quaternion")
    if abs(n - 1.0) <= UNIT_NORM_TOL:
        return q
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
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q, v) -> np.ndarray:
    """Rotate vector v by unit quaternion q."""
    w = q[0]
    u = np.asarray(q[1:4], dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    # v' = v + 2*u x (u x v + w*v)
    t = np.cross(u, np.cross(u, v) + w * v)
    return v + 2.0 * t


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = _as_vec(axis, 3, "axis")
    n = float(np.linalg.norm(axis))
    if n < 1e-12:
        raise ValueError("zero-norm rotation axis")
    half = 0.5 * float(angle)
    s = np.sin(half) / n
    return np.array([np.cos(half), axis[0] * s, axis[1] * s, axis[2] * s])


def quat_to_rotvec(q) -> np.ndarray:
    """Shortest rotation vector (angle * unit axis) for a unit quaternion."""
    q = np.asarray(q, dtype=np.float64)
    if q[0] < 0.0:
        q = -q
    w = min(1.0, max(-1.0, float(q[0])))
    s = float(np.linalg.norm(q[1:4]))
    if s < 1e-12:
        return np.zeros(3)
    angle = 2.0 * np.arctan2(s, w)
    return (angle / s) * q[1:4]


def quat_angle(q) -> float:
    """Rotation angle in [0, pi] represented by a unit quaternion."""
    w = abs(float(np.asarray(q, dtype=np.float64)[0]))
    return 2.0 * float(np.arccos(min(1.0, w)))


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


class Pose:
    """Position (m) plus unit orientation quaternion; the universal state currency.

    Construction normalizes the quaternion; the stored norm is within 1e-9 of 1.
    Instances are value-like: arrays are copied in and frozen.
    """

    __slots__ = ("position", "orientation")

    def __init__(self, position=(0.0, 0.0, 0.0), orientation=(1.0, 0.0, 0.0, 0.0)):
        p = _as_vec(position, 3, "position").copy()
        q = quat_normalize(orientation).copy()
        p.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", q)

    def __setattr__(self, name, value):
        raise AttributeError("Pose is immutable")

    def __copy__(self):
        return self

    def __deepcopy__(self, memo):
        return self

    def __reduce__(self):
        return (Pose, (np.asarray(self.position), np.asarray(self.orientation)))

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    def compose(self, other: "Pose") -> "Pose":
        """self * other: apply other in self's frame."""
        return Pose(
            self.position + quat_rotate(self.orientation, other.position),
            quat_mul(self.orientation, other.orientation),
        )

    def inverse(self) -> "Pose":
        qi = quat_conj(self.orientation)
        return Pose(-quat_rotate(qi, self.position), qi)

    def transform_point(self, p) -> np.ndarray:
        return self.position + quat_rotate(self.orientation, np.asarray(p, dtype=np.float64))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.position, other.position) and np.array_equal(
            self.orientation, other.orientation
        )

    def __hash__(self):
        return hash((self.position.tobytes(), self.orientation.tobytes()))

    def __repr__(self):
        p = ", ".join(f"{v:.6g}" for v in self.position)
        q = ", ".join(f"{v:.6g}" for v in self.orientation)
        return f"Pose(({p}), ({q}))"


def orientation_angle_between(qa, qb) -> float:
    """Angle of the relative rotation between two unit quaternions."""
    return quat_angle(quat_mul(qa, quat_conj(qb)))
