"""Rigid-transform algebra on SE(3).

Quaternions are scalar-first ``(w, x, y, z)`` everywhere in this package.
A :class:`Pose` maps points from its source frame into its target frame via
``x' = R x + t``.  The unit-frame conversion expresses a whole-scan transform
in the self-centered frame of a sub-region whose origin sits at offset ``v``
from the sensor origin.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ZeroNormError

_QUAT_NORM_TOL = 1e-9


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = float(np.linalg.norm(q))
    if n < 1e-12:
        raise ZeroNormError("quaternion norm below 1e-12")
    return q / n


def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product q1 * q2 (both scalar-first)."""
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to scalar-first unit quaternion (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


def matrices_to_quats(R: np.ndarray) -> np.ndarray:
    """Batched rotation-matrix to quaternion conversion, shape (n,3,3) -> (n,4)."""
    R = np.asarray(R, dtype=np.float64)
    n = R.shape[0]
    q = np.empty((n, 4))
    tr = R[:, 0, 0] + R[:, 1, 1] + R[:, 2, 2]
    diag = np.stack([R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]], axis=1)
    # branch per matrix on the largest of (trace, R00, R11, R22)
    choice = np.where(tr > diag.max(axis=1), -1, diag.argmax(axis=1))
    m = choice == -1
    if m.any():
        s = np.sqrt(tr[m] + 1.0) * 2.0
        q[m, 0] = 0.25 * s
        q[m, 1] = (R[m, 2, 1] - R[m, 1, 2]) / s
        q[m, 2] = (R[m, 0, 2] - R[m, 2, 0]) / s
        q[m, 3] = (R[m, 1, 0] - R[m, 0, 1]) / s
    for axis, (i, j, k) in enumerate([(0, 1, 2), (1, 2, 0), (2, 0, 1)]):
        m = choice == axis
        if not m.any():
            continue
        s = np.sqrt(1.0 + R[m, i, i] - R[m, j, j] - R[m, k, k]) * 2.0
        q[m, 0] = (R[m, k, j] - R[m, j, k]) / s
        q[m, 1 + i] = 0.25 * s
        q[m, 1 + j] = (R[m, j, i] + R[m, i, j]) / s
        q[m, 1 + k] = (R[m, k, i] + R[m, i, k]) / s
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_rotation_angle(q: np.ndarray) -> float:
    """Rotation angle in radians, in [0, pi]."""
    w = min(abs(float(q[0])), 1.0)
    return 2.0 * float(np.arccos(w))


@dataclass(frozen=True)
class Pose:
    """Rigid SE(3) transform: scalar-first unit quaternion + translation (m)."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if q.shape != (4,) or t.shape != (3,):
            raise ValueError("Pose expects rotation (4,) and translation (3,)")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValueError("Pose components must be finite")
        if abs(float(np.linalg.norm(q)) - 1.0) > _QUAT_NORM_TOL:
            raise ValueError("Pose rotation must be a unit quaternion within 1e-9")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_rotation_matrix(R: np.ndarray, t: np.ndarray) -> "Pose":
        return Pose(matrix_to_quat(R), np.asarray(t, dtype=np.float64))

    @staticmethod
    def from_axis_angle(axis, angle: float, t=(0.0, 0.0, 0.0)) -> "Pose":
        return Pose(quat_from_axis_angle(np.asarray(axis, float), angle), np.asarray(t, float))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix()
        T[:3, 3] = self.translation
        return T

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (n,3) array (or a single 3-vector) of points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation_matrix().T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """Return self * other (apply ``other`` first)."""
        q = quat_normalize(quat_multiply(self.rotation, other.rotation))
        t = self.apply(other.translation)
        return Pose(q, t)

    def inverse(self) -> "Pose":
        q_inv = quat_conjugate(self.rotation)
        R_inv = quat_to_matrix(q_inv)
        return Pose(q_inv, -(R_inv @ self.translation))

    def rotation_angle_to(self, other: "Pose") -> float:
        """Geodesic rotation distance to ``other`` in radians."""
        dq = quat_multiply(quat_conjugate(self.rotation), other.rotation)
        return quat_rotation_angle(dq)

    def translation_distance_to(self, other: "Pose") -> float:
        return float(np.linalg.norm(self.translation - other.translation))


def translate(v: np.ndarray) -> Pose:
    """Pure translation pose."""
    return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.asarray(v, dtype=np.float64))


def to_unit_frame(T: Pose, v: np.ndarray) -> Pose:
    """Express a sensor-frame transform in the frame of a unit offset by ``v``.

    The rotation is carried over unchanged; the translation becomes
    ``t + R v - v``.  Equivalent to conjugating ``T`` with the pure
    translation ``v``: translate(-v) o T o translate(v).
    """
    v = np.asarray(v, dtype=np.float64)
    R = T.rotation_matrix()
    t_unit = T.translation + R @ v - v
    return Pose(T.rotation.copy(), t_unit)


def from_unit_frame(T_unit: Pose, v: np.ndarray) -> Pose:
    """Exact inverse of :func:`to_unit_frame`."""
    v = np.asarray(v, dtype=np.float64)
    R = T_unit.rotation_matrix()
    t = T_unit.translation - R @ v + v
    return Pose(T_unit.rotation.copy(), t)


def average_rotations(quats, weights) -> np.ndarray:
    """Weighted chordal mean of unit quaternions.

    All inputs are sign-aligned to the first quaternion (q and -q encode the
    same rotation), arithmetically averaged with the given weights, and the
    result renormalized.  Valid for rotation sets clustered well away from
    antipodal spread, which is the regime of consecutive-scan ego-motion.

    Raises
    ------
    ZeroNormError
        If the weighted mean cancels to norm below 1e-12.
    """
    Q = np.atleast_2d(np.asarray(quats, dtype=np.float64))
    w = np.asarray(weights, dtype=np.float64)
    if Q.shape[0] == 0:
        raise ZeroNormError("cannot average an empty set of rotations")
    if Q.shape[0] != w.shape[0]:
        raise ValueError("quats and weights must be aligned")
    if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-9:
        raise ValueError("weights must be nonnegative and sum to 1")
    signs = np.where(Q @ Q[0] < 0.0, -1.0, 1.0)
    mean = (w[:, None] * signs[:, None] * Q).sum(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < 1e-12:
        raise ZeroNormError("weighted quaternion mean cancelled to zero norm")
    return mean / norm
