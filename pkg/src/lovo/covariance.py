"""Per-point 3x3 covariance estimation from neighborhood geometry.

Covariances are kept in eigen form (nonnegative eigenvalues + an eigenvector
rotation encoded as a unit quaternion), which guarantees positive
semi-definiteness by construction.  Eigenvalues are clamped to a configured
band: the floor keeps downstream inverses well conditioned, the ceiling marks
points that are unreliable in every direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud_io import PointCloud
from .errors import TooFewPointsError
from .geometry import Pose, matrices_to_quats, matrix_to_quat, quat_to_matrix

DEFAULT_LAMBDA_MIN = 1e-4
DEFAULT_LAMBDA_MAX = 1.0
DEFAULT_ISO_RADIUS = 2.0


@dataclass(frozen=True)
class PointCovariance:
    """Eigen-parameterized covariance: ascending eigenvalues (m^2) + basis quat."""

    eigenvalues: np.ndarray
    eigenbasis: np.ndarray

    def matrix(self) -> np.ndarray:
        Q = quat_to_matrix(self.eigenbasis)
        return Q @ np.diag(self.eigenvalues) @ Q.T

    @staticmethod
    def from_matrix(C: np.ndarray) -> "PointCovariance":
        lams, Q = np.linalg.eigh(np.asarray(C, dtype=np.float64))
        if np.linalg.det(Q) < 0:
            Q = Q.copy()
            Q[:, 0] *= -1.0
        return PointCovariance(np.maximum(lams, 0.0), matrix_to_quat(Q))


class CovarianceField:
    """Per-point covariances aligned with a cloud, stored as dense arrays."""

    def __init__(self, eigenvalues: np.ndarray, quats: np.ndarray):
        self.eigenvalues = np.asarray(eigenvalues, dtype=np.float64).reshape(-1, 3)
        self.quats = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
        if self.eigenvalues.shape[0] != self.quats.shape[0]:
            raise ValueError("eigenvalues and quaternions must align")
        self._matrices: np.ndarray | None = None

    def __len__(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def matrices(self) -> np.ndarray:
        if self._matrices is None:
            Q = _quats_to_matrices(self.quats)
            self._matrices = np.einsum("nij,nj,nkj->nik", Q, self.eigenvalues, Q)
        return self._matrices

    def point(self, i: int) -> PointCovariance:
        return PointCovariance(self.eigenvalues[i], self.quats[i])

    @staticmethod
    def from_matrices(C: np.ndarray, lam_floor: float = 0.0) -> "CovarianceField":
        C = np.asarray(C, dtype=np.float64).reshape(-1, 3, 3)
        lams, Q = np.linalg.eigh(C)
        neg = np.linalg.det(Q) < 0
        Q[neg, :, 0] *= -1.0
        field = CovarianceField(np.maximum(lams, lam_floor), matrices_to_quats(Q))
        return field

    @staticmethod
    def isotropic(n: int, sigma2: float) -> "CovarianceField":
        lams = np.full((n, 3), sigma2)
        quats = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1))
        return CovarianceField(lams, quats)

    def scalar_variances(self) -> np.ndarray:
        """Mean eigenvalue per point: the scalar-confidence degenerate form."""
        return self.eigenvalues.mean(axis=1)


def _quats_to_matrices(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - z * w)
    R[:, 0, 2] = 2 * (x * z + y * w)
    R[:, 1, 0] = 2 * (x * y + z * w)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - x * w)
    R[:, 2, 0] = 2 * (x * z - y * w)
    R[:, 2, 1] = 2 * (y * z + x * w)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def estimate_covariances(
    cloud: PointCloud,
    k: int = 16,
    lam_min: float = DEFAULT_LAMBDA_MIN,
    lam_max: float = DEFAULT_LAMBDA_MAX,
    iso_radius: float = DEFAULT_ISO_RADIUS,
    tree: cKDTree | None = None,
    workers: int = 1,
) -> CovarianceField:
    """Estimate a covariance per point from its k nearest neighbors.

    The empirical covariance of the k neighbors (excluding the point itself,
    (k-1) denominator) is eigen-decomposed and its eigenvalues clamped to
    ``[lam_min, lam_max]``.  Points whose k-th neighbor lies farther than
    ``iso_radius`` are treated as isolated and receive the isotropic maximum
    covariance.
    """
    if k < 4:
        raise ValueError("k must be at least 4")
    if lam_min > lam_max:
        raise ValueError("lam_min must not exceed lam_max")
    n = len(cloud)
    if n < k + 1:
        raise TooFewPointsError(f"need at least k+1={k + 1} points, got {n}")
    if tree is None:
        tree = cKDTree(cloud.points)
    dists, idx = tree.query(cloud.points, k=k + 1, workers=workers)
    nbrs = cloud.points[idx[:, 1:]]                       # (n,k,3)
    mean = nbrs.mean(axis=1, keepdims=True)
    centered = nbrs - mean
    C = np.einsum("nki,nkj->nij", centered, centered) / (k - 1)
    lams, Q = np.linalg.eigh(C)
    neg = np.linalg.det(Q) < 0
    Q[neg, :, 0] *= -1.0
    lams = np.clip(lams, lam_min, lam_max)
    isolated = dists[:, k] > iso_radius
    lams[isolated] = lam_max
    Q[isolated] = np.eye(3)
    return CovarianceField(lams, matrices_to_quats(Q))


def transform_covariance(cov: PointCovariance, pose: Pose) -> PointCovariance:
    """Rotate the eigenbasis by the pose rotation; translation has no effect."""
    from .geometry import quat_multiply, quat_normalize

    q = quat_normalize(quat_multiply(pose.rotation, cov.eigenbasis))
    return PointCovariance(cov.eigenvalues.copy(), q)


def rotate_field(field: CovarianceField, pose: Pose) -> CovarianceField:
    """Rotate every covariance in a field by the pose rotation."""
    qr = pose.rotation
    w1, x1, y1, z1 = qr
    w2, x2, y2, z2 = field.quats[:, 0], field.quats[:, 1], field.quats[:, 2], field.quats[:, 3]
    out = np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=1,
    )
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return CovarianceField(field.eigenvalues.copy(), out)


def dump_covariances_csv(cloud: PointCloud, field: CovarianceField, path) -> None:
    """Per-point ellipsoid dump for external visualization."""
    with open(path, "w") as fh:
        fh.write("x,y,z,lam1,lam2,lam3,qw,qx,qy,qz\n")
        for p, lams, q in zip(cloud.points, field.eigenvalues, field.quats):
            fh.write(
                f"{p[0]:.6f},{p[1]:.6f},{p[2]:.6f},"
                f"{lams[0]:.8e},{lams[1]:.8e},{lams[2]:.8e},"
                f"{q[0]:.8f},{q[1]:.8f},{q[2]:.8f},{q[3]:.8f}\n"
            )
