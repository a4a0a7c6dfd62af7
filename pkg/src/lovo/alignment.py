"""Covariance-weighted alignment objective between consecutive scans.

For each current-scan point with a gated nearest neighbor in the previous
scan, the residual ``e = x_prev - T x_cur`` is scored by the negative
log-likelihood of a zero-mean Gaussian whose covariance pools both points'
covariances, ``S = C_prev + R C_cur R^T``:

    loss_p = 1/2 e^T S^-1 e + 1/2 log det S

The log-det term bounds every per-point loss from below, so the objective
cannot be gamed by inflating covariances to zero out residual weights.  A
scalar-confidence mode collapses each covariance to its mean eigenvalue,
``S = (s_prev + s_cur) I``, kept as an ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ._linalg import inv3, quadform
from .cloud_io import PointCloud
from .covariance import CovarianceField
from .errors import SingularSigmaError
from .geometry import Pose

_DET_FLOOR = 1e-18

# so(3) generators, used by the analytic gradient
_GEN = np.zeros((3, 3, 3))
_GEN[0, 1, 2], _GEN[0, 2, 1] = -1.0, 1.0
_GEN[1, 0, 2], _GEN[1, 2, 0] = 1.0, -1.0
_GEN[2, 0, 1], _GEN[2, 1, 0] = -1.0, 1.0


@dataclass(frozen=True)
class AlignmentEvaluation:
    total_loss: float
    per_point_loss: np.ndarray
    correspondence_count: int
    skipped_count: int
    mean_mahalanobis: float

    @property
    def matched_fraction(self) -> float:
        n = self.correspondence_count + self.skipped_count
        return self.correspondence_count / n if n else 0.0


def _pair_losses(e: np.ndarray, S: np.ndarray):
    Sinv, det = inv3(S)
    if det.size and float(det.min()) < _DET_FLOOR:
        raise SingularSigmaError(
            "pooled covariance determinant below 1e-18; covariance flooring is broken"
        )
    maha2 = quadform(e, Sinv)
    losses = 0.5 * maha2 + 0.5 * np.log(det)
    return losses, maha2


def _scalar_pair_losses(e: np.ndarray, s: np.ndarray):
    if s.size and float(s.min()) ** 3 < _DET_FLOOR:
        raise SingularSigmaError("scalar confidence collapsed to zero")
    maha2 = (e * e).sum(axis=1) / s
    losses = 0.5 * maha2 + 1.5 * np.log(s)
    return losses, maha2


def alignment_nll(
    cloud_t: PointCloud,
    cov_t: CovarianceField,
    cloud_prev: PointCloud,
    cov_prev: CovarianceField,
    pose: Pose,
    gate: float = 1.0,
    mode: str = "full",
    prev_tree: cKDTree | None = None,
    workers: int = 1,
) -> AlignmentEvaluation:
    """Score a candidate transform of the current scan against the previous one.

    Correspondences are recomputed for the given pose: each transformed point
    is matched to its nearest previous-scan point, matches beyond ``gate``
    meters are skipped and counted.
    """
    if gate <= 0:
        raise ValueError("gate must be positive")
    if len(cov_t) != len(cloud_t) or len(cov_prev) != len(cloud_prev):
        raise ValueError("covariance fields must align with their clouds")
    if prev_tree is None:
        prev_tree = cKDTree(cloud_prev.points)
    y = pose.apply(cloud_t.points)
    dists, idx = prev_tree.query(y, workers=workers)
    matched = dists <= gate
    idx = idx[matched]
    e = cloud_prev.points[idx] - y[matched]
    if mode == "scalar":
        s = cov_prev.scalar_variances()[idx] + cov_t.scalar_variances()[matched]
        losses, maha2 = _scalar_pair_losses(e, s)
    elif mode == "full":
        R = pose.rotation_matrix()
        S = cov_prev.matrices[idx] + R @ cov_t.matrices[matched] @ R.T
        losses, maha2 = _pair_losses(e, S)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    count = int(matched.sum())
    return AlignmentEvaluation(
        total_loss=float(losses.sum()),
        per_point_loss=losses,
        correspondence_count=count,
        skipped_count=len(cloud_t) - count,
        mean_mahalanobis=float(np.sqrt(maha2).mean()) if count else 0.0,
    )


@dataclass(frozen=True)
class FrozenPairs:
    """A fixed correspondence set, used by gradient checks."""

    source: np.ndarray         # (n,3) current-scan points
    target: np.ndarray         # (n,3) matched previous-scan points
    cov_source: np.ndarray     # (n,3,3)
    cov_target: np.ndarray     # (n,3,3)


def frozen_pairs_nll(pairs: FrozenPairs, pose: Pose) -> float:
    R = pose.rotation_matrix()
    e = pairs.target - (pairs.source @ R.T + pose.translation)
    S = pairs.cov_target + R @ pairs.cov_source @ R.T
    losses, _ = _pair_losses(e, S)
    return float(losses.sum())


def frozen_pairs_gradient(pairs: FrozenPairs, pose: Pose) -> np.ndarray:
    """Analytic gradient of the frozen-pair loss w.r.t. a left-applied twist.

    The twist is ``(rho, theta)``: the loss is differentiated at ``eps = 0``
    of ``pose' = exp(eps) o pose``.  Both the residual and the pooled
    covariance depend on the rotation, and both contributions are included.
    """
    R = pose.rotation_matrix()
    y = pairs.source @ R.T + pose.translation
    e = pairs.target - y
    M = R @ pairs.cov_source @ R.T
    S = pairs.cov_target + M
    Sinv, det = inv3(S)
    if det.size and float(det.min()) < _DET_FLOOR:
        raise SingularSigmaError("pooled covariance determinant below 1e-18")
    u = np.einsum("nij,nj->ni", Sinv, e)
    grad_rho = -u.sum(axis=0)
    # residual term: d e / d theta_k = -G_k y
    grad_theta = -np.cross(y, u).sum(axis=0)
    # covariance terms: dS/dtheta_k = G_k M + M G_k^T
    Mu = np.einsum("nij,nj->ni", M, u)
    grad_theta += np.cross(u, Mu).sum(axis=0)
    P = M @ Sinv
    grad_theta += np.array(
        [
            (P[:, 1, 2] - P[:, 2, 1]).sum(),
            (P[:, 2, 0] - P[:, 0, 2]).sum(),
            (P[:, 0, 1] - P[:, 1, 0]).sum(),
        ]
    )
    return np.concatenate([grad_rho, grad_theta])


def _perturbed(pose: Pose, eps: np.ndarray) -> Pose:
    """Left-apply a small twist (rho, theta) to a pose (first order exact)."""
    from .geometry import quat_from_axis_angle, quat_multiply, quat_normalize

    rho, theta = eps[:3], eps[3:]
    angle = float(np.linalg.norm(theta))
    if angle < 1e-300:
        dq = np.array([1.0, 0.0, 0.0, 0.0])
    else:
        dq = quat_from_axis_angle(theta / angle, angle)
    q = quat_normalize(quat_multiply(dq, pose.rotation))
    from .geometry import quat_to_matrix

    t = quat_to_matrix(dq) @ pose.translation + rho
    return Pose(q, t)


@dataclass(frozen=True)
class GradientCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_error: float


def gradient_check(pairs: FrozenPairs, pose: Pose, h: float = 1e-6) -> GradientCheckReport:
    """Compare the analytic twist gradient against central finite differences."""
    analytic = frozen_pairs_gradient(pairs, pose)
    numeric = np.zeros(6)
    for k in range(6):
        eps = np.zeros(6)
        eps[k] = h
        up = frozen_pairs_nll(pairs, _perturbed(pose, eps))
        eps[k] = -h
        dn = frozen_pairs_nll(pairs, _perturbed(pose, eps))
        numeric[k] = (up - dn) / (2.0 * h)
    scale = max(float(np.abs(numeric).max()), 1e-12)
    max_rel = float(np.abs(analytic - numeric).max() / scale)
    return GradientCheckReport(analytic, numeric, max_rel)
