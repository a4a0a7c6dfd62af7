"""Ego-motion voting: per-unit transforms merged into one whole-scan pose.

Per-unit reliability statistics seed selection scores, a temperature softmax
turns scores into voting weights, and the voted pose is the weighted
quaternion mean of unit rotations plus the weighted sum of unit translations
(each unit transform converted back to the sensor frame first).  Scores are
then improved per frame pair by coordinate ascent against the alignment NLL,
and the voted pose gets a fixed-budget whole-scan ICP polish.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ._linalg import inv3, quadform
from .cloud_io import PointCloud
from .covariance import CovarianceField
from .errors import EmptyListError
from .geometry import Pose, average_rotations, from_unit_frame
from .registration import UnitTransform, icp_point_to_point

refine_pose_icp = icp_point_to_point
"""Whole-scan incomplete-ICP polish of a voted pose (fixed iteration budget)."""


@dataclass(frozen=True)
class SelectionScores:
    l_rot: np.ndarray
    l_tr: np.ndarray


@dataclass(frozen=True)
class VotingWeights:
    w_rot: np.ndarray
    w_tr: np.ndarray


@dataclass(frozen=True)
class ScoreCoefficients:
    """Linear scoring rule mapping registration statistics to selection scores."""

    residual_weight: float = 4.0
    condition_weight: float = 0.5
    inlier_weight: float = 0.25


def initial_scores(
    units: list[UnitTransform], coeffs: ScoreCoefficients = ScoreCoefficients()
) -> SelectionScores:
    """Score units by registration quality; non-converged units score -inf.

    Rotation and translation share the same seed; refinement may diverge them.
    """
    if not units:
        raise EmptyListError("cannot score an empty unit list")
    l = np.empty(len(units))
    for i, u in enumerate(units):
        if not u.converged:
            l[i] = -np.inf
            continue
        l[i] = (
            -coeffs.residual_weight * u.mean_residual
            - coeffs.condition_weight * np.log10(u.hessian_cond)
            + coeffs.inlier_weight * np.log1p(u.inlier_count)
        )
    return SelectionScores(l.copy(), l.copy())


def _softmax(l: np.ndarray, gamma: float) -> np.ndarray:
    finite = np.isfinite(l)
    if not finite.any():
        return np.full(l.shape, 1.0 / l.shape[0])
    z = np.where(finite, l / gamma, -np.inf)
    z = z - z[finite].max()
    w = np.exp(z)
    return w / w.sum()


def normalize_scores(scores: SelectionScores, gamma: float = 1.0) -> VotingWeights:
    """Temperature softmax over units; gamma=1 is the standard softmax."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return VotingWeights(_softmax(scores.l_rot, gamma), _softmax(scores.l_tr, gamma))


def vote_ego_motion(units: list[UnitTransform], offsets, w: VotingWeights) -> Pose:
    """Weighted average of unit transforms, expressed in the sensor frame.

    Units carrying exactly zero weight are excluded before averaging, so they
    cannot influence the result even at the bit level.
    """
    if not units:
        raise EmptyListError("cannot vote over an empty unit list")
    if len(offsets) != len(units) or w.w_rot.shape[0] != len(units):
        raise ValueError("units, offsets and weights must be aligned")
    sensor_poses = [from_unit_frame(u.pose_unit_frame, v) for u, v in zip(units, offsets)]
    rot_idx = np.flatnonzero(w.w_rot > 0.0)
    tr_idx = np.flatnonzero(w.w_tr > 0.0)
    if rot_idx.size == 0 or tr_idx.size == 0:
        raise EmptyListError("all voting weights are zero")
    quats = np.array([sensor_poses[i].rotation for i in rot_idx])
    q = average_rotations(quats, w.w_rot[rot_idx])
    t = np.zeros(3)
    for i in tr_idx:
        t = t + w.w_tr[i] * sensor_poses[i].translation
    return Pose(q, t)


class PoseScorer:
    """Alignment-NLL evaluator for the many candidate poses of score ascent.

    Works on a fixed evaluation subset of the current scan.  By default each
    evaluation re-picks the nearest neighbor among a small per-point candidate
    set gathered from the previous scan at the round's base pose (the
    candidate poses differ from the base by sub-millimeter nudges, so the
    true nearest neighbor is in the set in all but pathological cases); pass
    ``exact=True`` to query the full tree on every evaluation instead.
    """

    def __init__(
        self,
        src_points: np.ndarray,
        src_covs: np.ndarray,
        src_scalars: np.ndarray,
        tgt_points: np.ndarray,
        tgt_covs: np.ndarray,
        tgt_scalars: np.ndarray,
        tree: cKDTree,
        gate: float,
        mode: str = "full",
        candidates: int = 4,
        exact: bool = False,
        workers: int = 1,
    ):
        self.src = src_points
        self.src_covs = src_covs
        self.src_scalars = src_scalars
        self.tgt = tgt_points
        self.tgt_covs = tgt_covs
        self.tgt_scalars = tgt_scalars
        self.tree = tree
        self.gate = gate
        self.mode = mode
        self.m = max(1, min(candidates, tgt_points.shape[0]))
        self.exact = exact
        self.workers = workers
        self._cand_idx: np.ndarray | None = None

    @staticmethod
    def build(
        cloud_t: PointCloud,
        cov_t: CovarianceField,
        cloud_prev: PointCloud,
        cov_prev: CovarianceField,
        tree: cKDTree,
        gate: float,
        mode: str = "full",
        max_points: int = 512,
        candidates: int = 4,
        exact: bool = False,
        workers: int = 1,
    ) -> "PoseScorer":
        """Deterministic strided subsample of the current scan as eval points."""
        n = len(cloud_t)
        step = max(1, n // max_points) if max_points else 1
        sel = np.arange(0, n, step)
        return PoseScorer(
            cloud_t.points[sel],
            cov_t.matrices[sel],
            cov_t.scalar_variances()[sel],
            cloud_prev.points,
            cov_prev.matrices,
            cov_prev.scalar_variances(),
            tree,
            gate,
            mode=mode,
            candidates=candidates,
            exact=exact,
            workers=workers,
        )

    def refresh(self, pose: Pose) -> None:
        """Regather per-point candidate sets at a new base pose."""
        if self.exact:
            return
        y = pose.apply(self.src)
        _, idx = self.tree.query(y, k=self.m, workers=self.workers)
        self._cand_idx = idx.reshape(len(self.src), self.m)

    def loss(self, pose: Pose) -> float:
        y = pose.apply(self.src)
        if self.exact:
            d, j = self.tree.query(y, workers=self.workers)
        else:
            if self._cand_idx is None:
                self.refresh(pose)
            cand = self.tgt[self._cand_idx]                      # (n,m,3)
            d2 = ((cand - y[:, None, :]) ** 2).sum(axis=2)
            pick = d2.argmin(axis=1)
            rows = np.arange(len(self.src))
            j = self._cand_idx[rows, pick]
            d = np.sqrt(d2[rows, pick])
        matched = d <= self.gate
        if not matched.any():
            return 0.0
        e = self.tgt[j[matched]] - y[matched]
        if self.mode == "scalar":
            s = self.tgt_scalars[j[matched]] + self.src_scalars[matched]
            return float((0.5 * (e * e).sum(axis=1) / s + 1.5 * np.log(s)).sum())
        R = pose.rotation_matrix()
        S = self.tgt_covs[j[matched]] + R @ self.src_covs[matched] @ R.T
        Sinv, det = inv3(S)
        return float((0.5 * quadform(e, Sinv) + 0.5 * np.log(det)).sum())


def refine_weights(
    scores: SelectionScores,
    units: list[UnitTransform],
    offsets,
    scorer: PoseScorer,
    gamma: float = 1.0,
    n_steps: int = 2,
    delta: float = 0.5,
) -> tuple[SelectionScores, Pose]:
    """Coordinate ascent on selection scores against the alignment NLL.

    For each round, every unit's rotation then translation score is nudged by
    +/-delta (units in input order, which the batch estimator keeps sorted by
    unit key); a nudge survives only if the NLL of the re-voted pose strictly
    decreases, so the evaluated loss never increases.  Candidate neighbor
    sets are refreshed at the start of every round.
    """
    l_rot = scores.l_rot.astype(np.float64).copy()
    l_tr = scores.l_tr.astype(np.float64).copy()
    weights = normalize_scores(SelectionScores(l_rot, l_tr), gamma)
    pose = vote_ego_motion(units, offsets, weights)
    if n_steps <= 0:
        return SelectionScores(l_rot, l_tr), pose
    for _ in range(n_steps):
        scorer.refresh(pose)
        current = scorer.loss(pose)
        for i in range(len(units)):
            for arr in (l_rot, l_tr):
                if not np.isfinite(arr[i]):
                    continue
                base = arr[i]
                best_val, best_step, best_pose = current, 0.0, pose
                for step in (delta, -delta):
                    arr[i] = base + step
                    w = normalize_scores(SelectionScores(l_rot, l_tr), gamma)
                    cand = vote_ego_motion(units, offsets, w)
                    val = scorer.loss(cand)
                    if val < best_val:
                        best_val, best_step, best_pose = val, step, cand
                arr[i] = base + best_step
                assert best_val <= current
                current, pose = best_val, best_pose
    return SelectionScores(l_rot, l_tr), pose
