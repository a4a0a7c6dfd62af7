"""Trajectory drift metrics following the standard odometry benchmark protocol.

For every start frame and every segment length L in {100..800} m, the frame
where the ground-truth arc length first exceeds L defines a subsequence; its
relative-pose error contributes ``||t_err|| / L`` (percent) to the
translational drift and ``angle(R_err) / L`` (degrees per 100 m) to the
rotational drift.  Reported values average over all evaluated subsequences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud_io import Trajectory

SEGMENT_LENGTHS = tuple(range(100, 900, 100))


@dataclass(frozen=True)
class DriftReport:
    per_length: dict = field(default_factory=dict)   # L -> (t_rel %, r_rel deg/100m, count)
    t_rel: float = float("nan")
    r_rel: float = float("nan")
    subsequence_count: int = 0

    @property
    def empty(self) -> bool:
        return self.subsequence_count == 0

    def format_table(self) -> str:
        lines = ["length_m  t_rel_%  r_rel_deg_per_100m  count"]
        for L in sorted(self.per_length):
            t, r, c = self.per_length[L]
            lines.append(f"{L:8d}  {t:7.4f}  {r:18.4f}  {c:5d}")
        lines.append(f"average   {self.t_rel:7.4f}  {self.r_rel:18.4f}  {self.subsequence_count:5d}")
        return "\n".join(lines)


def _arc_lengths(traj: Trajectory) -> np.ndarray:
    pos = traj.positions()
    if len(pos) == 0:
        return np.zeros(0)
    steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _first_frame_beyond(dist: np.ndarray, start: int, length: float) -> int:
    beyond = np.flatnonzero(dist[start:] > dist[start] + length)
    return start + int(beyond[0]) if beyond.size else -1


def evaluate_drift(estimate: Trajectory, ground_truth: Trajectory) -> DriftReport:
    """Relative drift of an estimated trajectory against ground truth.

    Trajectories shorter than the smallest segment length produce an empty
    report (not an error).
    """
    if len(estimate) != len(ground_truth):
        raise ValueError("estimate and ground truth must have equal length")
    dist = _arc_lengths(ground_truth)
    est_mats = [p.matrix() for p in estimate.poses]
    gt_mats = [p.matrix() for p in ground_truth.poses]
    per_length: dict[int, list] = {L: [] for L in SEGMENT_LENGTHS}
    for first in range(len(ground_truth)):
        for L in SEGMENT_LENGTHS:
            last = _first_frame_beyond(dist, first, L)
            if last < 0:
                break
            rel_gt = np.linalg.inv(gt_mats[first]) @ gt_mats[last]
            rel_est = np.linalg.inv(est_mats[first]) @ est_mats[last]
            err = np.linalg.inv(rel_est) @ rel_gt
            t_err = float(np.linalg.norm(err[:3, 3]))
            cos = np.clip((np.trace(err[:3, :3]) - 1.0) * 0.5, -1.0, 1.0)
            r_err = float(np.degrees(np.arccos(cos)))
            per_length[L].append((100.0 * t_err / L, 100.0 * r_err / L))
    table = {}
    all_t, all_r = [], []
    for L, errs in per_length.items():
        if not errs:
            continue
        t = float(np.mean([e[0] for e in errs]))
        r = float(np.mean([e[1] for e in errs]))
        table[L] = (t, r, len(errs))
        all_t.extend(e[0] for e in errs)
        all_r.extend(e[1] for e in errs)
    if not all_t:
        return DriftReport()
    return DriftReport(
        per_length=table,
        t_rel=float(np.mean(all_t)),
        r_rel=float(np.mean(all_r)),
        subsequence_count=len(all_t),
    )
