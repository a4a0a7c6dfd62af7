"""Per-unit rigid registration between consecutive scans.

Every geometric unit is registered independently against the whole previous
scan with gated point-to-point ICP (closed-form cross-covariance SVD solve
per iteration).  All units advance together through a batched driver: one
nearest-neighbor query per iteration covers every active unit, and the
per-unit solves run as stacked 3x3 SVDs.  Results are expressed in each
unit's self-centered frame, together with the reliability statistics the
voter consumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud_io import PointCloud
from .errors import EmptyTargetError, TooFewPointsError
from .geometry import Pose, matrices_to_quats, to_unit_frame
from .units import GeometricUnit, UnitGrid

_MIN_INLIERS = 6
_SVD_RANK_TOL = 1e-9


@dataclass(frozen=True)
class IcpParams:
    gate: float = 1.0
    max_iterations: int = 8
    min_points: int = 10
    tol_translation: float = 1e-4
    tol_rotation: float = 1e-4
    workers: int = 1


@dataclass(frozen=True)
class UnitTransform:
    """Rigid transform of one unit in its self-centered frame, plus reliability."""

    unit_key: tuple[int, int, int]
    pose_unit_frame: Pose
    mean_residual: float
    inlier_count: int
    hessian_cond: float
    converged: bool


@dataclass
class _GroupState:
    rots: np.ndarray        # (g,3,3)
    trans: np.ndarray       # (g,3)
    active: np.ndarray      # (g,) bool, still iterating
    failed: np.ndarray      # (g,) bool, degenerate / starved


def _segment_sum(values: np.ndarray, gid: np.ndarray, n: int) -> np.ndarray:
    """Column-wise bincount for (m,d) values grouped by gid."""
    if values.ndim == 1:
        return np.bincount(gid, weights=values, minlength=n)
    flat = [np.bincount(gid, weights=values[:, c], minlength=n) for c in range(values.shape[1])]
    return np.stack(flat, axis=1)


def _kabsch_batch(H: np.ndarray):
    """Stacked closed-form rotation solves from cross-covariances.

    Returns rotations plus a degeneracy mask (reflective or rank-deficient
    cross-covariance, where the rotation is not uniquely determined).
    """
    U, S, Vt = np.linalg.svd(H)
    det = np.linalg.det(np.transpose(Vt, (0, 2, 1)) @ np.transpose(U, (0, 2, 1)))
    flip = np.ones_like(S)
    flip[:, 2] = np.sign(det)
    R = np.transpose(Vt, (0, 2, 1)) @ (flip[:, :, None] * np.transpose(U, (0, 2, 1)))
    degenerate = (det < 0) | (S[:, 2] <= _SVD_RANK_TOL * np.maximum(S[:, 0], 1e-300))
    return R, degenerate


def _rotation_deltas(R_new: np.ndarray, R_old: np.ndarray) -> np.ndarray:
    tr = np.einsum("nij,nij->n", R_new, R_old)
    cos = np.clip((tr - 1.0) * 0.5, -1.0, 1.0)
    return np.arccos(cos)


def _icp_groups(
    src: np.ndarray,
    gid: np.ndarray,
    n_groups: int,
    target: np.ndarray,
    tree: cKDTree,
    init: Pose,
    params: IcpParams,
    run_full_iterations: bool = False,
):
    """Batched gated point-to-point ICP over point groups sharing one target.

    Returns final rotations/translations, per-group stats (mean residual,
    inlier count, Gauss-Newton condition number) and failure flags.
    """
    R0 = init.rotation_matrix()
    state = _GroupState(
        rots=np.tile(R0, (n_groups, 1, 1)),
        trans=np.tile(init.translation, (n_groups, 1)),
        active=np.ones(n_groups, dtype=bool),
        failed=np.zeros(n_groups, dtype=bool),
    )
    for _ in range(params.max_iterations):
        if not state.active.any():
            break
        pmask = state.active[gid]
        x = src[pmask]
        g = gid[pmask]
        y = np.einsum("nij,nj->ni", state.rots[g], x) + state.trans[g]
        dists, idx = tree.query(y, workers=params.workers)
        inlier = dists <= params.gate
        x, g, m = x[inlier], g[inlier], target[idx[inlier]]
        cnt = np.bincount(g, minlength=n_groups)
        starved = state.active & (cnt < _MIN_INLIERS)
        state.failed |= starved
        state.active &= ~starved
        solvable = state.active[g]
        x, g, m = x[solvable], g[solvable], m[solvable]
        if x.shape[0] == 0:
            break
        cntf = np.maximum(cnt, 1).astype(np.float64)
        cx = _segment_sum(x, g, n_groups) / cntf[:, None]
        cm = _segment_sum(m, g, n_groups) / cntf[:, None]
        xc = x - cx[g]
        mc = m - cm[g]
        H = np.empty((n_groups, 3, 3))
        for a in range(3):
            for b in range(3):
                H[:, a, b] = np.bincount(g, weights=xc[:, a] * mc[:, b], minlength=n_groups)
        live = np.flatnonzero(state.active)
        R_new, degen = _kabsch_batch(H[live])
        t_new = cm[live] - np.einsum("nij,nj->ni", R_new, cx[live])
        rot_delta = _rotation_deltas(R_new, state.rots[live])
        tr_delta = np.linalg.norm(t_new - state.trans[live], axis=1)
        state.rots[live] = R_new
        state.trans[live] = t_new
        bad = np.zeros(n_groups, dtype=bool)
        bad[live] = degen
        state.failed |= bad
        state.active[live[degen]] = False
        if not run_full_iterations:
            done = (rot_delta < params.tol_rotation) & (tr_delta < params.tol_translation)
            state.active[live[done & ~degen]] = False

    # final association for reliability statistics
    y = np.einsum("nij,nj->ni", state.rots[gid], src) + state.trans[gid]
    dists, idx = tree.query(y, workers=params.workers)
    inlier = dists <= params.gate
    g_in = gid[inlier]
    cnt = np.bincount(g_in, minlength=n_groups)
    res_sum = np.bincount(g_in, weights=dists[inlier], minlength=n_groups)
    mean_res = np.where(cnt > 0, res_sum / np.maximum(cnt, 1), np.inf)
    state.failed |= cnt < _MIN_INLIERS

    # 6x6 Gauss-Newton normal matrix per group, jacobian rows [I | -[y]x]
    y_in = y[inlier]
    A = np.zeros((n_groups, 6, 6))
    A[:, 0, 0] = A[:, 1, 1] = A[:, 2, 2] = cnt
    sy = _segment_sum(y_in, g_in, n_groups)
    skew_sum = np.zeros((n_groups, 3, 3))
    skew_sum[:, 0, 1], skew_sum[:, 0, 2] = -sy[:, 2], sy[:, 1]
    skew_sum[:, 1, 0], skew_sum[:, 1, 2] = sy[:, 2], -sy[:, 0]
    skew_sum[:, 2, 0], skew_sum[:, 2, 1] = -sy[:, 1], sy[:, 0]
    A[:, :3, 3:] = skew_sum
    A[:, 3:, :3] = skew_sum.transpose(0, 2, 1)
    norm2 = np.bincount(g_in, weights=(y_in * y_in).sum(axis=1), minlength=n_groups)
    yyt = np.empty((n_groups, 3, 3))
    for a in range(3):
        for b in range(3):
            yyt[:, a, b] = np.bincount(g_in, weights=y_in[:, a] * y_in[:, b], minlength=n_groups)
    A[:, 3:, 3:] = norm2[:, None, None] * np.eye(3) - yyt
    eig = np.linalg.eigvalsh(A)
    cond = np.where(
        eig[:, 0] > 0, eig[:, -1] / np.maximum(eig[:, 0], 1e-300), np.inf
    )
    cond = np.maximum(cond, 1.0)
    return state.rots, state.trans, mean_res, cnt, cond, state.failed


def estimate_all_units(
    grid: UnitGrid,
    cloud: PointCloud,
    prev_cloud: PointCloud,
    init: Pose,
    params: IcpParams = IcpParams(),
    prev_tree: cKDTree | None = None,
) -> list[UnitTransform]:
    """Register every unit with at least ``min_points`` points, in key order."""
    if len(prev_cloud) == 0:
        raise EmptyTargetError("previous scan is empty")
    units = [u for u in grid.sorted_units() if u.point_count >= params.min_points]
    if not units:
        return []
    if prev_tree is None:
        prev_tree = cKDTree(prev_cloud.points)
    gid = np.concatenate(
        [np.full(u.point_count, i, dtype=np.int64) for i, u in enumerate(units)]
    )
    src = cloud.points[np.concatenate([u.point_indices for u in units])]
    rots, trans, mean_res, cnt, cond, failed = _icp_groups(
        src, gid, len(units), prev_cloud.points, prev_tree, init, params
    )
    quats = matrices_to_quats(rots)
    out = []
    for i, u in enumerate(units):
        sensor_pose = Pose(quats[i], trans[i])
        out.append(
            UnitTransform(
                unit_key=u.unit_key,
                pose_unit_frame=to_unit_frame(sensor_pose, u.offset_v),
                mean_residual=float(mean_res[i]),
                inlier_count=int(cnt[i]),
                hessian_cond=float(cond[i]),
                converged=not bool(failed[i]),
            )
        )
    return out


def estimate_unit_transform(
    unit: GeometricUnit,
    cloud: PointCloud,
    prev_cloud: PointCloud,
    init: Pose,
    params: IcpParams = IcpParams(),
    prev_tree: cKDTree | None = None,
) -> UnitTransform:
    """Register a single unit; see :func:`estimate_all_units`."""
    if unit.point_count < params.min_points:
        raise TooFewPointsError(
            f"unit {unit.unit_key} has {unit.point_count} points, need {params.min_points}"
        )
    if len(prev_cloud) == 0:
        raise EmptyTargetError("previous scan is empty")
    if prev_tree is None:
        prev_tree = cKDTree(prev_cloud.points)
    gid = np.zeros(unit.point_count, dtype=np.int64)
    src = cloud.points[unit.point_indices]
    rots, trans, mean_res, cnt, cond, failed = _icp_groups(
        src, gid, 1, prev_cloud.points, prev_tree, init, params
    )
    sensor_pose = Pose(matrices_to_quats(rots)[0], trans[0])
    return UnitTransform(
        unit_key=unit.unit_key,
        pose_unit_frame=to_unit_frame(sensor_pose, unit.offset_v),
        mean_residual=float(mean_res[0]),
        inlier_count=int(cnt[0]),
        hessian_cond=float(cond[0]),
        converged=not bool(failed[0]),
    )


def icp_point_to_point(
    cloud: PointCloud,
    prev_cloud: PointCloud,
    init: Pose,
    n_iter: int,
    gate: float = 1.0,
    prev_tree: cKDTree | None = None,
    workers: int = 1,
) -> Pose:
    """Whole-scan gated point-to-point ICP for a fixed iteration budget."""
    if len(prev_cloud) == 0:
        raise EmptyTargetError("previous scan is empty")
    if n_iter < 1:
        raise ValueError("n_iter must be at least 1")
    if prev_tree is None:
        prev_tree = cKDTree(prev_cloud.points)
    params = IcpParams(gate=gate, max_iterations=n_iter, workers=workers)
    gid = np.zeros(len(cloud), dtype=np.int64)
    rots, trans, _, _, _, failed = _icp_groups(
        cloud.points, gid, 1, prev_cloud.points, prev_tree, init, params,
        run_full_iterations=True,
    )
    if failed[0]:
        return init
    return Pose(matrices_to_quats(rots)[0], trans[0])
