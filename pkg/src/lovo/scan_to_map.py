"""Scan-to-map pose refinement restricted to representative structures.

Keypoints are extracted only inside units whose voting-weight product clears
the percentile gate, then matched against the fused voxel map: low-curvature
keypoints accrue point-to-plane residuals against planes fit to nearby map
voxels, high-curvature ones point-to-line residuals against fitted lines.
Map-side fits are weighted by the voxels' inverse covariances (scalar
information weights), and the pose is solved by damped Gauss-Newton on a
body-frame twist with Huber robustification and eigenvalue-gated projection
of unobservable update directions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud_io import PointCloud
from .errors import EmptyListError
from .geometry import Pose, quat_from_axis_angle
from .registration import UnitTransform
from .units import UnitGrid
from .voting import VotingWeights
from .voxel_map import VoxelMapSnapshot

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Scan2MapParams:
    percentile: float = 60.0
    curvature_neighbors: int = 12
    planar_per_unit: int = 4
    edge_per_unit: int = 2
    curvature_planar_max: float = 0.01
    curvature_edge_min: float = 0.04
    assoc_radius: float = 2.0
    assoc_neighbors: int = 12
    min_plane_voxels: int = 5
    min_line_voxels: int = 3
    huber_delta: float = 0.1
    max_iterations: int = 10
    tol_translation: float = 1e-4
    tol_rotation: float = 1e-4
    eps_degenerate: float = 10.0
    cov_weighting: bool = True
    workers: int = 1


@dataclass(frozen=True)
class KeypointSet:
    planar_indices: np.ndarray
    planar_normals: np.ndarray       # local plane normal per keypoint (scan frame)
    planar_offsets: np.ndarray       # plane offset d in n.x = d
    planar_units: list
    edge_indices: np.ndarray
    edge_directions: np.ndarray      # local line direction per keypoint
    edge_points: np.ndarray          # a point on the local line
    edge_units: list

    def __len__(self) -> int:
        return len(self.planar_indices) + len(self.edge_indices)


@dataclass(frozen=True)
class RefinementResult:
    pose: Pose
    iterations: int
    final_cost: float
    inlier_fraction: float
    degenerate_flag: bool


def select_representative_units(
    w: VotingWeights, units: list[UnitTransform], percentile: float = 60.0
) -> set:
    """Unit keys whose weight product strictly exceeds the percentile gate.

    The threshold is the linear-interpolation percentile of the products; an
    all-ties input therefore yields the empty set and callers fall back to
    all units.
    """
    if not units:
        raise EmptyListError("cannot select from an empty unit list")
    products = w.w_rot * w.w_tr
    tau = np.percentile(products, percentile)
    return {u.unit_key for u, p in zip(units, products) if p > tau}


def point_curvatures(
    points: np.ndarray, k: int, tree: cKDTree | None = None, workers: int = 1
) -> np.ndarray:
    """Normalized neighborhood-asymmetry curvature per point.

    c = ||sum_j (x_j - x)|| / (k ||x||): near zero inside smooth surfaces,
    large at surface borders and dihedral edges.
    """
    if tree is None:
        tree = cKDTree(points)
    k_eff = min(k, len(points) - 1)
    _, idx = tree.query(points, k=k_eff + 1, workers=workers)
    nbrs = points[idx[:, 1:]]
    offsets = (nbrs - points[:, None, :]).sum(axis=1)
    ranges = np.maximum(np.linalg.norm(points, axis=1), 1e-9)
    return np.linalg.norm(offsets, axis=1) / (k_eff * ranges)


def extract_keypoints(
    cloud: PointCloud,
    grid: UnitGrid,
    selected: set,
    params: Scan2MapParams = Scan2MapParams(),
    tree: cKDTree | None = None,
) -> KeypointSet:
    """Pick planar/edge keypoints inside the selected units, capped per unit."""
    if not selected:
        log.warning("representative gate selected no units; falling back to all units")
        selected = set(grid.units)
    if tree is None:
        tree = cKDTree(cloud.points)
    curvature = point_curvatures(cloud.points, params.curvature_neighbors, tree, params.workers)
    planar_idx, planar_unit = [], []
    edge_idx, edge_unit = [], []
    for key in sorted(selected):
        unit = grid.units.get(key)
        if unit is None:
            continue
        members = unit.point_indices
        c = curvature[members]
        order = np.argsort(c, kind="stable")
        flat = [int(members[i]) for i in order if c[i] < params.curvature_planar_max]
        for i in flat[: params.planar_per_unit]:
            planar_idx.append(i)
            planar_unit.append(key)
        sharp = [int(members[i]) for i in order[::-1] if c[i] > params.curvature_edge_min]
        for i in sharp[: params.edge_per_unit]:
            edge_idx.append(i)
            edge_unit.append(key)

    def local_fits(indices):
        if not indices:
            return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3))
        k_eff = min(params.curvature_neighbors, len(cloud) - 1)
        _, idx = tree.query(cloud.points[indices], k=k_eff + 1, workers=params.workers)
        nbrs = cloud.points[idx]
        mean = nbrs.mean(axis=1)
        centered = nbrs - mean[:, None, :]
        cov = np.einsum("nki,nkj->nij", centered, centered) / max(k_eff, 1)
        _, Q = np.linalg.eigh(cov)
        return Q[:, :, 0], Q[:, :, 2], mean  # normals, principal dirs, centroids

    normals, _, means_p = local_fits(planar_idx)
    _, directions, _ = local_fits(edge_idx)
    offsets = np.einsum("ni,ni->n", normals, means_p) if planar_idx else np.zeros(0)
    return KeypointSet(
        planar_indices=np.array(planar_idx, dtype=np.int64),
        planar_normals=normals,
        planar_offsets=offsets,
        planar_units=planar_unit,
        edge_indices=np.array(edge_idx, dtype=np.int64),
        edge_directions=directions,
        edge_points=cloud.points[edge_idx] if edge_idx else np.zeros((0, 3)),
        edge_units=edge_unit,
    )


def _weighted_pca(nbr_pos: np.ndarray, nbr_w: np.ndarray):
    """Batched weighted PCA over neighbor sets; returns normals, dirs, centers."""
    wsum = nbr_w.sum(axis=1)
    c = (nbr_pos * nbr_w[:, :, None]).sum(axis=1) / wsum[:, None]
    d = nbr_pos - c[:, None, :]
    scat = np.einsum("nk,nki,nkj->nij", nbr_w, d, d)
    _, Q = np.linalg.eigh(scat)
    return Q[:, :, 0], Q[:, :, 2], c


def _skew(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def _huber_weights(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def _huber_cost(r: np.ndarray, delta: float) -> float:
    a = np.abs(r)
    return float(np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta)).sum())


def _small_pose(step: np.ndarray) -> Pose:
    angle = float(np.linalg.norm(step[3:]))
    if angle > 0:
        dq = quat_from_axis_angle(step[3:] / angle, angle)
    else:
        dq = np.array([1.0, 0.0, 0.0, 0.0])
    return Pose(dq, step[:3])


class _FitContext:
    """Map-side plane/line fits for one Gauss-Newton iteration."""

    def __init__(self):
        self.plane_mask = None
        self.plane_normals = None
        self.plane_centers = None
        self.edge_mask = None
        self.edge_projs = None
        self.edge_centers = None

    def residuals(self, pose: Pose, xp: np.ndarray, xe: np.ndarray):
        R = pose.rotation_matrix()
        parts = []
        if self.plane_mask is not None and self.plane_mask.any():
            y = xp[self.plane_mask] @ R.T + pose.translation
            parts.append(np.einsum("ni,ni->n", self.plane_normals, y - self.plane_centers))
        if self.edge_mask is not None and self.edge_mask.any():
            y = xe[self.edge_mask] @ R.T + pose.translation
            parts.append(
                np.einsum("nij,nj->ni", self.edge_projs, y - self.edge_centers).reshape(-1)
            )
        return np.concatenate(parts) if parts else np.zeros(0)

    def jacobian(self, pose: Pose, xp: np.ndarray, xe: np.ndarray) -> np.ndarray:
        R = pose.rotation_matrix()
        parts = []
        if self.plane_mask is not None and self.plane_mask.any():
            x = xp[self.plane_mask]
            nR = self.plane_normals @ R
            parts.append(
                np.concatenate([nR, -np.einsum("ni,nij->nj", nR, _skew(x))], axis=1)
            )
        if self.edge_mask is not None and self.edge_mask.any():
            x = xe[self.edge_mask]
            Jfull = np.concatenate(
                [np.broadcast_to(R, (len(x), 3, 3)), -R @ _skew(x)], axis=2
            )
            parts.append((self.edge_projs @ Jfull).reshape(-1, 6))
        return np.concatenate(parts, axis=0) if parts else np.zeros((0, 6))


def _associate_fits(
    pose: Pose,
    xp: np.ndarray,
    xe: np.ndarray,
    pos: np.ndarray,
    weights_v: np.ndarray,
    tree: cKDTree,
    params: Scan2MapParams,
) -> _FitContext:
    ctx = _FitContext()
    R = pose.rotation_matrix()

    def neighbor_fit(x, min_voxels):
        y = x @ R.T + pose.translation
        dist, idx = tree.query(
            y,
            k=min(params.assoc_neighbors, len(pos)),
            distance_upper_bound=params.assoc_radius,
            workers=params.workers,
        )
        dist = dist.reshape(len(x), -1)
        idx = idx.reshape(len(x), -1)
        valid = np.isfinite(dist)
        mask = valid.sum(axis=1) >= min_voxels
        if not mask.any():
            return mask, None, None
        idx_safe = np.where(valid, idx, 0)
        nbr_pos = pos[idx_safe[mask]]
        nbr_w = (weights_v[idx_safe] * valid)[mask]
        normals, dirs, centers = _weighted_pca(nbr_pos, nbr_w)
        return mask, (normals, dirs), centers

    if len(xp):
        mask, fit, centers = neighbor_fit(xp, params.min_plane_voxels)
        ctx.plane_mask = mask
        if fit is not None:
            ctx.plane_normals, _ = fit
            ctx.plane_centers = centers
    if len(xe):
        mask, fit, centers = neighbor_fit(xe, params.min_line_voxels)
        ctx.edge_mask = mask
        if fit is not None:
            _, dirs = fit
            ctx.edge_projs = np.eye(3) - dirs[:, :, None] * dirs[:, None, :]
            ctx.edge_centers = centers
    return ctx


def refine_scan_to_map(
    T_init: Pose,
    cloud: PointCloud,
    keypoints: KeypointSet,
    snapshot: VoxelMapSnapshot,
    params: Scan2MapParams = Scan2MapParams(),
) -> RefinementResult:
    """Damped Gauss-Newton alignment of keypoints against the voxel map.

    Perturbations are right-applied (body-frame twist), so lever arms stay at
    sensor scale regardless of where the trajectory has wandered.  Update
    directions whose normal-matrix eigenvalue falls below ``eps_degenerate``
    are projected out and the result is flagged degenerate.  When no keypoint
    finds enough map voxels the initial pose is returned, flagged degenerate.
    """
    pos, _, info, tree = snapshot.solver_arrays()
    if tree is None or len(keypoints) == 0:
        return RefinementResult(T_init, 0, 0.0, 0.0, True)
    weights_v = info if params.cov_weighting else np.ones_like(info)
    xp = cloud.points[keypoints.planar_indices]
    xe = cloud.points[keypoints.edge_indices]
    pose = T_init
    degenerate = False
    cost = 0.0
    matched = 0.0
    mu = 0.0
    n_iter = 0
    for n_iter in range(1, params.max_iterations + 1):
        ctx = _associate_fits(pose, xp, xe, pos, weights_v, tree, params)
        res = ctx.residuals(pose, xp, xe)
        if res.size == 0:
            return RefinementResult(pose, n_iter, cost, 0.0, True)
        n_plane = int(ctx.plane_mask.sum()) if ctx.plane_mask is not None else 0
        n_edge = int(ctx.edge_mask.sum()) if ctx.edge_mask is not None else 0
        matched = (n_plane + n_edge) / max(len(keypoints), 1)
        J = ctx.jacobian(pose, xp, xe)
        hw = _huber_weights(res, params.huber_delta)
        cost = _huber_cost(res, params.huber_delta)
        A = (J * hw[:, None]).T @ J
        b = -(J * hw[:, None]).T @ res

        accepted = False
        step = np.zeros(6)
        for _ in range(5):
            lam, Q = np.linalg.eigh(A + mu * np.eye(6))
            observable = lam >= params.eps_degenerate
            if not observable.all():
                degenerate = True
            if not observable.any():
                break
            inv_lam = np.where(observable, 1.0 / np.maximum(lam, 1e-300), 0.0)
            step = Q @ (inv_lam * (Q.T @ b))
            cand = pose.compose(_small_pose(step))
            new_cost = _huber_cost(ctx.residuals(cand, xp, xe), params.huber_delta)
            if new_cost <= cost:
                pose = cand
                cost = new_cost
                accepted = True
                mu = mu / 10.0 if mu > 1e-6 else 0.0
                break
            mu = 10.0 * mu if mu > 0 else 1e-2
        if not accepted:
            break
        if (
            np.linalg.norm(step[:3]) < params.tol_translation
            and np.linalg.norm(step[3:]) < params.tol_rotation
        ):
            break
    return RefinementResult(pose, n_iter, cost, matched, degenerate)
