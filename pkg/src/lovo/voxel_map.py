"""Uncertainty-aware global voxel map with information-form Bayes fusion.

Each occupied voxel stores a fused position and 3x3 covariance.  New
observations either seed empty voxels or are fused into existing ones in
information (inverse-covariance) form:

    C_new = (C_old^-1 + C_obs^-1)^-1
    x_new = C_new (C_old^-1 x_old + C_obs^-1 x_obs)

Voxel membership is decided by the incoming point's grid cell; observations
of one scan that land in a shared cell are pooled in information form, which
matches point-by-point sequential fusion up to float round-off because the
update is associative and commutative.  The writer replaces voxel records
instead of mutating them, so snapshots are plain dictionary copies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ._linalg import inv3
from .cloud_io import PointCloud
from .covariance import CovarianceField
from .errors import SingularCovarianceError
from .geometry import Pose

_Key = tuple[int, int, int]


@dataclass(frozen=True)
class MapVoxel:
    position: np.ndarray       # fused coordinate, map frame (m)
    covariance: np.ndarray     # fused 3x3 covariance
    hit_count: int
    last_update: int


@dataclass(frozen=True)
class UpdateSummary:
    created: int
    fused: int


class VoxelMapSnapshot:
    """Read-only view of the map at one frame counter.

    ``query_neighbors`` serves the spec'd radius interface; the scan-to-map
    solver uses the lazily built arrays + KD-tree instead.
    """

    def __init__(self, leaf: float, voxels: dict[_Key, MapVoxel], frame_counter: int):
        self.leaf = leaf
        self.voxels = voxels
        self.frame_counter = frame_counter
        self._arrays = None

    def __len__(self) -> int:
        return len(self.voxels)

    def query_neighbors(self, point, radius: float) -> list[MapVoxel]:
        """All voxels whose fused position lies within ``radius`` of ``point``.

        Scans the cube of cells covering the radius around the query point's
        cell; fused positions stay inside their own cell (membership is decided
        by cell), so the cube is sufficient.  Results come back in ascending
        key order.
        """
        if radius <= 0:
            raise ValueError("radius must be positive")
        point = np.asarray(point, dtype=np.float64)
        center = np.floor(point / self.leaf).astype(np.int64)
        reach = int(np.ceil(radius / self.leaf))
        out = []
        for kx in range(center[0] - reach, center[0] + reach + 1):
            for ky in range(center[1] - reach, center[1] + reach + 1):
                for kz in range(center[2] - reach, center[2] + reach + 1):
                    vox = self.voxels.get((kx, ky, kz))
                    if vox is not None and np.linalg.norm(vox.position - point) <= radius:
                        out.append(vox)
        return out

    def solver_arrays(self):
        """(positions, covariances, information weights) as dense arrays."""
        if self._arrays is None:
            keys = sorted(self.voxels)
            if keys:
                pos = np.array([self.voxels[k].position for k in keys])
                cov = np.array([self.voxels[k].covariance for k in keys])
                cov_inv, det = inv3(cov)
                info = np.einsum("nii->n", cov_inv) / 3.0
            else:
                pos = np.zeros((0, 3))
                cov = np.zeros((0, 3, 3))
                info = np.zeros(0)
            tree = cKDTree(pos) if len(keys) else None
            self._arrays = (pos, cov, info, tree)
        return self._arrays


class VoxelMap:
    """Single-writer fused map; readers go through :meth:`snapshot`."""

    def __init__(self, leaf: float = 0.8, stale_after: int | None = None):
        if leaf <= 0:
            raise ValueError("leaf must be positive")
        self.leaf = float(leaf)
        self.stale_after = stale_after
        self.voxels: dict[_Key, MapVoxel] = {}
        self.frame_counter = 0

    def __len__(self) -> int:
        return len(self.voxels)

    def snapshot(self) -> VoxelMapSnapshot:
        return VoxelMapSnapshot(self.leaf, dict(self.voxels), self.frame_counter)

    def integrate_scan(
        self, cloud: PointCloud, covs: CovarianceField, pose: Pose
    ) -> UpdateSummary:
        """Transform a scan into the map frame and fuse it voxel by voxel."""
        if len(covs) != len(cloud):
            raise ValueError("covariance field must align with the cloud")
        frame = self.frame_counter
        self.frame_counter += 1
        if len(cloud) == 0:
            return UpdateSummary(0, 0)
        R = pose.rotation_matrix()
        pts = pose.apply(cloud.points)
        C = R @ covs.matrices @ R.T
        info, det = inv3(C)
        if float(det.min()) <= 0.0:
            raise SingularCovarianceError("incoming point covariance not invertible")
        info_x = np.einsum("nij,nj->ni", info, pts)

        keys = np.floor(pts / self.leaf).astype(np.int64)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        k = uniq.shape[0]
        counts = np.bincount(inverse, minlength=k)
        info_sum = np.zeros((k, 3, 3))
        for a in range(3):
            for b in range(3):
                info_sum[:, a, b] = np.bincount(inverse, weights=info[:, a, b], minlength=k)
        ix_sum = np.stack(
            [np.bincount(inverse, weights=info_x[:, c], minlength=k) for c in range(3)], axis=1
        )

        key_tuples = [tuple(int(v) for v in row) for row in uniq]
        old = [self.voxels.get(kt) for kt in key_tuples]
        existing = np.array([o is not None for o in old])
        created = int((~existing).sum())
        fused = int(len(cloud) - created)

        # single fresh observation seeds a voxel with its own state, exactly
        single_new = (~existing) & (counts == 1)
        lam = info_sum.copy()
        b_vec = ix_sum.copy()
        if existing.any():
            old_cov = np.array([o.covariance for o, e in zip(old, existing) if e])
            old_pos = np.array([o.position for o, e in zip(old, existing) if e])
            prior_info, prior_det = inv3(old_cov)
            if float(prior_det.min()) <= 0.0:
                raise SingularCovarianceError("stored voxel covariance not invertible")
            lam[existing] += prior_info
            b_vec[existing] += np.einsum("nij,nj->ni", prior_info, old_pos)
        new_cov, lam_det = inv3(lam)
        new_cov = 0.5 * (new_cov + new_cov.transpose(0, 2, 1))
        new_pos = np.einsum("nij,nj->ni", new_cov, b_vec)

        first_member = np.zeros(k, dtype=np.int64)
        first_member[inverse[::-1]] = np.arange(len(cloud) - 1, -1, -1)
        for g, kt in enumerate(key_tuples):
            if single_new[g]:
                p = first_member[g]
                self.voxels[kt] = MapVoxel(pts[p].copy(), C[p].copy(), 1, frame)
            else:
                prev = old[g]
                hits = int(counts[g]) + (prev.hit_count if prev is not None else 0)
                self.voxels[kt] = MapVoxel(new_pos[g], new_cov[g], hits, frame)

        if self.stale_after is not None:
            cutoff = frame - self.stale_after
            stale = [kt for kt, v in self.voxels.items() if v.last_update < cutoff]
            for kt in stale:
                del self.voxels[kt]
        return UpdateSummary(created, fused)


def export_map_csv(snapshot: VoxelMapSnapshot, path) -> None:
    """Dump voxels as (key, position, eigenvalues, basis quaternion, hits)."""
    from .geometry import matrices_to_quats

    keys = sorted(snapshot.voxels)
    with open(path, "w") as fh:
        fh.write("kx,ky,kz,x,y,z,lam1,lam2,lam3,qw,qx,qy,qz,hits\n")
        if not keys:
            return
        cov = np.array([snapshot.voxels[k].covariance for k in keys])
        lams, Q = np.linalg.eigh(cov)
        neg = np.linalg.det(Q) < 0
        Q[neg, :, 0] *= -1.0
        quats = matrices_to_quats(Q)
        for i, key in enumerate(keys):
            v = snapshot.voxels[key]
            p = v.position
            fh.write(
                f"{key[0]},{key[1]},{key[2]},{p[0]:.6f},{p[1]:.6f},{p[2]:.6f},"
                f"{lams[i, 0]:.8e},{lams[i, 1]:.8e},{lams[i, 2]:.8e},"
                f"{quats[i, 0]:.8f},{quats[i, 1]:.8f},{quats[i, 2]:.8f},{quats[i, 3]:.8f},"
                f"{v.hit_count}\n"
            )
