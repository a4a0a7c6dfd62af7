"""Scan and trajectory I/O plus voxel-grid downsampling.

Supported formats:

* velodyne binary scans: little-endian float32 records ``(x, y, z, reflectance)``
* pose text files: 12 whitespace-separated reals per line (row-major 3x4)
* CSV trajectory export: ``frame,tx,ty,tz,qw,qx,qy,qz``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidLeafError
from .geometry import Pose, matrix_to_quat

@dataclass(frozen=True)
class PointCloud:
    """Immutable scan: (n,3) float64 points in the sensor frame, meters."""

    points: np.ndarray
    intensities: np.ndarray | None = None
    timestamp_index: int = 0
    dropped_count: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.intensities is not None:
            inten = np.asarray(self.intensities, dtype=np.float64).reshape(-1)
            if inten.shape[0] != pts.shape[0]:
                raise ValueError("intensities must align with points")
            object.__setattr__(self, "intensities", inten)

    def __len__(self) -> int:
        return self.points.shape[0]

    def transformed(self, pose: Pose) -> "PointCloud":
        return PointCloud(pose.apply(self.points), self.intensities, self.timestamp_index)


@dataclass
class Trajectory:
    """Ordered per-frame poses, expressed in the frame-0 coordinate system."""

    poses: list[Pose] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, i: int) -> Pose:
        return self.poses[i]

    def append(self, pose: Pose) -> None:
        self.poses.append(pose)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)


def load_scan_kitti(path) -> PointCloud:
    """Load a velodyne ``.bin`` scan; non-finite points are dropped and counted."""
    path = Path(path)
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4 != 0:
        raise FormatError(f"{path}: size {raw.size * 4} bytes is not a multiple of 16")
    recs = raw.reshape(-1, 4).astype(np.float64)
    finite = np.all(np.isfinite(recs), axis=1)
    dropped = int((~finite).sum())
    recs = recs[finite]
    return PointCloud(
        points=recs[:, :3],
        intensities=np.clip(recs[:, 3], 0.0, 1.0),
        dropped_count=dropped,
    )


def load_poses_kitti(path) -> Trajectory:
    """Parse a 3x4-per-line pose file into a trajectory.

    Rotation blocks whose determinant or orthonormality drift beyond 1e-6 are
    projected back to SO(3) via the polar factor of their SVD.
    """
    traj = Trajectory()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            vals = line.split()
            if len(vals) != 12:
                raise FormatError(f"{path}:{lineno}: expected 12 values, got {len(vals)}")
            try:
                m = np.array([float(v) for v in vals]).reshape(3, 4)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            R, t = m[:, :3], m[:, 3]
            needs_fix = abs(np.linalg.det(R) - 1.0) > 1e-6 or (
                np.abs(R.T @ R - np.eye(3)).max() > 1e-6
            )
            if needs_fix:
                U, _, Vt = np.linalg.svd(R)
                R = U @ Vt
                if np.linalg.det(R) < 0:
                    U[:, -1] *= -1.0
                    R = U @ Vt
            traj.append(Pose(matrix_to_quat(R), t))
    return traj


def write_trajectory_kitti(traj: Trajectory, path) -> None:
    """Write 12-value rows; precision chosen so a reload matches within 1e-9."""
    with open(path, "w") as fh:
        for pose in traj.poses:
            m = pose.matrix()[:3, :]
            fh.write(" ".join(f"{v:.12e}" for v in m.reshape(-1)) + "\n")


def write_trajectory_csv(traj: Trajectory, path) -> None:
    with open(path, "w") as fh:
        fh.write("frame,tx,ty,tz,qw,qx,qy,qz\n")
        for i, pose in enumerate(traj.poses):
            t, q = pose.translation, pose.rotation
            fh.write(
                f"{i},{t[0]:.12e},{t[1]:.12e},{t[2]:.12e},"
                f"{q[0]:.12e},{q[1]:.12e},{q[2]:.12e},{q[3]:.12e}\n"
            )


def load_trajectory_csv(path) -> Trajectory:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    traj = Trajectory()
    for row in data:
        traj.append(Pose(row[4:8] / np.linalg.norm(row[4:8]), row[1:4]))
    return traj


def voxel_keys(points: np.ndarray, leaf: np.ndarray) -> np.ndarray:
    """Integer grid index per point for a grid anchored at the origin."""
    return np.floor(points / leaf).astype(np.int64)


def voxel_downsample(cloud: PointCloud, leaf) -> PointCloud:
    """Replace each occupied voxel by the centroid of its member points.

    Output order is ascending voxel key (lexicographic), which makes the
    result independent of input ordering.
    """
    leaf = np.asarray(leaf, dtype=np.float64).reshape(3)
    if np.any(leaf <= 0):
        raise InvalidLeafError(f"leaf must be positive per axis, got {leaf}")
    if len(cloud) == 0:
        return PointCloud(np.zeros((0, 3)), timestamp_index=cloud.timestamp_index)
    keys = voxel_keys(cloud.points, leaf)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse, minlength=uniq.shape[0]).astype(np.float64)
    centroids = np.stack(
        [np.bincount(inverse, weights=cloud.points[:, a], minlength=uniq.shape[0]) for a in range(3)],
        axis=1,
    ) / counts[:, None]
    intensities = None
    if cloud.intensities is not None:
        intensities = np.bincount(inverse, weights=cloud.intensities, minlength=uniq.shape[0]) / counts
    return PointCloud(centroids, intensities, cloud.timestamp_index)


def crop_max_range(cloud: PointCloud, max_range: float | None) -> PointCloud:
    if max_range is None:
        return cloud
    keep = np.linalg.norm(cloud.points, axis=1) <= max_range
    return PointCloud(
        cloud.points[keep],
        None if cloud.intensities is None else cloud.intensities[keep],
        cloud.timestamp_index,
        cloud.dropped_count,
    )


def write_scan_kitti(cloud: PointCloud, path) -> None:
    """Write a velodyne-format ``.bin`` (inverse of :func:`load_scan_kitti`)."""
    n = len(cloud)
    recs = np.zeros((n, 4), dtype="<f4")
    recs[:, :3] = cloud.points.astype("<f4")
    if cloud.intensities is not None:
        recs[:, 3] = cloud.intensities.astype("<f4")
    recs.tofile(path)
