"""Pinhole cameras, rigid transforms and occlusion-aware pixel-point matching."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

Z_NEAR = 1e-4
DEFAULT_DEPTH_TOL = 0.05


class GeometryError(ValueError):
    pass


def check_rigid(transform: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    t = np.asarray(transform, dtype=np.float64)
    if t.shape != (4, 4):
        raise GeometryError(f"rigid transform must be 4x4, got {t.shape}")
    rot = t[:3, :3]
    if not np.allclose(rot @ rot.T, np.eye(3), atol=tol, rtol=0):
        raise GeometryError("rotation block is not orthonormal")
    if abs(np.linalg.det(rot) - 1.0) > tol:
        raise GeometryError("rotation block has determinant != 1")
    if not np.array_equal(t[3], [0.0, 0.0, 0.0, 1.0]):
        raise GeometryError("last row of a rigid transform must be [0, 0, 0, 1]")
    return t


def rigid_inverse(transform: np.ndarray) -> np.ndarray:
    t = np.asarray(transform, dtype=np.float64)
    inv = np.eye(4)
    inv[:3, :3] = t[:3, :3].T
    inv[:3, 3] = -t[:3, :3].T @ t[:3, 3]
    return inv


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    t = np.eye(4)
    t[:2, :2] = [[c, -s], [s, c]]
    return t


def apply_rigid(points: np.ndarray, transform: np.ndarray) -> np.ndarray:
    """Apply a 4x4 transform to (N, 3) points with explicit elementwise arithmetic.

    Written out per component (no BLAS) so that a single point and a batch
    containing it produce bit-identical coordinates.
    """
    p = np.asarray(points, dtype=np.float64)
    t = np.asarray(transform, dtype=np.float64)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    out = np.empty_like(p)
    for r in range(3):
        out[:, r] = t[r, 0] * x + t[r, 1] * y + t[r, 2] * z + t[r, 3]
    return out


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.colors) != len(self.points):
            raise GeometryError(f"{len(self.points)} points but {len(self.colors)} colors")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.points):
                raise GeometryError(f"{len(self.points)} points but {len(self.labels)} labels")

    def __len__(self):
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        labels = None if self.labels is None else self.labels[idx]
        return PointCloud(self.points[idx], self.colors[idx], labels)


def transform_points(cloud, rigid: np.ndarray):
    """Rigidly transform a PointCloud (or raw (N, 3) array); colors and labels are kept."""
    check_rigid(rigid)
    if isinstance(cloud, PointCloud):
        return PointCloud(apply_rigid(cloud.points, rigid), cloud.colors.copy(),
                          None if cloud.labels is None else cloud.labels.copy())
    return apply_rigid(cloud, rigid)


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole intrinsics plus a world-to-camera pose; the camera looks down +z."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}")
        object.__setattr__(self, "pose", check_rigid(self.pose).copy())

    def __eq__(self, other):
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (
            (self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            == (other.fx, other.fy, other.cx, other.cy, other.width, other.height)
            and np.array_equal(self.pose, other.pose)
        )

    @property
    def center(self) -> np.ndarray:
        return rigid_inverse(self.pose)[:3, 3]


def project_points(points: np.ndarray, cam: CameraModel):
    """Vectorized projection: returns (u, v, depth, valid) with valid = depth > z_near."""
    pc = apply_rigid(np.asarray(points, dtype=np.float64).reshape(-1, 3), cam.pose)
    z = pc[:, 2]
    valid = z > Z_NEAR
    zs = np.where(valid, z, 1.0)
    u = cam.fx * pc[:, 0] / zs + cam.cx
    v = cam.fy * pc[:, 1] / zs + cam.cy
    return u, v, z, valid


def project(point, cam: CameraModel):
    """Project one world point; returns (u, v, depth) or None if behind the near plane."""
    u, v, z, valid = project_points(np.asarray(point, dtype=np.float64).reshape(1, 3), cam)
    if not valid[0]:
        return None
    return float(u[0]), float(v[0]), float(z[0])


def backproject(u, v, depth, cam: CameraModel) -> np.ndarray:
    """Lift continuous pixel coordinates with camera-frame depth to world points."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    pc = np.stack([(u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z], axis=-1)
    return apply_rigid(pc.reshape(-1, 3), rigid_inverse(cam.pose))


@dataclass
class CorrespondenceSet:
    point_index: np.ndarray  # (M,) indices into the cloud
    pixels: np.ndarray  # (M, 2) integer (u, v)
    camera: CameraModel

    def __len__(self):
        return len(self.point_index)

    def pairs(self) -> set:
        return {(int(i), int(u), int(v)) for i, (u, v) in zip(self.point_index, self.pixels)}


def build_correspondences(
    cloud,
    cam: CameraModel,
    depth: Optional[np.ndarray] = None,
    tol: float = DEFAULT_DEPTH_TOL,
) -> CorrespondenceSet:
    """Match cloud points to the pixels they are visible in.

    A point is kept when it projects in front of the camera into the image
    and is visible: with a depth map its depth must agree with the map within
    ``tol`` relative; in every case only the nearest point per pixel survives
    (ties go to the lower point index).
    """
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    points = points.reshape(-1, 3)
    if len(points) == 0:
        raise GeometryError("cannot build correspondences for an empty cloud")
    if depth is not None:
        depth = np.asarray(depth, dtype=np.float64)
        if depth.shape != (cam.height, cam.width):
            raise GeometryError(f"depth map {depth.shape} does not match camera {cam.height}x{cam.width}")

    u, v, z, valid = project_points(points, cam)
    with np.errstate(invalid="ignore"):
        pu = np.floor(u)
        pv = np.floor(v)
    keep = valid & (pu >= 0) & (pu < cam.width) & (pv >= 0) & (pv < cam.height)
    idx = np.flatnonzero(keep)
    pu = pu[idx].astype(np.int64)
    pv = pv[idx].astype(np.int64)
    z = z[idx]
    if depth is not None:
        d = depth[pv, pu]
        ok = np.abs(z - d) <= tol * d
        idx, pu, pv, z = idx[ok], pu[ok], pv[ok], z[ok]

    pix = pv * cam.width + pu
    order = np.lexsort((idx, z, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    sel = order[first]
    sel = sel[np.argsort(idx[sel], kind="stable")]
    return CorrespondenceSet(idx[sel], np.stack([pu[sel], pv[sel]], axis=1).reshape(-1, 2), cam)
