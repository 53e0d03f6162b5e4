"""Pinhole back-projection, reprojection, voxel downsampling, pair sampling.

Camera frame: +X right, +Y down, +Z forward. Pixel (u, v) is column u, row v,
taken at its integer coordinate (no half-pixel offset). Depth is z-depth and
0 marks an invalid pixel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")


EDGE_TOL = 1e-9
DEFAULT_INTRINSICS = CameraIntrinsics(fx=60.0, fy=60.0, cx=31.5, cy=23.5, width=64, height=48)


@dataclass
class PointCloud:
    coords: np.ndarray
    feats: np.ndarray
    pixel_index: np.ndarray

    def __post_init__(self):
        if self.coords.shape[0] != self.feats.shape[0] or self.coords.shape[0] != self.pixel_index.shape[0]:
            raise ShapeError("coords, feats and pixel_index must share their leading extent")

    def __len__(self):
        return self.coords.shape[0]


@dataclass
class CorrespondenceSet:
    pixel_rows: np.ndarray
    point_rows: np.ndarray

    def __len__(self):
        return len(self.point_rows)


def back_project(color: np.ndarray, depth: np.ndarray, intr: CameraIntrinsics) -> PointCloud:
    """Lift every pixel with positive depth into a camera-frame point carrying its colour.

    Points come out in row-major scan order.
    """
    h, w = depth.shape
    if (w, h) != (intr.width, intr.height) or color.shape[:2] != (h, w):
        raise ShapeError(
            f"intrinsics describe a {intr.width}x{intr.height} image but got depth {depth.shape} and color {color.shape}")
    if (depth < 0).any():
        raise ValueError("negative depth values are not allowed")
    flat = depth.reshape(-1)
    idx = np.flatnonzero(flat > 0)
    v, u = np.divmod(idx, w)
    d = flat[idx]
    coords = np.stack([(u - intr.cx) * d / intr.fx, (v - intr.cy) * d / intr.fy, d], axis=1)
    feats = color.reshape(h * w, -1)[idx].astype(np.float64)
    return PointCloud(coords, feats, idx.astype(np.int64))


def project(coords: np.ndarray, intr: CameraIntrinsics):
    """Continuous pixel coordinates (N x 2, columns u, v) and a validity mask."""
    x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
    ok = z > 1e-9
    safe = np.where(ok, z, 1.0)
    u = intr.fx * x / safe + intr.cx
    v = intr.fy * y / safe + intr.cy
    # a pixel at column or row 0 can come back as -1e-15 after the round trip
    ok &= (u >= -EDGE_TOL) & (u < intr.width) & (v >= -EDGE_TOL) & (v < intr.height)
    return np.stack([u, v], axis=1), ok


def voxel_downsample(cloud: PointCloud, voxel_size: float = 0.025) -> PointCloud:
    """Centroid and mean feature of every occupied voxel, sorted by voxel key.

    The surviving pixel index is that of the member nearest the centroid
    (ties go to the lowest pixel index).
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    n = len(cloud)
    if n == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, cloud.feats.shape[1])), np.zeros(0, dtype=np.int64))
    keys = np.floor(cloud.coords / voxel_size).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    g = len(counts)
    csum = np.zeros((g, 3))
    np.add.at(csum, inv, cloud.coords)
    fsum = np.zeros((g, cloud.feats.shape[1]))
    np.add.at(fsum, inv, cloud.feats)
    centroids = csum / counts[:, None]
    feats = fsum / counts[:, None]
    dist = np.sum((cloud.coords - centroids[inv]) ** 2, axis=1)
    # nearest member first, then lowest pixel index
    order = np.lexsort((cloud.pixel_index, dist, inv))
    first = np.ones(n, dtype=bool)
    first[1:] = inv[order[1:]] != inv[order[:-1]]
    pick = order[first]
    return PointCloud(centroids, feats, cloud.pixel_index[pick].copy())


def sample_correspondences(cloud: PointCloud, count: int, rng) -> CorrespondenceSet:
    """Uniform sample, without replacement, of points that know their source pixel."""
    if count < 1:
        raise ValueError("count must be positive")
    valid = np.flatnonzero(cloud.pixel_index >= 0)
    if len(valid) < count:
        raise ValueError(f"need {count} points with known pixels but the cloud has only {len(valid)}")
    rows = valid[rng.permutation(len(valid))[:count]]
    return CorrespondenceSet(cloud.pixel_index[rows].copy(), rows)
