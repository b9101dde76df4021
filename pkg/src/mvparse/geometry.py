"""Pinhole camera geometry, RGB-D fusion and visibility filtering.

Conventions: world coordinates are right-handed with z up, in meters.
Extrinsics map world to camera: ``p_cam = R @ p + t``. Pixel coordinates
are continuous with integer values at pixel centers; depth lookups round
half-up to the nearest pixel. Depth maps are (H, W) float arrays in meters
with 0 marking an invalid / no-return pixel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _kernels

DEFAULT_OUTLIER_K = 20
DEFAULT_OUTLIER_STD_RATIO = 2.0


@dataclass(frozen=True)
class CameraCalibration:
    """Pinhole intrinsics plus world-to-camera extrinsics for one view."""

    view_id: str
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray    # (3, 3) world -> camera
    translation: np.ndarray  # (3,) meters
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass
class Projection:
    """A world point projected into one view."""

    view_id: str
    u: float
    v: float
    z: float
    valid: bool


@dataclass
class LabeledPointCloud:
    """3D points with optional colors and instance / part labels."""

    positions: np.ndarray                    # (N, 3) float64
    colors: Optional[np.ndarray] = None      # (N, 3) uint8
    instance_ids: Optional[np.ndarray] = None  # (N,) int32
    part_ids: Optional[np.ndarray] = None      # (N,) int32

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("point positions must be finite")

    def __len__(self) -> int:
        return self.positions.shape[0]


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World->camera rotation and translation for a camera at ``eye``
    looking at ``target`` (image v axis pointing down in world)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nrm = np.linalg.norm(right)
    if nrm < 1e-12:
        raise ValueError("view direction parallel to up vector")
    right = right / nrm
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    t = -R @ eye
    return R, t


def round_half_up(x):
    """Pixel rounding used everywhere a continuous coordinate is sampled."""
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def project(point, calib: CameraCalibration) -> Projection:
    """Project one world point; valid only if in front of the camera and
    inside the image."""
    p = np.asarray(point, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(p)):
        raise ValueError("invalid point")
    u, v, z, valid = project_points(p[None, :], calib)
    return Projection(calib.view_id, float(u[0]), float(v[0]), float(z[0]), bool(valid[0]))


def project_points(points, calib: CameraCalibration):
    """Vectorized projection. Returns (u, v, z, valid) arrays.

    u and v are NaN where the point is behind the camera. Component-wise
    arithmetic (no BLAS) keeps results identical across thread settings.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValueError("invalid point")
    R, t = calib.rotation, calib.translation
    x = (R[0, 0] * pts[:, 0] + R[0, 1] * pts[:, 1]) + R[0, 2] * pts[:, 2] + t[0]
    y = (R[1, 0] * pts[:, 0] + R[1, 1] * pts[:, 1]) + R[1, 2] * pts[:, 2] + t[1]
    z = (R[2, 0] * pts[:, 0] + R[2, 1] * pts[:, 1]) + R[2, 2] * pts[:, 2] + t[2]
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(front, calib.fx * x / z + calib.cx, np.nan)
        v = np.where(front, calib.fy * y / z + calib.cy, np.nan)
    valid = front & (u >= 0) & (u < calib.width) & (v >= 0) & (v < calib.height)
    return u, v, z, valid


def back_project(u, v, depth, calib: CameraCalibration) -> np.ndarray:
    """Inverse of :func:`project` for a pixel with known depth."""
    if depth <= 0:
        raise ValueError("invalid depth")
    if not (0 <= u < calib.width and 0 <= v < calib.height):
        raise ValueError("pixel outside image")
    x = (u - calib.cx) / calib.fx * depth
    y = (v - calib.cy) / calib.fy * depth
    p_cam = np.array([x, y, depth])
    return calib.rotation.T @ (p_cam - calib.translation)


def depth_to_cloud(depth_map, calib: CameraCalibration, rgb=None, stride: int = 1):
    """Back-project every valid depth pixel to world space.

    Returns (positions (N, 3), colors (N, 3) or None). Pixels are visited
    in row-major order so the output ordering is reproducible.
    """
    depth_map = np.asarray(depth_map, dtype=np.float64)
    h, w = depth_map.shape
    rows = np.arange(0, h, stride)
    cols = np.arange(0, w, stride)
    d = depth_map[np.ix_(rows, cols)]
    vv, uu = np.meshgrid(rows.astype(np.float64), cols.astype(np.float64), indexing="ij")
    ok = d > 0
    u = uu[ok]
    v = vv[ok]
    z = d[ok]
    x = (u - calib.cx) / calib.fx * z
    y = (v - calib.cy) / calib.fy * z
    R, t = calib.rotation, calib.translation
    px = x - t[0]
    py = y - t[1]
    pz = z - t[2]
    wx = (R[0, 0] * px + R[1, 0] * py) + R[2, 0] * pz
    wy = (R[0, 1] * px + R[1, 1] * py) + R[2, 1] * pz
    wz = (R[0, 2] * px + R[1, 2] * py) + R[2, 2] * pz
    positions = np.stack([wx, wy, wz], axis=1)
    colors = None
    if rgb is not None:
        colors = np.asarray(rgb)[np.ix_(rows, cols)][ok]
    return positions, colors


def knn_mean_distances(points, k: int) -> np.ndarray:
    """Mean distance of each point to its k nearest neighbors."""
    return _kernels.knn_mean_dists(points, k)


def fuse_and_clean(views: Sequence, k: int = DEFAULT_OUTLIER_K,
                   std_ratio: float = DEFAULT_OUTLIER_STD_RATIO,
                   stride: int = 1) -> LabeledPointCloud:
    """Merge per-view depth maps into one cloud and drop statistical outliers.

    ``views`` is a sequence of (depth_map, calib) or (depth_map, calib, rgb)
    tuples. A point is removed when its mean distance to its ``k`` nearest
    neighbors exceeds mean + std_ratio * std of those per-point means.
    Clouds with at most ``k`` points are returned uncleaned.
    """
    if len(views) == 0:
        raise ValueError("no views to fuse")
    if k < 1:
        raise ValueError("k must be >= 1")
    all_pos = []
    all_col = []
    has_rgb = all(len(v) >= 3 and v[2] is not None for v in views)
    for view in views:
        depth_map, calib = view[0], view[1]
        rgb = view[2] if (has_rgb and len(view) >= 3) else None
        pos, col = depth_to_cloud(depth_map, calib, rgb=rgb, stride=stride)
        all_pos.append(pos)
        if has_rgb:
            all_col.append(col)
    positions = np.concatenate(all_pos, axis=0)
    colors = np.concatenate(all_col, axis=0).astype(np.uint8) if has_rgb else None
    if positions.shape[0] <= k:
        return LabeledPointCloud(positions, colors)
    mean_d = knn_mean_distances(positions, k)
    # Stats over the sorted distances: exactly permutation invariant.
    d_sorted = np.sort(mean_d)
    mu = d_sorted.sum() / d_sorted.size
    sigma = np.sqrt(np.maximum(((d_sorted - mu) ** 2).sum() / d_sorted.size, 0.0))
    keep = mean_d <= mu + std_ratio * sigma
    return LabeledPointCloud(positions[keep],
                             colors[keep] if colors is not None else None)


def visibility_filter(points, depth_map, calib: CameraCalibration,
                      beta: float) -> np.ndarray:
    """Indices of points whose projection lies within ``beta`` meters of the
    view's visible depth surface (the per-view occlusion filter)."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    depth_map = np.asarray(depth_map, dtype=np.float64)
    u, v, z, valid = project_points(pts, calib)
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return idx
    cols = round_half_up(u[idx])
    rows = round_half_up(v[idx])
    # Half-up rounding can push a coordinate just past the far edge.
    cols = np.clip(cols, 0, calib.width - 1)
    rows = np.clip(rows, 0, calib.height - 1)
    d = depth_map[rows, cols]
    keep = (d > 0) & (np.abs(z[idx] - d) <= beta)
    return idx[keep]
