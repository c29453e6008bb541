"""Depth-map / point-cloud operations.

Depth maps are (H, W) float arrays in mm with 0 marking an invalid pixel;
binary masks are (H, W) bool arrays; point clouds are (N, 3) float arrays
in the sensor frame (mm).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree


class EmptyCloudError(ValueError):
    """An operation that needs points received an empty cloud."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole model: focal lengths and principal point in pixels."""

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
            raise ValueError("principal point must lie inside the image")


def depth_to_cloud(depth: np.ndarray, intr: CameraIntrinsics,
                   mask: np.ndarray | None = None) -> np.ndarray:
    """Back-project valid (and mask-true) pixels to 3D sensor-frame points.

    Pixel (u, v) with depth d maps to (d·(u−cx)/fx, d·(v−cy)/fy, d).
    """
    depth = np.asarray(depth, dtype=float)
    if depth.shape != (intr.height, intr.width):
        raise ValueError(f"depth shape {depth.shape} does not match intrinsics "
                         f"({intr.height}, {intr.width})")
    valid = depth > 0
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != depth.shape:
            raise ValueError(f"mask shape {mask.shape} does not match depth {depth.shape}")
        valid &= mask
    v, u = np.nonzero(valid)
    d = depth[v, u]
    x = d * (u - intr.cx) / intr.fx
    y = d * (v - intr.cy) / intr.fy
    return np.column_stack([x, y, d])


def centroid(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    if points.size == 0:
        raise EmptyCloudError("centroid of an empty cloud")
    return points.reshape(-1, 3).mean(axis=0)


# 8-connectivity: diagonal neighbours join a component
_CONN8 = np.ones((3, 3), dtype=int)


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Keep only the largest 8-connected true region of a binary mask.

    Ties are broken in favour of the component whose first pixel comes
    earliest in row-major order. An all-false mask passes through.
    """
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=_CONN8)
    if n == 0:
        return np.zeros_like(mask)
    counts = np.bincount(labels.ravel())[1:]
    # ndimage numbers components in row-major discovery order, so argmax's
    # first-maximum rule implements the tie-break
    best = int(np.argmax(counts)) + 1
    return labels == best


class NearestNeighborIndex:
    """Immutable KD-tree over a reference cloud; safe for concurrent queries."""

    def __init__(self, reference: np.ndarray):
        reference = np.asarray(reference, dtype=float).reshape(-1, 3)
        if reference.shape[0] == 0:
            raise EmptyCloudError("cannot index an empty reference cloud")
        self.reference = reference
        self._tree = cKDTree(reference)

    def query(self, queries: np.ndarray, max_dist: float
              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nearest reference point per query, pairs beyond max_dist dropped.

        Returns (query_indices, reference_indices, distances).
        """
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        dist, idx = self._tree.query(queries, k=1, distance_upper_bound=max_dist,
                                     workers=-1)
        found = np.isfinite(dist)
        qidx = np.nonzero(found)[0]
        return qidx, idx[found], dist[found]


def nearest_neighbors(reference: np.ndarray, queries: np.ndarray,
                      max_dist: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact nearest-neighbor correspondences, capped at max_dist.

    Equivalent to exhaustive search; returns (query_indices,
    reference_indices, distances) for queries whose nearest reference
    point lies within max_dist.
    """
    return NearestNeighborIndex(reference).query(queries, max_dist)


def select_posterior_visible(points: np.ndarray, normals: np.ndarray,
                             view_dir: np.ndarray, grid_mm: float = 0.5,
                             depth_tol_mm: float = 0.5) -> np.ndarray:
    """Indices of points visible from an orthographic view along view_dir.

    A point survives when its normal faces the viewer (normal·view_dir < 0)
    and it passes an orthographic z-buffer test: within depth_tol_mm of the
    nearest depth in its grid_mm x grid_mm cell.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    view_dir = np.asarray(view_dir, dtype=float)
    view_dir = view_dir / np.linalg.norm(view_dir)

    facing = normals @ view_dir < 0.0
    cand = np.nonzero(facing)[0]
    if cand.size == 0:
        return cand

    # orthonormal basis with w = view direction
    w = view_dir
    a = np.array([1.0, 0.0, 0.0]) if abs(w[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(w, a)
    u /= np.linalg.norm(u)
    v = np.cross(w, u)

    p = points[cand]
    su = p @ u
    sv = p @ v
    d = p @ w
    iu = np.floor(su / grid_mm).astype(np.int64)
    iv = np.floor(sv / grid_mm).astype(np.int64)
    iu -= iu.min()
    iv -= iv.min()
    cell = iu * (iv.max() + 1) + iv

    order = np.argsort(cell, kind="stable")
    cell_sorted = cell[order]
    d_sorted = d[order]
    starts = np.flatnonzero(np.r_[True, cell_sorted[1:] != cell_sorted[:-1]])
    min_d = np.minimum.reduceat(d_sorted, starts)
    group = np.cumsum(np.r_[0, (cell_sorted[1:] != cell_sorted[:-1]).astype(int)])
    keep_sorted = d_sorted <= min_d[group] + depth_tol_mm

    keep = np.zeros(cand.size, dtype=bool)
    keep[order] = keep_sorted
    return cand[keep]
