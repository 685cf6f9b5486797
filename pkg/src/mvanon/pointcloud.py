"""Depth-frame unprojection, cloud fusion, cropping and normal estimation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import AttributeMismatch, TooFewPoints
from .geometry import Camera

MISSING_DEPTH = 0


@dataclass(frozen=True)
class DepthFrame:
    """Raster of uint16 depth in millimetres; 0 marks a sensor hole."""

    values: np.ndarray
    missing_value: int = MISSING_DEPTH

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError("depth raster must be 2-D")
        if v.dtype != np.uint16:
            v = v.astype(np.uint16)
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_meters(cls, depth_m: np.ndarray) -> "DepthFrame":
        d = np.asarray(depth_m, dtype=np.float64)
        mm = np.where(np.isfinite(d) & (d > 0), np.rint(d * 1000.0), 0)
        return cls(np.clip(mm, 0, 65535).astype(np.uint16))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return self.values != self.missing_value

    def meters(self) -> np.ndarray:
        """Depth in metres, NaN at holes."""
        m = self.values.astype(np.float64) / 1000.0
        m[~self.valid] = np.nan
        return m


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    colors: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(c) != len(pts):
                raise ValueError("colors length differs from points")
            object.__setattr__(self, "colors", c)
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(n) != len(pts):
                raise ValueError("normals length differs from points")
            if len(n) and np.max(np.abs(np.linalg.norm(n, axis=1) - 1.0)) > 1e-6:
                raise ValueError("normals must be unit length")
            object.__setattr__(self, "normals", n)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls, with_colors: bool = False) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), np.uint8) if with_colors else None)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(
            self.points[idx],
            None if self.colors is None else self.colors[idx],
            None if self.normals is None else self.normals[idx],
        )

    def transformed(self, transform) -> "PointCloud":
        normals = None
        if self.normals is not None:
            normals = self.normals @ transform.rotation.T
        return PointCloud(transform.apply(self.points), self.colors, normals)


class SpatialIndex:
    """Read-only nearest-neighbour index over a cloud (k-d tree)."""

    def __init__(self, cloud: PointCloud):
        self.cloud = cloud
        self._tree = cKDTree(cloud.points) if len(cloud) else None

    def __len__(self):
        return len(self.cloud)

    def nearest(self, queries, max_distance: float = np.inf):
        """Index and distance of the nearest point; index ``-1`` if none."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if self._tree is None:
            return np.full(len(q), -1), np.full(len(q), np.inf)
        d, i = self._tree.query(q, k=1, distance_upper_bound=max_distance)
        i = np.where(np.isfinite(d), i, -1)
        return i, d

    def knn(self, queries, k: int):
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        d, i = self._tree.query(q, k=k)
        return i.reshape(len(q), k), d.reshape(len(q), k)

    def pairs_within(self, queries, radius: float):
        """All (query, point, distance) triples with distance <= radius."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if self._tree is None or len(q) == 0:
            e = np.zeros(0, dtype=np.int64)
            return e, e, np.zeros(0)
        qtree = cKDTree(q)
        res = qtree.sparse_distance_matrix(self._tree, radius, output_type="ndarray")
        return res["i"].astype(np.int64), res["j"].astype(np.int64), res["v"]


def unproject_depth(camera: Camera, depth: DepthFrame, stride: int = 1, color: Optional[np.ndarray] = None,
                    window: Optional[tuple] = None) -> PointCloud:
    """Backproject valid pixels on the stride grid.

    ``window = (x0, y0, x1, y1)`` restricts to a half-open pixel rectangle;
    the stride grid stays anchored at pixel (0, 0).
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    x0, y0, x1, y1 = window if window is not None else (0, 0, depth.width, depth.height)
    x0, y0 = -(-max(x0, 0) // stride) * stride, -(-max(y0, 0) // stride) * stride
    x1, y1 = min(x1, depth.width), min(y1, depth.height)
    vals = depth.values[y0:y1:stride, x0:x1:stride]
    ys, xs = np.nonzero(vals != depth.missing_value)
    z = vals[ys, xs].astype(np.float64) / 1000.0
    xs, ys = xs * stride + x0, ys * stride + y0
    px = np.stack([xs, ys], axis=1).astype(np.float64)
    pc = camera.pixel_rays(px) * z[:, None] if len(z) else np.zeros((0, 3))
    pts = camera.camera_to_world(pc) if len(z) else np.zeros((0, 3))
    colors = None
    if color is not None:
        colors = np.asarray(color)[ys, xs].reshape(-1, 3)
    return PointCloud(pts, colors)


def fuse(clouds: Sequence[PointCloud]) -> PointCloud:
    clouds = [c for c in clouds]
    if not clouds:
        return PointCloud.empty()
    nonempty = [c for c in clouds if len(c)]
    has_colors = {c.colors is not None for c in nonempty}
    if len(has_colors) > 1:
        raise AttributeMismatch("some clouds carry colors and others do not")
    if not nonempty:
        return clouds[0]
    pts = np.concatenate([c.points for c in nonempty])
    colors = np.concatenate([c.colors for c in nonempty]) if True in has_colors else None
    normals = None
    if all(c.normals is not None for c in nonempty):
        normals = np.concatenate([c.normals for c in nonempty])
    return PointCloud(pts, colors, normals)


def crop_sphere(cloud: PointCloud, center, radius: float) -> PointCloud:
    if radius <= 0:
        raise ValueError("radius must be positive")
    c = np.asarray(center, dtype=np.float64)
    d2 = np.sum((cloud.points - c) ** 2, axis=1)
    return cloud.subset(np.nonzero(d2 <= radius * radius)[0])


def estimate_normals(cloud: PointCloud, k: int = 10, viewpoint=(0.0, 0.0, 0.0)) -> PointCloud:
    """PCA normals from k nearest neighbours (the point itself included),
    flipped to face ``viewpoint``."""
    if k < 3 or len(cloud) < k:
        raise TooFewPoints(f"need at least k={max(k, 3)} points, got {len(cloud)}")
    idx, _ = SpatialIndex(cloud).knn(cloud.points, k)
    nb = cloud.points[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    to_view = np.asarray(viewpoint, dtype=np.float64) - cloud.points
    flip = np.sum(normals * to_view, axis=1) < 0
    normals[flip] *= -1
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(cloud.points, cloud.colors, normals)
