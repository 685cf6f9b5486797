"""Pinhole cameras, rigid/similarity transforms, DLT triangulation and
closed-form point-set alignment.

Conventions: right-handed frames, cameras look down +z, pixel origin at the
top-left with pixel centres on integer coordinates. Extrinsics are stored as
world-from-camera transforms.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    BehindCamera,
    DegenerateConfiguration,
    DegenerateGeometry,
    InsufficientViews,
    InvalidDepth,
    TooFewPoints,
)

ORTHO_TOL = 1e-9


def _frozen(a, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


def project_to_so3(m: np.ndarray) -> np.ndarray:
    """Nearest proper rotation to ``m`` in the Frobenius sense."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0:
        d = 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


def axis_angle_to_matrix(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0 or angle == 0:
        return np.eye(3)
    k = axis / n
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def rotation_vector_to_matrix(rvec) -> np.ndarray:
    rvec = np.asarray(rvec, dtype=np.float64)
    return axis_angle_to_matrix(rvec, float(np.linalg.norm(rvec)))


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle (radians) of a rotation matrix."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _frozen(self.rotation, (3, 3))
        t = _frozen(self.translation, (3,))
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or np.linalg.det(r) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("expected a 4x4 matrix")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_rotvec(cls, rvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rotation_vector_to_matrix(rvec), translation)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(
            project_to_so3(self.rotation @ other.rotation),
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def angle_to(self, other: "RigidTransform") -> float:
        return rotation_angle(self.rotation.T @ other.rotation)

    def distance_to(self, other: "RigidTransform") -> float:
        return float(np.linalg.norm(self.translation - other.translation))


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    @classmethod
    def from_rigid(cls, rigid: RigidTransform, scale: float = 1.0) -> "SimilarityTransform":
        return cls(scale, rigid.rotation, rigid.translation)

    @property
    def rigid(self) -> RigidTransform:
        """Rotation and translation, with the scale dropped."""
        return RigidTransform(self.rotation, self.translation)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * (p @ self.rotation.T) + self.translation

    def inverse_apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return ((p - self.translation) @ self.rotation) / self.scale

    def premul(self, rigid: RigidTransform) -> "SimilarityTransform":
        """``rigid ∘ self``."""
        return SimilarityTransform(
            self.scale,
            project_to_so3(rigid.rotation @ self.rotation),
            rigid.rotation @ self.translation + rigid.translation,
        )


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, pixels) -> np.ndarray:
        """Pixel coordinates falling on the raster (centres on integers)."""
        px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        return (
            (px[:, 0] >= -0.5) & (px[:, 0] < self.width - 0.5)
            & (px[:, 1] >= -0.5) & (px[:, 1] < self.height - 0.5)
        )


@dataclass(frozen=True)
class Camera:
    id: str
    intrinsics: CameraIntrinsics
    pose: RigidTransform = field(default_factory=RigidTransform.identity)
    role: str = "workflow"

    def __post_init__(self):
        if self.role not in ("surgical", "workflow"):
            raise ValueError(f"unknown camera role {self.role!r}")

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def world_to_camera(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - self.pose.translation) @ self.pose.rotation

    def camera_to_world(self, points) -> np.ndarray:
        return self.pose.apply(points)

    def projection_matrix(self) -> np.ndarray:
        """3x4 camera-from-world matrix in normalized image coordinates."""
        r = self.pose.rotation.T
        return np.hstack([r, (-r @ self.pose.translation)[:, None]])

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised projection; no check on depth sign.

        Returns ``(pixels (N, 2), depth (N,))``.
        """
        pc = np.atleast_2d(self.world_to_camera(points))
        z = pc[:, 2]
        k = self.intrinsics
        with np.errstate(divide="ignore", invalid="ignore"):
            u = k.fx * pc[:, 0] / z + k.cx
            v = k.fy * pc[:, 1] / z + k.cy
        return np.stack([u, v], axis=1), z

    def pixel_rays(self, pixels) -> np.ndarray:
        """Camera-frame rays with unit z for the given pixels."""
        px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        k = self.intrinsics
        return np.stack(
            [(px[:, 0] - k.cx) / k.fx, (px[:, 1] - k.cy) / k.fy, np.ones(len(px))], axis=1
        )


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple

    def __post_init__(self):
        cams = tuple(self.cameras)
        if not cams:
            raise ValueError("camera rig must not be empty")
        ids = [c.id for c in cams]
        if len(set(ids)) != len(ids):
            raise ValueError("camera ids must be unique")
        object.__setattr__(self, "cameras", cams)

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, cam_id: str) -> Camera:
        for c in self.cameras:
            if c.id == cam_id:
                return c
        raise KeyError(cam_id)

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.cameras]


@dataclass(frozen=True)
class BBox2D:
    """Axis-aligned box, half-open on the max edges."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"empty box {self}")

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "BBox2D":
        return cls(x, y, x + w, y + h)

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.width * self.height

    def as_xywh(self) -> tuple:
        return (self.x_min, self.y_min, self.width, self.height)

    def contains_pixel(self, x, y) -> bool:
        return self.x_min <= x < self.x_max and self.y_min <= y < self.y_max


def project_point(camera: Camera, p_world) -> tuple[np.ndarray, float]:
    pixels, depth = camera.project(np.asarray(p_world, dtype=np.float64)[None, :])
    if not depth[0] > 0:
        raise BehindCamera(f"point {p_world} has camera depth {depth[0]:.4g}")
    return pixels[0], float(depth[0])


def backproject(camera: Camera, pixel, depth: float) -> np.ndarray:
    if depth is None or not np.isfinite(depth) or depth <= 0:
        raise InvalidDepth(f"depth {depth!r} is not a valid measurement")
    px = np.asarray(pixel, dtype=np.float64)
    if not camera.intrinsics.contains(px)[0]:
        raise ValueError(f"pixel {tuple(px)} outside the image")
    ray = camera.pixel_rays(px)[0]
    return camera.camera_to_world(ray * depth)


def triangulate_dlt(observations: Sequence, min_views: int = 2, weights=None) -> tuple[np.ndarray, float]:
    """Linear triangulation from ``[(camera, pixel), ...]``.

    Rows are built in normalized image coordinates so the homogeneous
    system is well conditioned. ``weights`` scales each view's two rows
    (used for confidence weighting). Returns the point and the RMS
    reprojection error in pixels over all observations.
    """
    if len({cam.id for cam, _ in observations}) < max(min_views, 2):
        raise InsufficientViews(f"need {max(min_views, 2)} distinct cameras, got {len(observations)} observations")
    if weights is None:
        weights = np.ones(len(observations))
    rows = []
    for (cam, px), w in zip(observations, weights):
        xn = cam.pixel_rays(px)[0]
        p = cam.projection_matrix()
        rows.append(w * (xn[0] * p[2] - p[0]))
        rows.append(w * (xn[1] * p[2] - p[1]))
    a = np.asarray(rows)
    _, s, vt = np.linalg.svd(a)
    if s[0] == 0 or s[2] <= 1e-10 * s[0]:
        raise DegenerateGeometry("design matrix is rank deficient")
    x = vt[-1]
    if abs(x[3]) < 1e-12 * np.linalg.norm(x[:3]):
        raise DegenerateGeometry("solution at infinity")
    point = x[:3] / x[3]
    errs = []
    for cam, px in observations:
        proj, _ = cam.project(point[None, :])
        errs.append(np.sum((proj[0] - np.asarray(px, dtype=np.float64)) ** 2))
    return point, float(np.sqrt(np.mean(errs)))


def weighted_similarity(source, target, weights=None, with_scale: bool = True):
    """Weighted least-squares similarity (Umeyama); never raises.

    Minimises ``sum_i w_i |s R src_i + t - dst_i|^2`` and always returns a
    proper rotation. Returns ``(scale, R, t)``.
    """
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    if weights is None:
        w = np.full(len(src), 1.0 / len(src))
    else:
        w = np.asarray(weights, dtype=np.float64)
        total = w.sum()
        if total <= 0:
            return 1.0, np.eye(3), np.zeros(3)
        w = w / total
    mu_s = w @ src
    mu_d = w @ dst
    xs = src - mu_s
    xd = dst - mu_d
    cov = (xd * w[:, None]).T @ xs
    u, d, vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2] = -1.0
    r = (u * sign) @ vt
    scale = 1.0
    if with_scale:
        var_s = float(w @ np.sum(xs * xs, axis=1))
        scale = float(np.dot(d, sign) / var_s) if var_s > 0 else 1.0
    t = mu_d - scale * (r @ mu_s)
    return scale, r, t


def umeyama_align(source, target, with_scale: bool = True, weights=None) -> SimilarityTransform:
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("source and target must both be (N, 3)")
    if len(src) < 3:
        raise TooFewPoints(f"need at least 3 correspondences, got {len(src)}")
    sv = np.linalg.svd(src - src.mean(axis=0), compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-10 * sv[0]:
        raise DegenerateConfiguration("source points are collinear or coincident")
    scale, r, t = weighted_similarity(src, dst, weights, with_scale)
    if scale <= 0:
        raise DegenerateConfiguration("non-positive scale estimate")
    return SimilarityTransform(scale, r, t)
