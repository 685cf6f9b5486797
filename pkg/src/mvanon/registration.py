"""Rigid template-to-scene registration.

Two solvers share one result type:

* ``filterreg_rigid`` -- EM with Gaussian soft correspondences truncated at
  3 sigma, a uniform outlier term and an annealed kernel width.
* ``icp_rigid`` -- hard nearest-neighbour ICP with a distance gate, used as
  the fine-tuning stage.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import EmptyInput, MissingNormals
from .geometry import RigidTransform, project_to_so3, rotation_vector_to_matrix, weighted_similarity
from .pointcloud import PointCloud, SpatialIndex

POINT_TO_POINT = "point_to_point"
POINT_TO_PLANE = "point_to_plane"


@dataclass(frozen=True)
class RegistrationConfig:
    max_iterations: int = 50
    sigma_init: float = 0.03
    sigma_min: float = 0.003
    sigma_decay: float = 0.9
    outlier_weight: float = 0.1
    tol_translation: float = 1e-4
    tol_rotation: float = np.deg2rad(0.01)
    metric: str = POINT_TO_PLANE
    # FilterReg splats the target onto a cubic grid of side lattice_ratio * sigma
    # before filtering; 0 evaluates the kernel on every target point.
    lattice_ratio: float = 0.5

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if not (self.sigma_init >= self.sigma_min > 0):
            raise ValueError("need sigma_init >= sigma_min > 0")
        if not (0 < self.sigma_decay <= 1):
            raise ValueError("sigma_decay must lie in (0, 1]")
        if not (0 <= self.outlier_weight < 1):
            raise ValueError("outlier_weight must lie in [0, 1)")
        if self.lattice_ratio < 0:
            raise ValueError("lattice_ratio must be >= 0")
        if self.metric not in (POINT_TO_POINT, POINT_TO_PLANE):
            raise ValueError(f"unknown metric {self.metric!r}")

    def with_metric(self, metric: str) -> "RegistrationConfig":
        return replace(self, metric=metric)


@dataclass
class RegistrationResult:
    pose: RigidTransform
    iterations: int
    final_residual: float
    converged: bool
    residuals: list = field(default_factory=list)
    message: str = ""


def _pose_change(old: RigidTransform, new: RigidTransform, anchor: np.ndarray) -> tuple[float, float]:
    dt = float(np.linalg.norm(new.apply(anchor) - old.apply(anchor)))
    return dt, old.angle_to(new)


def _apply_step(pose: RigidTransform, r: np.ndarray, t: np.ndarray) -> RigidTransform:
    """Left-multiply ``pose`` by the world-frame increment (r, t)."""
    return RigidTransform(project_to_so3(r @ pose.rotation), r @ pose.translation + t)


def _point_to_plane_step(x, q, n, w):
    """Linearised weighted point-to-plane solve, about the centroid of x."""
    c = (w @ x) / w.sum()
    xc = x - c
    a = np.hstack([np.cross(xc, n), n])
    b = -np.sum(n * (x - q), axis=1)
    sw = np.sqrt(w)
    sol, *_ = np.linalg.lstsq(a * sw[:, None], b * sw, rcond=None)
    r = rotation_vector_to_matrix(sol[:3])
    # p -> r (p - c) + c + t
    t = sol[3:] + c - r @ c
    return r, t


def _outlier_constant(cfg: RegistrationConfig, sigma: float, target: np.ndarray) -> float:
    if cfg.outlier_weight == 0:
        return 0.0
    ext = np.ptp(target, axis=0)
    volume = float(np.prod(np.maximum(ext, 1e-3)))
    w = cfg.outlier_weight
    return w / (1.0 - w) * (2 * np.pi * sigma**2) ** 1.5 * len(target) / volume


def _scatter_sum(rows, values, n):
    # bincount returns integers for empty input, so force float
    cols = [np.bincount(rows, weights=values[:, c], minlength=n) for c in range(values.shape[1])]
    return np.stack(cols, axis=1).astype(np.float64)


def splat(points: np.ndarray, normals: Optional[np.ndarray], cell: float):
    """Aggregate points into grid cells: ``(centroids, counts, normal_sums)``."""
    g = np.floor(points / cell).astype(np.int64)
    g -= g.min(axis=0)
    span = g.max(axis=0) + 1
    keys = (g[:, 0] * span[1] + g[:, 1]) * span[2] + g[:, 2]
    _, inv, counts = np.unique(keys, return_inverse=True, return_counts=True)
    cent = _scatter_sum(inv, points, len(counts)) / counts[:, None]
    nsum = None if normals is None else _scatter_sum(inv, normals, len(counts))
    return cent, counts.astype(np.float64), nsum


def e_step(x: np.ndarray, target: PointCloud, sigma: float, c: float, use_normals: bool = False,
           lattice_ratio: float = 0.0, index: Optional[SpatialIndex] = None):
    """Soft correspondences for transformed source points ``x``.

    Each source point gets the Gaussian-weighted mean of the target points
    within 3 sigma (the virtual target) and an inlier weight
    ``m0 / (m0 + c)`` where ``m0`` is the kernel mass and ``c`` the outlier
    constant. Returns ``(weights, virtual_targets, virtual_normals, mask)``;
    rows without any target within 3 sigma are masked out.
    """
    if lattice_ratio > 0:
        pts, mult, nsum = splat(target.points, target.normals if use_normals else None, lattice_ratio * sigma)
        index = SpatialIndex(PointCloud(pts))
    else:
        pts, mult = target.points, None
        nsum = target.normals if use_normals else None
        index = index or SpatialIndex(target)
    i, j, d = index.pairs_within(x, 3.0 * sigma)
    k = np.exp(-0.5 * (d / sigma) ** 2)
    if mult is not None:
        k = k * mult[j]
    m0 = np.bincount(i, weights=k, minlength=len(x))
    m1 = _scatter_sum(i, k[:, None] * pts[j], len(x))
    mask = m0 > 0
    v = np.zeros_like(m1)
    v[mask] = m1[mask] / m0[mask, None]
    nrm = None
    if use_normals:
        wn = k if mult is None else k / mult[j]
        nrm = _scatter_sum(i, wn[:, None] * nsum[j], len(x))
        ln = np.linalg.norm(nrm, axis=1)
        good = ln > 1e-12
        nrm[good] /= ln[good, None]
        mask &= good
    weights = np.where(mask, m0 / (m0 + c), 0.0)
    return weights, v, nrm, mask


def m_step(x, v, weights, normals=None):
    """Closed-form rigid increment from weighted virtual correspondences."""
    if normals is None:
        _, r, t = weighted_similarity(x, v, weights, with_scale=False)
        return r, t
    return _point_to_plane_step(x, v, normals, weights)


def _check_inputs(source: PointCloud, target: PointCloud):
    if len(source) == 0 or len(target) == 0:
        raise EmptyInput("source and target must be non-empty")


def filterreg_rigid(
    source: PointCloud,
    target: PointCloud,
    init: Optional[RigidTransform] = None,
    cfg: Optional[RegistrationConfig] = None,
    index: Optional[SpatialIndex] = None,
) -> RegistrationResult:
    cfg = cfg or RegistrationConfig()
    init = init or RigidTransform.identity()
    _check_inputs(source, target)
    plane = cfg.metric == POINT_TO_PLANE
    if plane and target.normals is None:
        raise MissingNormals("point_to_plane needs target normals")
    src = source.points
    anchor = src.mean(axis=0)
    pose = init
    sigma = cfg.sigma_init
    residuals = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        x = pose.apply(src)
        c = _outlier_constant(cfg, sigma, target.points)
        w, v, nrm, mask = e_step(x, target, sigma, c, plane, cfg.lattice_ratio, index)
        if not mask.any():
            if it == 1:
                return RegistrationResult(init, 0, float("inf"), False, residuals, "no correspondences")
            it -= 1
            break
        r, t = m_step(x[mask], v[mask], w[mask], None if nrm is None else nrm[mask])
        new_pose = _apply_step(pose, r, t)
        dt, dr = _pose_change(pose, new_pose, anchor)
        pose = new_pose
        x = pose.apply(src)
        residuals.append(float(np.sqrt(np.sum(w * np.sum((x - v) ** 2, axis=1)) / max(w.sum(), 1e-300))))
        at_floor = sigma <= cfg.sigma_min
        if at_floor and dt < cfg.tol_translation and dr < cfg.tol_rotation:
            converged = True
            break
        sigma = max(cfg.sigma_min, sigma * cfg.sigma_decay)
    final = residuals[-1] if residuals else float("inf")
    return RegistrationResult(pose, it, final, converged, residuals)


def truncated_residual(x, index: SpatialIndex, gate: float, plane: bool):
    """Per-point residuals capped at ``gate`` plus the NN assignment."""
    j, d = index.nearest(x, gate)
    inl = j >= 0
    r = np.full(len(x), gate)
    if plane:
        tgt = index.cloud
        r[inl] = np.minimum(np.abs(np.sum(tgt.normals[j[inl]] * (x[inl] - tgt.points[j[inl]]), axis=1)), gate)
    else:
        r[inl] = d[inl]
    return r, j, inl


def icp_rigid(
    source: PointCloud,
    target: PointCloud,
    init: Optional[RigidTransform] = None,
    cfg: Optional[RegistrationConfig] = None,
    index: Optional[SpatialIndex] = None,
) -> RegistrationResult:
    """ICP with gate ``3 * sigma_min``.

    The objective is the RMS of residuals truncated at the gate, so points
    leaving or entering the gate cannot make it jump. A step that would raise
    it is rejected, which keeps the residual sequence non-increasing for
    both metrics.
    """
    cfg = cfg or RegistrationConfig()
    init = init or RigidTransform.identity()
    _check_inputs(source, target)
    plane = cfg.metric == POINT_TO_PLANE
    if plane and target.normals is None:
        raise MissingNormals("point_to_plane needs target normals")
    index = index or SpatialIndex(target)
    gate = 3.0 * cfg.sigma_min
    src = source.points
    anchor = src.mean(axis=0)
    pose = init
    x = pose.apply(src)
    r, j, inl = truncated_residual(x, index, gate, plane)
    if not inl.any():
        return RegistrationResult(init, 0, float("inf"), False, [], "no correspondences")
    current = float(np.sqrt(np.mean(r**2)))
    residuals = [current]
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        q = index.cloud.points[j[inl]]
        w = np.ones(int(inl.sum()))
        if plane:
            rot, t = _point_to_plane_step(x[inl], q, index.cloud.normals[j[inl]], w)
        else:
            _, rot, t = weighted_similarity(x[inl], q, None, with_scale=False)
        cand = _apply_step(pose, rot, t)
        xc = cand.apply(src)
        rc, jc, inlc = truncated_residual(xc, index, gate, plane)
        cand_res = float(np.sqrt(np.mean(rc**2)))
        if cand_res > current or not inlc.any():
            converged = True
            it -= 1
            break
        dt, dr = _pose_change(pose, cand, anchor)
        pose, x, j, inl, current = cand, xc, jc, inlc, cand_res
        residuals.append(current)
        if dt < cfg.tol_translation and dr < cfg.tol_rotation:
            converged = True
            break
    return RegistrationResult(pose, it, current, converged, residuals)
