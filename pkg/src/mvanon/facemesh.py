"""Posing the head template per person: landmark anchoring, registration
refinement against the scene, face extraction and the per-camera
depth-disparity visibility test."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateConfiguration, MissingFaceSubmesh, TooFewLandmarks
from .geometry import Camera, RigidTransform, SimilarityTransform, umeyama_align
from .pointcloud import DepthFrame, PointCloud, crop_sphere, estimate_normals
from .pose import J, Pose3D
from .registration import RegistrationConfig, RegistrationResult, filterreg_rigid, icp_rigid
from .template import LANDMARK_NAMES, TemplateMesh

log = logging.getLogger(__name__)

VISIBLE = "visible"
OCCLUDED = "occluded"
OUT_OF_FRAME = "out_of_frame"
UNKNOWN_DEPTH = "unknown_depth"
FACING_AWAY = "facing_away"
UNKNOWN = "unknown"
RENDERABLE = (VISIBLE, UNKNOWN_DEPTH, FACING_AWAY)

SCALE_RANGE = (0.8, 1.25)


@dataclass
class FaceInstance:
    person_id: int
    frame_index: int
    pose: SimilarityTransform
    vertices: np.ndarray
    triangles: np.ndarray
    uvs: np.ndarray
    normals: np.ndarray
    probes: np.ndarray  # indices into ``vertices``
    visibility: dict = field(default_factory=dict)
    diagnostics: Optional[RegistrationResult] = None
    texture_id: int = 0

    def verdict(self, camera_id: str) -> str:
        return self.visibility.get(camera_id, UNKNOWN)

    @property
    def probe_points(self) -> np.ndarray:
        return self.vertices[self.probes]

    @property
    def probe_normals(self) -> np.ndarray:
        return self.normals[self.probes]


@dataclass(frozen=True)
class RefineConfig:
    crop_radius: float = 0.25
    normals_k: int = 30
    source_stride: int = 6
    registration: RegistrationConfig = RegistrationConfig()


def anchor_template(template: TemplateMesh, pose: Pose3D, scale_range=SCALE_RANGE) -> SimilarityTransform:
    """Similarity taking template landmarks onto the valid head joints.

    A scale outside ``scale_range`` is clamped and the translation re-solved
    for the clamped value (the least-squares rotation does not depend on it).
    """
    names = [n for n in LANDMARK_NAMES if n in template.landmarks and pose.valid[J[n]]]
    if len(names) < 3:
        raise TooFewLandmarks(f"need 3 landmark correspondences, have {len(names)}")
    src = template.landmark_points(names)
    dst = pose.joints[[J[n] for n in names]]
    try:
        sim = umeyama_align(src, dst, with_scale=True)
    except DegenerateConfiguration as exc:
        raise TooFewLandmarks(f"landmarks are collinear: {exc}") from exc
    lo, hi = scale_range
    if lo <= sim.scale <= hi:
        return sim
    s = float(np.clip(sim.scale, lo, hi))
    t = dst.mean(axis=0) - s * sim.rotation @ src.mean(axis=0)
    return SimilarityTransform(s, sim.rotation, t)


def refine_alignment(
    template: TemplateMesh,
    anchor: SimilarityTransform,
    scene: PointCloud,
    center=None,
    cfg: Optional[RefineConfig] = None,
) -> tuple[SimilarityTransform, RegistrationResult]:
    """FilterReg then ICP of the anchored template onto the scene crop.

    ``center`` defaults to the anchor origin. Any failure (empty crop,
    non-convergence, result drifting out of the crop) returns the anchor
    with ``converged = False``.
    """
    cfg = cfg or RefineConfig()
    center = anchor.translation if center is None else np.asarray(center, dtype=np.float64)

    def fallback(msg, res=None):
        log.debug("refinement fell back to anchor: %s", msg)
        res = res or RegistrationResult(RigidTransform.identity(), 0, float("inf"), False)
        res.converged = False
        res.message = msg
        return anchor, res

    crop = crop_sphere(scene, center, cfg.crop_radius)
    if len(crop) < max(cfg.normals_k, 3):
        return fallback("crop too small")
    target = estimate_normals(crop, k=cfg.normals_k, viewpoint=center)
    source = PointCloud(anchor.apply(template.vertices[:: cfg.source_stride]))
    rcfg = cfg.registration
    coarse = filterreg_rigid(source, target, RigidTransform.identity(), rcfg)
    if coarse.iterations == 0:
        return fallback(coarse.message or "no correspondences", coarse)
    fine = icp_rigid(source, target, coarse.pose, rcfg)
    fine.iterations += coarse.iterations
    if not fine.converged:
        return fallback("icp did not converge", fine)
    final = anchor.premul(fine.pose)
    if np.linalg.norm(final.translation - center) > cfg.crop_radius:
        return fallback("registered head left the crop", fine)
    fine.message = f"filterreg {coarse.iterations} it, converged={coarse.converged}"
    return final, fine


def extract_face(template: TemplateMesh, pose: SimilarityTransform, person_id: int = 0, frame_index: int = 0,
                 diagnostics: Optional[RegistrationResult] = None, texture_id: int = 0) -> FaceInstance:
    if template.face_submesh is None:
        raise MissingFaceSubmesh("template has no face_submesh")
    face = template.face_submesh
    lut = np.full(len(template.vertices), -1)
    lut[face] = np.arange(len(face))
    return FaceInstance(
        person_id=person_id,
        frame_index=frame_index,
        pose=pose,
        vertices=pose.apply(template.vertices[face]),
        triangles=template.face_triangles(),
        uvs=template.uvs[face],
        normals=template.normals[face] @ pose.rotation.T,
        probes=lut[template.probe_vertices],
        diagnostics=diagnostics,
        texture_id=texture_id,
    )


def probe_disparities(face: FaceInstance, camera: Camera, depth: DepthFrame, radius: int = 1):
    """Per-probe ``(in_frame, facing, has_depth, disparity_m)``.

    The disparity is the distance from the probe to the point the depth map
    reports along the probe's ray, minimised over the ``(2 radius + 1)``
    square of pixels around the projection so that rounding at a depth edge
    does not read the background. Holes are skipped; ``has_depth`` is false
    only when the whole square is holes.
    """
    pts = face.probe_points
    px, z = camera.project(pts)
    front = z > 1e-9
    ij = np.rint(np.where(front[:, None], px, -1.0)).astype(np.int64)
    in_frame = front & (ij[:, 0] >= 0) & (ij[:, 0] < depth.width) & (ij[:, 1] >= 0) & (ij[:, 1] < depth.height)
    facing = np.sum(face.probe_normals * (camera.center - pts), axis=1) > 0
    # a pixel ray scaled to camera depth d lands at distance |d - z| * |ray| from the probe
    k = camera.intrinsics
    ray_len = np.sqrt(1.0 + ((px[:, 0] - k.cx) / k.fx) ** 2 + ((px[:, 1] - k.cy) / k.fy) ** 2)
    disparity = np.full(len(pts), np.inf)
    has_depth = np.zeros(len(pts), bool)
    idx = np.nonzero(in_frame)[0]
    if len(idx):
        off = np.arange(-radius, radius + 1)
        xs = np.clip(ij[idx, 0, None, None] + off[None, None, :], 0, depth.width - 1)
        ys = np.clip(ij[idx, 1, None, None] + off[None, :, None], 0, depth.height - 1)
        raw = depth.values[ys, xs].reshape(len(idx), -1)
        valid = raw != depth.missing_value
        d = np.abs(raw / 1000.0 - z[idx, None]) * ray_len[idx, None]
        d[~valid] = np.inf
        has_depth[idx] = valid.any(axis=1)
        disparity[idx] = d.min(axis=1)
    return in_frame, facing, has_depth, disparity


def check_visibility(face: FaceInstance, camera: Camera, depth: DepthFrame, tau: float = 0.05,
                     quorum: float = 0.1, front_facing_only: bool = True) -> str:
    """Depth-disparity verdict for one camera.

    Probes facing away from the camera are not eligible when
    ``front_facing_only`` is set; a face whose in-frame probes all face away
    is reported ``facing_away``. Only a depth-clipped render may be drawn for
    such a face, which keeps just the silhouette pixels in front of the head.
    """
    in_frame, facing, has_depth, disparity = probe_disparities(face, camera, depth)
    if not in_frame.any():
        return OUT_OF_FRAME
    eligible = in_frame & facing if front_facing_only else in_frame
    if not eligible.any():
        return FACING_AWAY
    measured = eligible & has_depth
    if not measured.any():
        return UNKNOWN_DEPTH
    agree = np.count_nonzero(disparity[measured] <= tau)
    return VISIBLE if agree >= quorum * np.count_nonzero(measured) else OCCLUDED
