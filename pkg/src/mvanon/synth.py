"""Deterministic synthetic recordings with ground truth.

A box-shaped room seen by a ring of cameras, template heads on simple
bodies walking smooth loops, and an optional flat occluder swinging in
front of one camera. Everything is drawn with the package rasterizer, so
the generated depth maps agree exactly with the geometry used for ground
truth.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import io
from .errors import SpecInvalid
from .evaluation import GTAnnotation
from .geometry import Camera, CameraIntrinsics, CameraRig, RigidTransform, SimilarityTransform, axis_angle_to_matrix
from .pointcloud import DepthFrame
from .pose import J, N_JOINTS, Pose2D, Pose3D
from .render import bbox_of_mask, rasterize, sample_bilinear
from .template import SKIN_TONES, TemplateMesh, canonical_template, make_texture, save_template

ROOM_HALF = 3.5
ROOM_HEIGHT = 3.0
LIGHT = np.array([0.3, -0.4, 0.87]) / np.linalg.norm([0.3, -0.4, 0.87])
N_REPLACEMENT_TEXTURES = 4


@dataclass(frozen=True)
class OccluderSpec:
    enabled: bool = True
    camera: int = 2
    width: float = 0.5
    height: float = 0.4
    distance: float = 0.45  # fraction of the way from the camera to the room centre
    amplitude: float = 0.7  # metres of sideways swing
    period: float = 40.0  # frames


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_cameras: int = 4
    width: int = 640
    height: int = 480
    n_persons: int = 3
    n_frames: int = 50
    keypoint_noise: float = 0.0  # pixels, standard deviation
    depth_hole_fraction: float = 0.002
    min_face_pixels: int = 20
    occluder: OccluderSpec = field(default_factory=OccluderSpec)

    def __post_init__(self):
        if self.n_cameras < 2:
            raise SpecInvalid("need at least 2 cameras")
        if self.width < 32 or self.height < 32:
            raise SpecInvalid("resolution too small")
        if self.n_persons < 0 or self.n_persons > 6:
            raise SpecInvalid("n_persons must lie in [0, 6]")
        if self.n_frames < 1:
            raise SpecInvalid("n_frames must be positive")
        if self.keypoint_noise < 0 or not 0 <= self.depth_hole_fraction < 1:
            raise SpecInvalid("noise parameters out of range")
        if self.occluder.enabled and not 0 <= self.occluder.camera < self.n_cameras:
            raise SpecInvalid("occluder camera index out of range")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d or {})
        occ = d.pop("occluder", {}) or {}
        try:
            occ = OccluderSpec(**occ) if isinstance(occ, dict) else OccluderSpec(enabled=bool(occ))
            return cls(occluder=occ, **d)
        except TypeError as exc:
            raise SpecInvalid(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)


# -- scene construction ---------------------------------------------------------

def look_at(position, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """World-from-camera pose looking from ``position`` at ``target`` (image y down)."""
    p = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - p
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform(np.stack([x, y, z], axis=1), p)


def make_rig(spec: SceneSpec) -> CameraRig:
    cams = []
    f = 0.8 * spec.width
    k = CameraIntrinsics(f, f, (spec.width - 1) / 2.0, (spec.height - 1) / 2.0, spec.width, spec.height)
    for i in range(spec.n_cameras):
        a = np.pi / 4 + 2 * np.pi * i / spec.n_cameras
        surgical = i % 4 >= 2
        h = 2.6 if surgical else 2.2
        pos = (3.0 * np.cos(a), 3.0 * np.sin(a), h)
        cams.append(Camera(f"cam{i}", k, look_at(pos, (0.0, 0.0, 1.2)), "surgical" if surgical else "workflow"))
    return CameraRig(tuple(cams))


@dataclass
class Person:
    pid: int
    base: np.ndarray
    amp: np.ndarray
    omega: np.ndarray
    phase: np.ndarray
    head_height: float
    scale: float
    yaw0: float
    yaw_amp: float
    yaw_omega: float
    texture: np.ndarray
    shirt: tuple

    def head_pose(self, t: int) -> SimilarityTransform:
        xy = self.base + self.amp * np.sin(self.omega * t + self.phase[:2])
        yaw = self.yaw0 + self.yaw_amp * np.sin(self.yaw_omega * t + self.phase[2])
        pitch = 0.12 * np.sin(0.7 * self.yaw_omega * t + self.phase[0])
        r = axis_angle_to_matrix((0, 0, 1), yaw) @ axis_angle_to_matrix((1, 0, 0), pitch)
        return SimilarityTransform(self.scale, r, np.array([xy[0], xy[1], self.head_height]))

    def body_frame(self, t: int) -> RigidTransform:
        head = self.head_pose(t)
        yaw = self.yaw0 + self.yaw_amp * np.sin(self.yaw_omega * t + self.phase[2])
        return RigidTransform(axis_angle_to_matrix((0, 0, 1), yaw), head.translation)


def _person_texture(rng: np.random.Generator, template: TemplateMesh) -> np.ndarray:
    tex = make_texture("maskless", int(rng.integers(len(SKIN_TONES))), template).astype(np.float64)
    tex *= rng.uniform(0.85, 1.1, size=3)
    # a darker band for hair or beard, so originals differ visibly from replacements
    band = rng.integers(0, 2)
    rows = slice(0, 40) if band == 0 else slice(200, 256)
    tex[rows] *= 0.55
    return np.clip(tex, 0, 255).astype(np.uint8)


def make_people(spec: SceneSpec, rng: np.random.Generator, template: TemplateMesh) -> list[Person]:
    people = []
    ring = 0.9 if spec.n_persons <= 3 else 1.3
    start = rng.uniform(0, 2 * np.pi)
    for k in range(spec.n_persons):
        a = start + 2 * np.pi * k / max(spec.n_persons, 1)
        base = ring * np.array([np.cos(a), np.sin(a)]) if spec.n_persons > 1 else np.zeros(2)
        people.append(Person(
            pid=k,
            base=base,
            amp=rng.uniform(0.15, 0.3, size=2),
            omega=2 * np.pi / rng.uniform(60, 120, size=2),
            phase=rng.uniform(0, 2 * np.pi, size=3),
            head_height=float(rng.uniform(1.55, 1.75)),
            scale=float(rng.uniform(0.95, 1.05)),
            yaw0=float(rng.uniform(0, 2 * np.pi)),
            yaw_amp=float(rng.uniform(0.3, 0.8)),
            yaw_omega=2 * np.pi / float(rng.uniform(50, 90)),
            texture=_person_texture(rng, template),
            shirt=tuple(int(c) for c in rng.integers(40, 220, size=3)),
        ))
    return people


def _box_mesh(center, half, rotation) -> tuple[np.ndarray, np.ndarray]:
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
    v = (corners * half) @ rotation.T + center
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    tris = np.asarray(tris)
    # orient outward
    cen = v[tris].mean(axis=1) - center
    fn = np.cross(v[tris[:, 1]] - v[tris[:, 0]], v[tris[:, 2]] - v[tris[:, 0]])
    flip = np.sum(fn * cen, axis=1) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return v, tris


def skeleton(person: Person, t: int, template: TemplateMesh) -> np.ndarray:
    """Planted 17-joint positions for ``person`` at frame ``t``."""
    head = person.head_pose(t)
    body = person.body_frame(t)
    s = person.scale
    out = np.zeros((N_JOINTS, 3))
    for name, idx in template.landmarks.items():
        out[J[name]] = head.apply(template.vertices[idx])
    local = {
        "left_shoulder": (-0.19, 0.0, -0.27), "right_shoulder": (0.19, 0.0, -0.27),
        "left_elbow": (-0.23, 0.02, -0.55), "right_elbow": (0.23, 0.02, -0.55),
        "left_wrist": (-0.24, 0.08, -0.8), "right_wrist": (0.24, 0.08, -0.8),
        "left_hip": (-0.1, 0.0, -0.75), "right_hip": (0.1, 0.0, -0.75),
    }
    for name, p in local.items():
        out[J[name]] = body.apply(np.asarray(p) * s)
    hz = person.head_height
    for side, sx in (("left", -0.1), ("right", 0.1)):
        knee = body.apply(np.array([sx * s, 0.0, 0.0]))
        knee[2] = 0.5 * (hz - 0.75 * s)
        ankle = knee.copy()
        ankle[2] = 0.08
        out[J[f"{side}_knee"]] = knee
        out[J[f"{side}_ankle"]] = ankle
    return out


def body_meshes(person: Person, t: int):
    """Torso and legs as boxes: list of (vertices, triangles, rgb)."""
    body = person.body_frame(t)
    s = person.scale
    r = body.rotation
    top = body.translation + r @ (np.array([0.0, -0.01, -0.22]) * s)
    torso_c = top + np.array([0.0, 0.0, -0.29 * s])
    hip_z = torso_c[2] - 0.29 * s
    legs_c = np.array([torso_c[0], torso_c[1], hip_z / 2.0])
    shirt = np.asarray(person.shirt, dtype=np.float64)
    return [
        (*_box_mesh(torso_c, np.array([0.19, 0.11, 0.29]) * s, r), shirt),
        (*_box_mesh(legs_c, np.array([0.15 * s, 0.09 * s, hip_z / 2.0]), r), 0.45 * shirt + 20),
    ]


def occluder_mesh(spec: SceneSpec, rig: CameraRig, t: int):
    occ = spec.occluder
    cam = rig.cameras[occ.camera]
    # on the sight line from the camera to head height above the room centre
    centre = np.array([0.0, 0.0, 1.65])
    c = cam.center + occ.distance * (centre - cam.center)
    right = cam.pose.rotation[:, 0]
    right = right - right[2] * np.array([0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    c = c + occ.amplitude * np.sin(2 * np.pi * t / occ.period) * right
    up = np.array([0.0, 0.0, 1.0])
    w, h = occ.width / 2, occ.height / 2
    v = np.array([c - w * right - h * up, c + w * right - h * up, c + w * right + h * up, c - w * right + h * up])
    tris = np.array([[0, 1, 2], [0, 2, 3], [0, 2, 1], [0, 3, 2]])
    return v, tris, np.array([70.0, 110.0, 90.0])


# -- rendering ------------------------------------------------------------------

def background(camera: Camera):
    """Colour and camera depth of the empty room."""
    k = camera.intrinsics
    xs, ys = np.meshgrid(np.arange(k.width), np.arange(k.height))
    rays_c = camera.pixel_rays(np.stack([xs.ravel(), ys.ravel()], axis=1))
    d = rays_c @ camera.pose.rotation.T
    o = camera.center
    best = np.full(len(d), np.inf)
    plane_id = np.zeros(len(d), np.int64)
    planes = [(2, 0.0), (2, ROOM_HEIGHT), (0, -ROOM_HALF), (0, ROOM_HALF), (1, -ROOM_HALF), (1, ROOM_HALF)]
    with np.errstate(divide="ignore", invalid="ignore"):
        for pid, (axis, val) in enumerate(planes):
            t = (val - o[axis]) / d[:, axis]
            ok = (t > 0) & (t < best)
            best[ok] = t[ok]
            plane_id[ok] = pid
    hit = o + best[:, None] * d
    palette = np.array([[120, 120, 128], [230, 230, 225], [170, 190, 200], [185, 200, 180], [200, 185, 170],
                        [175, 175, 200]], float)
    u = [hit[:, 0], hit[:, 0], hit[:, 1], hit[:, 1], hit[:, 0], hit[:, 0]]
    v = [hit[:, 1], hit[:, 1], hit[:, 2], hit[:, 2], hit[:, 2], hit[:, 2]]
    uu = np.choose(plane_id, u)
    vv = np.choose(plane_id, v)
    checker = (np.floor(uu / 0.5) + np.floor(vv / 0.5)) % 2
    color = palette[plane_id] * (0.88 + 0.12 * checker)[:, None]
    # ``best`` scales rays with unit camera z, so it is already camera depth
    return color.reshape(k.height, k.width, 3), best.reshape(k.height, k.width)


class Canvas:
    """Z-buffered compositing of meshes over a background."""

    def __init__(self, color, depth):
        self.color = color.copy()
        self.depth = depth.copy()
        self.obj = np.full(depth.shape, -1, np.int64)

    def draw(self, frags, colors, obj_id: int):
        if len(frags) == 0:
            return
        x, y = frags.pixels[:, 0], frags.pixels[:, 1]
        win = frags.depth < self.depth[y, x]
        x, y = x[win], y[win]
        self.depth[y, x] = frags.depth[win]
        self.color[y, x] = colors[win]
        self.obj[y, x] = obj_id


def _shade(normals: np.ndarray) -> np.ndarray:
    return 0.65 + 0.35 * np.clip(normals @ LIGHT, 0, 1)


@dataclass
class HeadParts:
    face_tris: np.ndarray
    rest_tris: np.ndarray
    rest_colors: np.ndarray


def head_parts(template: TemplateMesh, texture: np.ndarray) -> HeadParts:
    face = np.zeros(len(template.vertices), bool)
    face[template.face_submesh] = True
    is_face = face[template.triangles].all(axis=1)
    d = template.vertices / np.linalg.norm(template.vertices, axis=1, keepdims=True)
    hair = (d[:, 2] > 0.3) | ((d[:, 1] < -0.1) & (d[:, 2] > -0.4))
    skin = texture[texture.shape[0] // 2, 10].astype(np.float64)
    colors = np.where(hair[:, None], np.array([60.0, 45.0, 35.0]), skin)
    return HeadParts(template.triangles[is_face], template.triangles[~is_face], colors)


def render_view(camera: Camera, bg, people, t, template, parts, spec, rig):
    """Returns (rgb uint8, depth metres, object-id raster, per-person face-alone pixel counts)."""
    canvas = Canvas(*bg)
    face_alone = {}
    for p in people:
        head = p.head_pose(t)
        verts = head.apply(template.vertices)
        shade = _shade(template.normals @ head.rotation.T)
        hp = parts[p.pid]
        # face: textured
        frags, att = rasterize(verts, hp.face_tris, camera, np.hstack([template.uvs, shade[:, None]]))
        face_alone[p.pid] = frags
        if len(frags):
            a = np.einsum("nk,nkc->nc", frags.bary, att[frags.triangles[frags.tri]])
            col = sample_bilinear(p.texture, a[:, :2]) * a[:, 2:3]
            canvas.draw(frags, col, 100 + p.pid)
        frags, att = rasterize(verts, hp.rest_tris, camera, np.hstack([hp.rest_colors * shade[:, None]]))
        if len(frags):
            col = np.einsum("nk,nkc->nc", frags.bary, att[frags.triangles[frags.tri]])
            canvas.draw(frags, col, 200 + p.pid)
        for v, tris, rgb in body_meshes(p, t):
            frags, att = rasterize(v, tris, camera, np.tile(rgb, (len(v), 1)))
            if len(frags):
                canvas.draw(frags, np.einsum("nk,nkc->nc", frags.bary, att[frags.triangles[frags.tri]]), 300 + p.pid)
    if spec.occluder.enabled and camera.id == rig.cameras[spec.occluder.camera].id:
        v, tris, rgb = occluder_mesh(spec, rig, t)
        frags, _ = rasterize(v, tris, camera, None, cull_backfaces=False)
        canvas.draw(frags, np.broadcast_to(rgb, (len(frags), 3)), 1)
    rgb = np.clip(np.rint(canvas.color), 0, 255).astype(np.uint8)
    return rgb, canvas.depth, canvas.obj, face_alone


def annotate(camera: Camera, obj: np.ndarray, face_alone: dict, t: int, spec: SceneSpec) -> list[GTAnnotation]:
    """Ground-truth face boxes from the object-id raster.

    A face is annotated in a view when its unoccluded render covers at least
    ``min_face_pixels``. It is visible, boxed around its surviving pixels,
    when at least ``min_face_pixels`` of them survive the z-buffer, and fully
    occluded at its unoccluded position when none do. Slivers in between fall
    under the same size floor and are not annotated.
    """
    out = []
    for pid, frags in sorted(face_alone.items()):
        if len(frags) < spec.min_face_pixels:
            continue
        vis = obj == 100 + pid
        n_vis = int(vis.sum())
        if n_vis >= spec.min_face_pixels:
            out.append(GTAnnotation(t, camera.id, pid, bbox_of_mask(vis), False))
        elif n_vis == 0:
            out.append(GTAnnotation(t, camera.id, pid, bbox_of_mask(frags.pixels), True))
    return out


def detect_keypoints(camera: Camera, joints: np.ndarray, rng: np.random.Generator, noise: float):
    px, z = camera.project(joints)
    inside = (z > 0) & camera.intrinsics.contains(np.nan_to_num(px, nan=-1e9, posinf=-1e9, neginf=-1e9))
    if inside.sum() < 5:
        return None
    kp = np.zeros((N_JOINTS, 3))
    kp[:, :2] = np.where(inside[:, None], px, 0.0)
    if noise > 0:
        kp[:, :2] += np.where(inside[:, None], rng.normal(0.0, noise, size=(N_JOINTS, 2)), 0.0)
    kp[:, 2] = np.where(inside, 0.95, 0.0)
    return Pose2D(camera.id, kp)


# -- driver ---------------------------------------------------------------------

@dataclass
class SynthResult:
    root: Path
    rig: CameraRig
    annotations: list
    planted: dict  # frame -> (N, 17, 3) planted joints in person-id order


def gen_synth(root, spec: Optional[SceneSpec] = None) -> SynthResult:
    """Write a complete recording tree plus ground truth under ``root``."""
    spec = spec or SceneSpec()
    root = Path(root)
    rng = np.random.default_rng(spec.seed)
    template = canonical_template()
    rig = make_rig(spec)
    people = make_people(spec, rng, template)
    parts = {p.pid: head_parts(template, p.texture) for p in people}
    io.save_calibration(rig, root / "calibration.json")
    save_template(template, root / "template" / "head.obj")
    for kind in ("masked", "maskless"):
        for v in range(N_REPLACEMENT_TEXTURES):
            io.write_color(root / "textures" / f"{kind}_{v}.png", make_texture(kind, v, template))
    bgs = {cam.id: background(cam) for cam in rig}
    annotations, planted = [], {}
    for t in range(spec.n_frames):
        joints = [skeleton(p, t, template) for p in people]
        planted[t] = np.asarray(joints).reshape(-1, N_JOINTS, 3)
        io.save_poses3d(root / "ground_truth" / "poses3d" / io.frame_name(t, "json"),
                        [Pose3D(j, np.ones(N_JOINTS, bool), t) for j in joints], [p.pid for p in people])
        for cam in rig:
            rgb, depth, obj, alone = render_view(cam, bgs[cam.id], people, t, template, parts, spec, rig)
            d = DepthFrame.from_meters(depth)
            if spec.depth_hole_fraction > 0:
                holes = rng.random(depth.shape) < spec.depth_hole_fraction
                vals = d.values.copy()
                vals[holes] = 0
                d = DepthFrame(vals)
            io.write_color(io.color_path(root, cam.id, t), rgb)
            io.write_depth(io.depth_path(root, cam.id, t), d)
            annotations += annotate(cam, obj, alone, t, spec)
            dets = [detect_keypoints(cam, j, rng, spec.keypoint_noise) for j in joints]
            dets = [d for d in dets if d is not None]
            order = rng.permutation(len(dets))
            io.save_keypoints(io.keypoints_path(root, cam.id, t), [dets[i] for i in order])
    io.write_annotations(root / "ground_truth" / "annotations.csv", annotations)
    (root / "ground_truth" / "scene.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n")
    (root / "config.yaml").write_text(yaml.safe_dump(
        {"input": {"root": "."}, "template": {"obj": "template/head.obj", "texture_dir": "textures",
                                                "texture_kind": "masked"},
         "output": "anonymized"}, sort_keys=True))
    return SynthResult(root, rig, annotations, planted)

