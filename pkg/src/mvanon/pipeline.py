"""End-to-end anonymization and evaluation runs.

Pass 1 builds 3D poses for the whole sequence (from keypoints or from 3D
pose files), tracks and smooths them. Pass 2 handles every frame
independently: head crop, template anchoring and registration, face
extraction, per-camera visibility, rendering and compositing.
"""
from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import partial
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import io
from .errors import AnonError, ConfigInvalid, ParseError
from .evaluation import Detection, MetricsReport, evaluate, ssim_summary
from .facemesh import (FACING_AWAY, RENDERABLE, UNKNOWN_DEPTH, RefineConfig, anchor_template, check_visibility,
                       extract_face, refine_alignment)
from .geometry import Camera, CameraRig
from .pointcloud import PointCloud, fuse, unproject_depth
from .pose import associate_across_views, head_frame, lift_to_3d, smooth_track, track_people
from .registration import RegistrationConfig
from .render import BACKENDS, BlendConfig, obfuscate, poisson_blend, rasterize_face
from .template import LANDMARK_NAMES, TemplateMesh, canonical_template, load_template, make_texture

log = logging.getLogger(__name__)

STAGES = ("io", "pose", "registration", "render", "blend")


# -- configuration --------------------------------------------------------------

@dataclass(frozen=True)
class PoseParams:
    epipolar_gate: float = 20.0
    min_confidence: float = 0.3
    tracking_gate: float = 0.5
    max_gap: int = 15
    window: int = 11
    max_interp_gap: int = 15


@dataclass(frozen=True)
class VisibilityParams:
    tau: float = 0.05
    quorum: float = 0.1
    front_facing_only: bool = True


@dataclass(frozen=True)
class RenderParams:
    depth_clip: bool = True
    bilinear: bool = True
    min_face_pixels: int = 10


@dataclass(frozen=True)
class PipelineConfig:
    root: Path
    output: Path
    calibration: Optional[Path] = None
    color: Optional[Path] = None
    depth: Optional[Path] = None
    keypoints: Optional[Path] = None
    poses3d: Optional[Path] = None
    template_obj: Optional[Path] = None
    texture_dir: Optional[Path] = None
    texture_kind: str = "masked"
    n_textures: int = 4
    backend: str = "mesh_poisson"
    registration: RegistrationConfig = RegistrationConfig()
    refine: RefineConfig = RefineConfig()
    pose: PoseParams = PoseParams()
    visibility: VisibilityParams = VisibilityParams()
    render: RenderParams = RenderParams()
    blend: BlendConfig = BlendConfig()
    frames: Optional[tuple] = None
    workers: int = 1
    seed: int = 0
    faithful: bool = False

    def __post_init__(self):
        root = Path(self.root)
        object.__setattr__(self, "root", root)
        object.__setattr__(self, "output", Path(self.output))
        defaults = {"calibration": root / "calibration.json", "color": root / "color", "depth": root / "depth",
                    "keypoints": root / "keypoints"}
        for name, default in defaults.items():
            v = getattr(self, name)
            object.__setattr__(self, name, Path(v) if v is not None else default)
        for name in ("poses3d", "template_obj", "texture_dir"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, Path(v))

    @property
    def camera_root(self) -> Path:
        return self.root

    def validate(self) -> "PipelineConfig":
        if self.backend not in BACKENDS:
            raise ConfigInvalid(f"backend must be one of {BACKENDS}")
        if self.texture_kind not in ("masked", "maskless"):
            raise ConfigInvalid("texture_kind must be masked or maskless")
        if self.workers < 1 or self.n_textures < 1:
            raise ConfigInvalid("workers and n_textures must be positive")
        need = [self.calibration, self.color, self.depth]
        need.append(self.poses3d if self.poses3d is not None else self.keypoints)
        if self.template_obj is not None:
            need.append(self.template_obj)
        if self.texture_dir is not None:
            need.append(self.texture_dir)
        for p in need:
            if not p.exists():
                raise ConfigInvalid(f"path does not exist: {p}")
        if self.frames is not None and (len(self.frames) != 2 or self.frames[0] > self.frames[1]):
            raise ConfigInvalid("frames must be [start, stop)")
        return self

    @classmethod
    def from_dict(cls, d: dict, base: Path = Path(".")) -> "PipelineConfig":
        """Build from the nested YAML layout; relative paths resolve against ``base``."""
        d = dict(d or {})
        known = {"input", "template", "backend", "registration", "refine", "pose", "visibility", "render", "blend",
                 "output", "frames", "workers", "seed", "faithful"}
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")

        def path(v):
            if v is None:
                return None
            p = Path(v)
            return p if p.is_absolute() else base / p

        def block(kind, value):
            value = value or {}
            names = {f.name for f in fields(kind)}
            bad = set(value) - names
            if bad:
                raise ConfigInvalid(f"unknown keys for {kind.__name__}: {sorted(bad)}")
            try:
                return kind(**value)
            except (TypeError, ValueError) as exc:
                raise ConfigInvalid(f"{kind.__name__}: {exc}") from exc

        inp = dict(d.get("input") or {})
        if "root" not in inp:
            raise ConfigInvalid("input.root is required")
        tpl = dict(d.get("template") or {})
        reg = dict(d.get("registration") or {})
        if "tol_rotation_deg" in reg:
            reg["tol_rotation"] = float(np.deg2rad(reg.pop("tol_rotation_deg")))
        refine = dict(d.get("refine") or {})
        kw = dict(
            root=path(inp.pop("root")),
            output=path(d.get("output", "anonymized")),
            texture_kind=tpl.get("texture_kind", "masked"),
            n_textures=int(tpl.get("n_textures", 4)),
            template_obj=path(tpl.get("obj")),
            texture_dir=path(tpl.get("texture_dir")),
            backend=d.get("backend", "mesh_poisson"),
            registration=block(RegistrationConfig, reg),
            pose=block(PoseParams, d.get("pose")),
            visibility=block(VisibilityParams, d.get("visibility")),
            render=block(RenderParams, d.get("render")),
            blend=block(BlendConfig, d.get("blend")),
            frames=tuple(d["frames"]) if d.get("frames") is not None else None,
            workers=int(d.get("workers", 1)),
            seed=int(d.get("seed", 0)),
            faithful=bool(d.get("faithful", False)),
        )
        for name in ("calibration", "color", "depth", "keypoints", "poses3d"):
            if name in inp:
                kw[name] = path(inp.pop(name))
        if inp:
            raise ConfigInvalid(f"unknown input keys: {sorted(inp)}")
        kw["refine"] = block(RefineConfig, {**refine, "registration": kw["registration"]})
        return cls(**kw)

    @classmethod
    def from_yaml(cls, path, overrides: Optional[dict] = None) -> "PipelineConfig":
        path = Path(path)
        try:
            d = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ParseError(str(exc), path, mark.line + 1 if mark else None) from exc
        except OSError as exc:
            raise ConfigInvalid(str(exc)) from exc
        if not isinstance(d, dict):
            raise ConfigInvalid("config must be a mapping")
        for k, v in (overrides or {}).items():
            d[k] = v
        return cls.from_dict(d, path.parent)

    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, Path):
                return str(v)
            if isinstance(v, tuple):
                return list(v)
            if isinstance(v, dict):
                return {k: conv(x) for k, x in v.items()}
            if isinstance(v, float):
                return float(v)
            return v

        return {k: conv(v) for k, v in asdict(self).items()}


# -- shared context -------------------------------------------------------------

@dataclass
class Context:
    cfg: PipelineConfig
    rig: CameraRig
    template: TemplateMesh
    textures: list
    canonical_joints: dict


def _load_textures(cfg: PipelineConfig, template: TemplateMesh) -> list:
    out = []
    for v in range(cfg.n_textures):
        p = cfg.texture_dir / f"{cfg.texture_kind}_{v}.png" if cfg.texture_dir else None
        if p is not None and p.exists():
            out.append(io.read_color(p))
        else:
            out.append(make_texture(cfg.texture_kind, v, template))
    return out


def build_context(cfg: PipelineConfig) -> Context:
    rig = io.load_calibration(cfg.calibration)
    template = load_template(cfg.template_obj) if cfg.template_obj else canonical_template()
    canon = {n: template.vertices[template.landmarks[n]] for n in LANDMARK_NAMES if n in template.landmarks}
    return Context(cfg, rig, template, _load_textures(cfg, template), canon)


def frame_indices(cfg: PipelineConfig, rig: CameraRig) -> list[int]:
    frames = set()
    for cam in rig.ids:
        d = cfg.color / cam
        if d.is_dir():
            frames.update(int(p.stem) for p in d.iterdir() if p.stem.isdigit())
    out = sorted(frames)
    if cfg.frames is not None:
        out = [f for f in out if cfg.frames[0] <= f < cfg.frames[1]]
    return out


# -- pass 1 ---------------------------------------------------------------------

def frame_poses(ctx: Context, frame: int, errors: list) -> list:
    cfg = ctx.cfg
    if cfg.poses3d is not None:
        p = cfg.poses3d / io.frame_name(frame, "json")
        if not p.exists():
            errors.append(f"missing 3D pose file {p.name}")
            return []
        return io.load_poses3d(p, frame)
    dets = {}
    for cam in ctx.rig.ids:
        p = cfg.keypoints / cam / io.frame_name(frame, "json")
        if not p.exists():
            errors.append(f"{cam}: missing keypoint file")
            continue
        dets[cam] = io.load_keypoints(p, cam)
    groups = associate_across_views(dets, ctx.rig, cfg.pose.epipolar_gate, cfg.pose.min_confidence)
    poses = []
    for g in groups:
        pose = lift_to_3d({c: dets[c][k] for c, k in g.items()}, ctx.rig, cfg.pose.min_confidence, frame)
        if pose.valid.any():
            poses.append(pose)
    return poses


def build_tracks(ctx: Context, frames: list[int]):
    """Pass 1: returns (tracks, per-frame errors, seconds)."""
    t0 = time.perf_counter()
    errors = {f: [] for f in frames}
    per_frame = []
    for f in frames:
        try:
            per_frame.append(frame_poses(ctx, f, errors[f]))
        except (AnonError, OSError) as exc:
            errors[f].append(f"pose input: {exc}")
            per_frame.append([])
    p = ctx.cfg.pose
    tracks = track_people(per_frame, p.tracking_gate, p.max_gap, ctx.cfg.n_textures)
    tracks = [smooth_track(t, p.window, p.max_interp_gap) for t in tracks]
    return tracks, errors, time.perf_counter() - t0


# -- pass 2 ---------------------------------------------------------------------

def crop_window(camera: Camera, center: np.ndarray, radius: float, margin: int = 2):
    """Pixel rectangle covering the projection of a sphere, or None if it is behind the camera."""
    pc = camera.world_to_camera(center[None])[0]
    k = camera.intrinsics
    if pc[2] <= radius:
        return (0, 0, k.width, k.height) if pc[2] > -radius else None
    u = k.fx * pc[0] / pc[2] + k.cx
    v = k.fy * pc[1] / pc[2] + k.cy
    # a sphere's image lies inside the disc of radius f r / sqrt(z^2 - r^2), inflated for off-axis stretch
    rad = max(k.fx, k.fy) * radius / np.sqrt(pc[2] ** 2 - radius**2)
    rad *= 1.0 + np.hypot(pc[0], pc[1]) / pc[2]
    x0, y0 = int(np.floor(u - rad)) - margin, int(np.floor(v - rad)) - margin
    x1, y1 = int(np.ceil(u + rad)) + margin + 1, int(np.ceil(v + rad)) + margin + 1
    if x1 <= 0 or y1 <= 0 or x0 >= k.width or y0 >= k.height:
        return None
    return (max(x0, 0), max(y0, 0), min(x1, k.width), min(y1, k.height))


def head_crop(rig: CameraRig, depths: dict, center: np.ndarray, radius: float) -> PointCloud:
    clouds = []
    for cam in rig:
        if cam.id not in depths:
            continue
        win = crop_window(cam, center, radius)
        if win is None:
            continue
        clouds.append(unproject_depth(cam, depths[cam.id], 1, window=win))
    return fuse(clouds)


def _timed(timings, stage):
    class _T:
        def __enter__(self):
            self.t = time.perf_counter()

        def __exit__(self, *a):
            timings[stage] = timings.get(stage, 0.0) + time.perf_counter() - self.t

    return _T()


def _rnd(x, nd=9):
    return [round(float(v), nd) for v in np.ravel(x)]


def process_frame(ctx: Context, job: tuple):
    """Anonymize one frame; returns ``(record, detections, timings)``."""
    frame, persons, errors = job
    cfg = ctx.cfg
    t_start = time.perf_counter()
    timings = {s: 0.0 for s in STAGES}
    record = {"frame": frame, "inputs": {}, "faces": [], "errors": list(errors)}
    detections = []
    images, depths = {}, {}
    with _timed(timings, "io"):
        for cam in ctx.rig.ids:
            cp = cfg.color / cam / io.frame_name(frame, "png")
            dp = cfg.depth / cam / io.frame_name(frame, "png")
            inputs = {"color": cp.exists(), "depth": dp.exists()}
            record["inputs"][cam] = inputs
            if inputs["color"]:
                try:
                    images[cam] = io.read_color(cp)
                except (OSError, FileNotFoundError) as exc:
                    record["errors"].append(f"{cam}: unreadable color image: {exc}")
            else:
                record["errors"].append(f"{cam}: missing color image")
            if inputs["depth"]:
                try:
                    depths[cam] = io.read_depth(dp)
                except (AnonError, OSError, FileNotFoundError) as exc:
                    record["errors"].append(f"{cam}: unreadable depth image: {exc}")
            else:
                record["errors"].append(f"{cam}: missing depth image, camera excluded from fusion and visibility")
    faces = []
    for pid, texture_id, pose in sorted(persons, key=lambda p: p[0]):
        entry = {"person_id": pid, "texture_id": texture_id, "verdicts": {}, "boxes": {}}
        record["faces"].append(entry)
        try:
            with _timed(timings, "registration"):
                hf = head_frame(pose, ctx.canonical_joints)
                anchor = anchor_template(ctx.template, pose)
                crop = head_crop(ctx.rig, depths, hf.origin, cfg.refine.crop_radius)
                final, reg = refine_alignment(ctx.template, anchor, crop, hf.origin, cfg.refine)
            residual = round(float(reg.final_residual), 9) if np.isfinite(reg.final_residual) else None
            entry["registration"] = {"converged": bool(reg.converged), "iterations": int(reg.iterations),
                                     "residual": residual,
                                     "message": reg.message, "crop_points": len(crop)}
            entry["scale"] = round(final.scale, 9)
            entry["pose"] = _rnd(final.matrix)
            faces.append((texture_id, extract_face(ctx.template, final, pid, frame, reg, texture_id), entry))
        except AnonError as exc:
            entry["error"] = f"{type(exc).__name__}: {exc}"
            record["errors"].append(f"person {pid}: {entry['error']}")
    vis = cfg.visibility
    for cam in ctx.rig:
        if cam.id not in images:
            continue
        img = images[cam.id]
        for texture_id, face, entry in faces:
            pid = face.person_id
            with _timed(timings, "render"):
                depth = depths.get(cam.id)
                if depth is not None:
                    verdict = check_visibility(face, cam, depth, vis.tau, vis.quorum,
                                               vis.front_facing_only and not cfg.faithful)
                else:
                    verdict = UNKNOWN_DEPTH
                face.visibility[cam.id] = verdict
                entry["verdicts"][cam.id] = verdict
                clip = cfg.render.depth_clip and not cfg.faithful
                # a face turned away is only safe to draw when the head clips it
                if verdict not in RENDERABLE or (verdict == FACING_AWAY and not clip):
                    continue
                rendered = rasterize_face(face, ctx.textures[texture_id % len(ctx.textures)], cam, depth,
                                          vis.tau, clip, cfg.render.bilinear,
                                          min_pixels=cfg.render.min_face_pixels)
            if rendered.empty:
                continue
            entry["boxes"][cam.id] = list(rendered.bbox.as_xywh())
            detections.append((Detection(frame, cam.id, rendered.bbox, pid), verdict))
            with _timed(timings, "blend"):
                if cfg.backend == "mesh_poisson":
                    img, rep = poisson_blend(img, rendered, cfg.blend)
                    if rep.fallback:
                        record["errors"].append(f"{cam.id} person {pid}: Poisson solver missed tolerance, patch copied")
                else:
                    img = obfuscate(img, rendered.bbox, cfg.backend)
        with _timed(timings, "io"):
            io.write_color(cfg.output / "color" / cam.id / io.frame_name(frame, "png"), img)
    timings["wall"] = time.perf_counter() - t_start
    return record, detections, timings


# -- runs -----------------------------------------------------------------------

@dataclass
class RunManifest:
    frames: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    template: dict = field(default_factory=dict)
    pass1_seconds: float = 0.0
    wall_seconds: float = 0.0

    @property
    def n_errors(self) -> int:
        return sum(len(f["errors"]) for f in self.frames)

    @property
    def n_faces(self) -> int:
        return sum(len(f["faces"]) for f in self.frames)

    def write(self, out: Path) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        body = {"frames": self.frames, "n_frames": len(self.frames), "n_errors": self.n_errors,
                "n_faces": self.n_faces, "config": self.config,
                "template": self.template}
        (out / "manifest.json").write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")
        logs = out / "logs"
        logs.mkdir(exist_ok=True)
        timing = {"pass1_seconds": self.pass1_seconds, "wall_seconds": self.wall_seconds,
                  "per_frame": self.timings}
        (logs / "timing.json").write_text(json.dumps(timing, indent=1, sort_keys=True) + "\n")


def _relative_config(cfg: PipelineConfig) -> dict:
    """Config for the manifest. Input paths are stored relative to the input
    root and the root and output locations are left out, so a run hashes the
    same wherever its inputs and outputs live."""
    d = cfg.to_dict()
    for k in ("workers", "root", "output"):  # scheduling and location only
        d.pop(k)
    for k in ("calibration", "color", "depth", "keypoints", "poses3d", "template_obj", "texture_dir"):
        if isinstance(d[k], str):
            d[k] = os.path.relpath(d[k], cfg.root)
    return d


def run_anonymize(cfg: PipelineConfig) -> RunManifest:
    cfg.validate()
    t0 = time.perf_counter()
    ctx = build_context(cfg)
    frames = frame_indices(cfg, ctx.rig)
    tracks, errors, pass1 = build_tracks(ctx, frames)
    jobs = []
    for f in frames:
        persons = []
        for tr in tracks:
            pose = tr.at(f)
            if pose is not None:
                persons.append((tr.person_id, tr.texture_id, pose))
        jobs.append((f, persons, errors[f]))
    cfg.output.mkdir(parents=True, exist_ok=True)
    work = partial(process_frame, ctx)
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            results = list(ex.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    tpl = {"n_vertices": len(ctx.template.vertices), "probe_vertices": ctx.template.probe_vertices.tolist()}
    manifest = RunManifest(config=_relative_config(cfg), template=tpl, pass1_seconds=pass1)
    rows = []
    share = pass1 / max(len(frames), 1)
    for rec, dets, tim in results:
        tim["pose"] += share
        tim["wall"] += share
        manifest.frames.append(rec)
        manifest.timings.append({"frame": rec["frame"], **{k: round(v, 6) for k, v in tim.items()}})
        rows += dets
    io.write_detections(cfg.output / "detections.csv", rows)
    manifest.wall_seconds = time.perf_counter() - t0
    manifest.write(cfg.output)
    return manifest


def run_evaluate(detections_path, annotations_path, iou_threshold: float = 0.4, out=None, faithful: bool = False,
                 original_dir=None, anonymized_dir=None) -> MetricsReport:
    """Score a detection table against annotations; optionally add SSIM
    between matching original and anonymized frames."""
    dets = io.read_detections(detections_path)
    anns = io.read_annotations(annotations_path)
    report = evaluate(dets, anns, iou_threshold, ignore_occluded=not faithful)
    if original_dir is not None and anonymized_dir is not None:
        pairs = []
        for p in sorted(Path(anonymized_dir).glob("*/*.png")):
            q = Path(original_dir) / p.parent.name / p.name
            if q.exists():
                pairs.append((io.read_color(q), io.read_color(p)))
        report.ssim = ssim_summary(pairs)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
        (out / "report.txt").write_text(report.to_text())
    return report


def inspect_frame(cfg: PipelineConfig, frame: int, out: Path) -> dict:
    """Process one frame and write overlays with boxes, verdicts and probe
    points next to a diagnostics JSON."""
    import cv2

    cfg = replace(cfg, output=Path(out)).validate()
    ctx = build_context(cfg)
    frames = frame_indices(cfg, ctx.rig)
    if frame not in frames:
        raise ConfigInvalid(f"frame {frame} not found")
    tracks, errors, _ = build_tracks(ctx, frames)
    persons = [(t.person_id, t.texture_id, t.at(frame)) for t in tracks if t.at(frame) is not None]
    record, _, timings = process_frame(ctx, (frame, persons, errors[frame]))
    colors = {"visible": (0, 255, 0), "unknown_depth": (255, 255, 0), "facing_away": (0, 160, 255),
              "occluded": (255, 0, 0),
              "out_of_frame": (128, 128, 128)}
    for cam in ctx.rig:
        p = cfg.color / cam.id / io.frame_name(frame, "png")
        if not p.exists():
            continue
        img = io.read_color(p)
        for entry in record["faces"]:
            if "pose" not in entry:
                continue
            m = np.asarray(entry["pose"]).reshape(4, 4)
            probes = ctx.template.vertices[ctx.template.probe_vertices] @ m[:3, :3].T + m[:3, 3]
            px, z = cam.project(probes)
            col = colors.get(entry["verdicts"].get(cam.id), (255, 0, 255))
            for (x, y), zz in zip(px, z):
                if zz > 0 and 0 <= x < cam.width and 0 <= y < cam.height:
                    cv2.circle(img, (int(round(x)), int(round(y))), 2, col, -1)
            box = entry["boxes"].get(cam.id)
            if box:
                x, y, w, h = (int(v) for v in box)
                cv2.rectangle(img, (x, y), (x + w - 1, y + h - 1), col, 1)
                cv2.putText(img, f"{entry['person_id']} {entry['verdicts'][cam.id]}", (x, max(y - 3, 8)),
                            cv2.FONT_HERSHEY_SIMPLEX, 0.35, col, 1)
        io.write_color(Path(out) / "overlays" / cam.id / io.frame_name(frame, "png"), img)
    info = {**record, "timings": {k: round(v, 4) for k, v in timings.items()}}
    (Path(out) / "diagnostics.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
    return info
