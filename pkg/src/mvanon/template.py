"""Canonical head template: mesh, landmarks, face region, visibility probes,
and the replacement textures.

Canonical head frame: origin at the head centre, +x towards the person's
right, +y forward (out of the face), +z up. Units are metres.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from .errors import ParseError

LANDMARK_NAMES = ("nose", "left_eye", "right_eye", "left_ear", "right_ear")
N_PROBES = 20

# Ellipsoid half-axes (x: half-width, y: half-depth, z: half-height).
HEAD_AXES = (0.078, 0.095, 0.115)


@dataclass(frozen=True)
class TemplateMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    uvs: np.ndarray
    landmarks: dict
    face_submesh: Optional[np.ndarray]
    probe_vertices: np.ndarray
    normals: np.ndarray = field(default=None)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.triangles, dtype=np.int64)
        n = len(v)
        if f.ndim != 2 or f.shape[1] != 3 or f.min() < 0 or f.max() >= n:
            raise ValueError("triangle indices out of range")
        area = np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)
        if np.any(area <= 1e-14):
            raise ValueError("degenerate triangle in template")
        for name, idx in self.landmarks.items():
            if not 0 <= idx < n:
                raise ValueError(f"landmark {name} out of range")
        probes = np.asarray(self.probe_vertices, dtype=np.int64)
        if self.face_submesh is not None:
            face = np.asarray(self.face_submesh, dtype=np.int64)
            if face.min() < 0 or face.max() >= n:
                raise ValueError("face_submesh index out of range")
            if len(probes) != N_PROBES or not np.isin(probes, face).all():
                raise ValueError(f"need exactly {N_PROBES} probe vertices inside the face region")
            object.__setattr__(self, "face_submesh", face)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)
        object.__setattr__(self, "uvs", np.asarray(self.uvs, dtype=np.float64))
        object.__setattr__(self, "probe_vertices", probes)
        object.__setattr__(self, "landmarks", dict(self.landmarks))
        if self.normals is None:
            object.__setattr__(self, "normals", vertex_normals(v, f))

    def landmark_points(self, names=LANDMARK_NAMES) -> np.ndarray:
        return self.vertices[[self.landmarks[n] for n in names]]

    def face_triangles(self) -> np.ndarray:
        """Triangles re-indexed into the face submesh vertex list."""
        face = self.face_submesh
        lut = np.full(len(self.vertices), -1)
        lut[face] = np.arange(len(face))
        keep = np.all(lut[self.triangles] >= 0, axis=1)
        return lut[self.triangles[keep]]


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    v0 = vertices[triangles[:, 0]]
    fn = np.cross(vertices[triangles[:, 1]] - v0, vertices[triangles[:, 2]] - v0)
    vn = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(vn, triangles[:, k], fn)
    ln = np.linalg.norm(vn, axis=1, keepdims=True)
    return vn / np.where(ln > 0, ln, 1.0)


def _bump(d, direction, height, width):
    u = np.asarray(direction, dtype=np.float64)
    u = u / np.linalg.norm(u)
    ang = np.arccos(np.clip(d @ u, -1, 1))
    return height * np.exp(-0.5 * (ang / width) ** 2)


# feature directions in the canonical frame (unit vectors from the head centre)
_NOSE_DIR = (0.0, 1.0, -0.12)
_EYE_DIR = (0.36, 1.0, 0.22)
_EAR_DIR = (1.0, -0.05, 0.0)
_MOUTH_DIR = (0.0, 1.0, -0.5)


def _radius(d: np.ndarray) -> np.ndarray:
    a, b, c = HEAD_AXES
    r = 1.0 / np.sqrt((d[:, 0] / a) ** 2 + (d[:, 1] / b) ** 2 + (d[:, 2] / c) ** 2)
    r = r + _bump(d, _NOSE_DIR, 0.024, 0.11)
    r = r + _bump(d, (0.0, 1.0, 0.45), 0.006, 0.25)  # brow
    r = r + _bump(d, (0.0, 1.0, -0.75), 0.010, 0.2)  # chin
    for sx in (-1.0, 1.0):
        r = r - _bump(d, (sx * _EYE_DIR[0], _EYE_DIR[1], _EYE_DIR[2]), 0.006, 0.08)
        r = r + _bump(d, (sx * _EAR_DIR[0], _EAR_DIR[1], _EAR_DIR[2]), 0.014, 0.14)
    return r


def _face_uv(p: np.ndarray) -> np.ndarray:
    u = 0.5 + p[:, 0] / 0.17
    v = 0.5 - (p[:, 2] + 0.01) / 0.24
    return np.clip(np.stack([u, v], axis=1), 0.0, 1.0)


def _nearest_dir(d: np.ndarray, direction) -> int:
    u = np.asarray(direction, dtype=np.float64)
    return int(np.argmax(d @ (u / np.linalg.norm(u))))


def _farthest_point_sampling(points: np.ndarray, n: int, start: int) -> np.ndarray:
    chosen = [start]
    dist = np.linalg.norm(points - points[start], axis=1)
    for _ in range(n - 1):
        k = int(np.argmax(dist))
        chosen.append(k)
        dist = np.minimum(dist, np.linalg.norm(points - points[k], axis=1))
    return np.asarray(chosen)


def build_head_template(n_lat: int = 48, n_lon: int = 72) -> TemplateMesh:
    """Procedural head: an ellipsoid with nose, brow, chin, eye sockets and ears."""
    theta = np.linspace(0, np.pi, n_lat + 2)[1:-1]
    phi = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1).reshape(-1, 3)
    dirs = np.vstack([[0.0, 0.0, 1.0], dirs, [0.0, 0.0, -1.0]])
    verts = dirs * _radius(dirs)[:, None]

    def ring(i, k):
        return 1 + i * n_lon + (k % n_lon)

    tris = []
    bottom = len(verts) - 1
    for k in range(n_lon):
        tris.append((0, ring(0, k), ring(0, k + 1)))
        tris.append((bottom, ring(n_lat - 1, k + 1), ring(n_lat - 1, k)))
    for i in range(n_lat - 1):
        for k in range(n_lon):
            a, b = ring(i, k), ring(i, k + 1)
            c, d = ring(i + 1, k), ring(i + 1, k + 1)
            tris.append((a, c, b))
            tris.append((b, c, d))
    tris = np.asarray(tris, dtype=np.int64)
    # outward winding (the surface is star-shaped about the origin)
    cen = verts[tris].mean(axis=1)
    fn = np.cross(verts[tris[:, 1]] - verts[tris[:, 0]], verts[tris[:, 2]] - verts[tris[:, 0]])
    flip = np.sum(fn * cen, axis=1) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]

    landmarks = {
        "nose": _nearest_dir(dirs, _NOSE_DIR),
        "left_eye": _nearest_dir(dirs, (-_EYE_DIR[0], _EYE_DIR[1], _EYE_DIR[2])),
        "right_eye": _nearest_dir(dirs, _EYE_DIR),
        "left_ear": _nearest_dir(dirs, (-_EAR_DIR[0], _EAR_DIR[1], _EAR_DIR[2])),
        "right_ear": _nearest_dir(dirs, _EAR_DIR),
    }
    face = np.nonzero((dirs[:, 1] >= 0.45) & (dirs[:, 2] >= -0.8) & (dirs[:, 2] <= 0.5))[0]
    inner = face[dirs[face, 1] >= 0.8]
    start = int(np.nonzero(inner == landmarks["nose"])[0][0])
    probes = inner[_farthest_point_sampling(verts[inner], N_PROBES, start)]
    return TemplateMesh(verts, tris, _face_uv(verts), landmarks, face, np.sort(probes))


@lru_cache(maxsize=None)
def canonical_template() -> TemplateMesh:
    return build_head_template()


# -- textures ---------------------------------------------------------------

TEXTURE_SIZE = 256
SKIN_TONES = ((224, 189, 160), (198, 150, 118), (150, 105, 80), (240, 210, 185))


def _uv_px(template: TemplateMesh, idx: int, size: int) -> tuple[int, int]:
    u, v = template.uvs[idx]
    return int(round(u * (size - 1))), int(round(v * (size - 1)))


def make_texture(kind: str = "masked", variant: int = 0, template: Optional[TemplateMesh] = None,
                 size: int = TEXTURE_SIZE) -> np.ndarray:
    """RGB replacement texture in the template's face uv layout.

    ``kind`` is ``"masked"`` (surgical mask over nose and mouth) or
    ``"maskless"``; ``variant`` picks the skin tone.
    """
    if kind not in ("masked", "maskless"):
        raise ValueError(f"unknown texture kind {kind!r}")
    t = template or canonical_template()
    skin = SKIN_TONES[variant % len(SKIN_TONES)]
    img = np.zeros((size, size, 3), np.uint8)
    img[:] = skin
    # mild vertical shading so gradients exist for blending
    shade = np.linspace(1.06, 0.9, size)[:, None, None]
    img = np.clip(img * shade, 0, 255).astype(np.uint8)
    nose = _uv_px(t, t.landmarks["nose"], size)
    le = _uv_px(t, t.landmarks["left_eye"], size)
    re = _uv_px(t, t.landmarks["right_eye"], size)
    eye_r = max(size // 40, 2)
    for (x, y) in (le, re):
        cv2.ellipse(img, (x, y), (3 * eye_r, 2 * eye_r), 0, 0, 360, (245, 245, 245), -1)
        cv2.circle(img, (x, y), eye_r, (60, 40, 30), -1)
        cv2.line(img, (x - 3 * eye_r, y - 4 * eye_r), (x + 3 * eye_r, y - 4 * eye_r), (70, 50, 40), max(eye_r // 2, 1))
    mouth_y = nose[1] + (nose[1] - le[1])
    if kind == "maskless":
        cv2.line(img, (nose[0] - 2, le[1] + 2), (nose[0] - 4, nose[1]), (0.8 * np.array(skin)).astype(int).tolist(), 2)
        cv2.ellipse(img, (nose[0], mouth_y), (5 * eye_r, 2 * eye_r), 0, 0, 180, (150, 60, 60), -1)
    else:
        top = nose[1] - (nose[1] - le[1]) // 3
        cv2.rectangle(img, (0, top), (size - 1, size - 1), (170, 205, 225), -1)
        for k in range(3):
            y = top + (k + 1) * (size - top) // 5
            cv2.line(img, (le[0] - 8 * eye_r, y), (re[0] + 8 * eye_r, y), (140, 180, 205), 2)
    return img


# -- file IO ----------------------------------------------------------------

def save_template(template: TemplateMesh, obj_path, manifest_path=None) -> None:
    obj_path = Path(obj_path)
    manifest_path = Path(manifest_path) if manifest_path else obj_path.with_suffix(".json")
    obj_path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# head template"]
    lines += [f"v {x:.9f} {y:.9f} {z:.9f}" for x, y, z in template.vertices]
    lines += [f"vt {u:.9f} {1.0 - v:.9f}" for u, v in template.uvs]
    lines += [f"f {a + 1}/{a + 1} {b + 1}/{b + 1} {c + 1}/{c + 1}" for a, b, c in template.triangles]
    obj_path.write_text("\n".join(lines) + "\n")
    manifest = {
        "landmarks": {k: int(v) for k, v in template.landmarks.items()},
        "face_submesh": [int(i) for i in template.face_submesh] if template.face_submesh is not None else None,
        "probe_vertices": [int(i) for i in template.probe_vertices],
    }
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_template(obj_path, manifest_path=None) -> TemplateMesh:
    obj_path = Path(obj_path)
    manifest_path = Path(manifest_path) if manifest_path else obj_path.with_suffix(".json")
    verts, uvs, tris = [], [], []
    for lineno, line in enumerate(obj_path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                uvs.append([float(parts[1]), 1.0 - float(parts[2])])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ValueError("only triangles are supported")
                tris.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
        except (ValueError, IndexError) as exc:
            raise ParseError(str(exc), obj_path, lineno) from exc
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, manifest_path, exc.lineno) from exc
    if len(uvs) != len(verts):
        uvs = _face_uv(np.asarray(verts))
    return TemplateMesh(
        np.asarray(verts),
        np.asarray(tris),
        np.asarray(uvs),
        manifest["landmarks"],
        manifest.get("face_submesh"),
        manifest.get("probe_vertices", []),
    )


def sample_surface(vertices: np.ndarray, triangles: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform random points on a triangle mesh."""
    v0, v1, v2 = (vertices[triangles[:, k]] for k in range(3))
    area = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    tri = rng.choice(len(triangles), size=n, p=area / area.sum())
    a, b = rng.random(n), rng.random(n)
    swap = a + b > 1
    a[swap], b[swap] = 1 - a[swap], 1 - b[swap]
    return v0[tri] + a[:, None] * (v1[tri] - v0[tri]) + b[:, None] * (v2[tri] - v0[tri])
