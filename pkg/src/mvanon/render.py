"""Software rasterization of posed meshes, detection boxes, Poisson
harmonization and the conventional obfuscation backends."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import cv2
import numpy as np

from .errors import DegeneratePose, SolverDiverged
from .geometry import BBox2D, Camera
from .pointcloud import DepthFrame

NEAR_PLANE = 1e-3


# -- rasterization ------------------------------------------------------------

@dataclass
class Fragments:
    """Winning fragment per pixel after the z-buffer test.

    ``pixels`` are (x, y) integer coordinates, ``bary`` the
    perspective-correct barycentrics of each pixel in triangle ``tri``.
    """

    pixels: np.ndarray
    depth: np.ndarray
    tri: np.ndarray
    bary: np.ndarray
    triangles: np.ndarray  # (T, 3) vertex indices into the clipped vertex list
    n_front: int = 0

    def __len__(self):
        return len(self.depth)


def _clip_near(vc: np.ndarray, tris: np.ndarray, attrs: np.ndarray, near: float):
    """Clip triangles against ``z = near`` in camera space.

    ``attrs`` are per-vertex attributes interpolated linearly in 3D (which is
    exact for attributes affine on the triangle). Returns new vertices,
    attributes and triangles.
    """
    z = vc[tris, 2]
    inside = z >= near
    full = inside.all(axis=1)
    partial = inside.any(axis=1) & ~full
    if not partial.any():
        return vc, attrs, tris[full]
    verts, att, out = [vc], [attrs], [tris[full]]
    n = len(vc)
    for t in np.nonzero(partial)[0]:
        poly_p, poly_a = [], []
        idx = tris[t]
        for k in range(3):
            a, b = idx[k], idx[(k + 1) % 3]
            pa, pb = vc[a], vc[b]
            ina, inb = pa[2] >= near, pb[2] >= near
            if ina:
                poly_p.append(pa)
                poly_a.append(attrs[a])
            if ina != inb:
                s = (near - pa[2]) / (pb[2] - pa[2])
                poly_p.append(pa + s * (pb - pa))
                poly_a.append(attrs[a] + s * (attrs[b] - attrs[a]))
        base = n
        verts.append(np.asarray(poly_p))
        att.append(np.asarray(poly_a))
        for k in range(1, len(poly_p) - 1):
            out.append(np.array([[base, base + k, base + k + 1]]))
        n += len(poly_p)
    return np.concatenate(verts), np.concatenate(att), np.concatenate(out).astype(np.int64)


def rasterize(vertices_world: np.ndarray, triangles: np.ndarray, camera: Camera, attrs: Optional[np.ndarray] = None,
              cull_backfaces: bool = True, near: float = NEAR_PLANE):
    """Z-buffered rasterization of a triangle mesh into ``camera``.

    Pixel (x, y) is covered when its centre lies inside or on the edge of
    the projected triangle. Returns ``(fragments, attrs)`` where ``attrs`` is
    the (possibly clipped) per-vertex attribute array matching
    ``fragments.triangles``.
    """
    v = np.asarray(vertices_world, dtype=np.float64)
    tris = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    attrs = np.zeros((len(v), 0)) if attrs is None else np.asarray(attrs, dtype=np.float64).reshape(len(v), -1)
    vc = camera.world_to_camera(v)
    if cull_backfaces and len(tris):
        a, b, c = vc[tris[:, 0]], vc[tris[:, 1]], vc[tris[:, 2]]
        n = np.cross(b - a, c - a)
        tris = tris[np.sum(n * a, axis=1) < 0]
    vc, attrs, tris = _clip_near(vc, tris, attrs, near)
    empty = Fragments(np.zeros((0, 2), np.int64), np.zeros(0), np.zeros(0, np.int64), np.zeros((0, 3)), tris, len(tris))
    if len(tris) == 0:
        return empty, attrs
    k = camera.intrinsics
    z = vc[:, 2]
    sx = k.fx * vc[:, 0] / z + k.cx
    sy = k.fy * vc[:, 1] / z + k.cy
    tx, ty = sx[tris], sy[tris]
    x0 = np.clip(np.ceil(tx.min(axis=1)), 0, k.width).astype(np.int64)
    x1 = np.clip(np.floor(tx.max(axis=1)) + 1, 0, k.width).astype(np.int64)
    y0 = np.clip(np.ceil(ty.min(axis=1)), 0, k.height).astype(np.int64)
    y1 = np.clip(np.floor(ty.max(axis=1)) + 1, 0, k.height).astype(np.int64)
    bw, bh = np.maximum(x1 - x0, 0), np.maximum(y1 - y0, 0)
    area2 = (tx[:, 1] - tx[:, 0]) * (ty[:, 2] - ty[:, 0]) - (tx[:, 2] - tx[:, 0]) * (ty[:, 1] - ty[:, 0])
    keep = (bw * bh > 0) & (np.abs(area2) > 1e-12)
    tid = np.nonzero(keep)[0]
    if len(tid) == 0:
        return empty, attrs
    counts = (bw * bh)[tid]
    t = np.repeat(tid, counts)
    offs = np.arange(len(t)) - np.repeat(np.cumsum(counts) - counts, counts)
    px = x0[t] + offs % bw[t]
    py = y0[t] + offs // bw[t]
    # screen-space barycentrics
    ax, ay = tx[t], ty[t]
    l1 = ((px - ax[:, 0]) * (ay[:, 2] - ay[:, 0]) - (ax[:, 2] - ax[:, 0]) * (py - ay[:, 0])) / area2[t]
    l2 = ((ax[:, 1] - ax[:, 0]) * (py - ay[:, 0]) - (px - ax[:, 0]) * (ay[:, 1] - ay[:, 0])) / area2[t]
    l0 = 1.0 - l1 - l2
    lam = np.stack([l0, l1, l2], axis=1)
    inside = np.all(lam >= -1e-12, axis=1)
    t, px, py, lam = t[inside], px[inside], py[inside], lam[inside]
    if len(t) == 0:
        return empty, attrs
    # perspective-correct weights and depth
    invz = lam / z[tris[t]]
    s = invz.sum(axis=1)
    depth = 1.0 / s
    bary = invz / s[:, None]
    key = py * k.width + px
    order = np.lexsort((t, depth, key))
    key_sorted = key[order]
    first = order[np.concatenate([[True], key_sorted[1:] != key_sorted[:-1]])]
    frags = Fragments(np.stack([px[first], py[first]], axis=1), depth[first], t[first], bary[first], tris, len(tris))
    return frags, attrs


def sample_bilinear(texture: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup; u runs along columns, v along rows, both in [0, 1]."""
    h, w = texture.shape[:2]
    x = np.clip(uv[:, 0], 0, 1) * (w - 1)
    y = np.clip(uv[:, 1], 0, 1) * (h - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    fx, fy = (x - x0)[:, None], (y - y0)[:, None]
    tex = texture.astype(np.float64)
    top = tex[y0, x0] * (1 - fx) + tex[y0, x1] * fx
    bot = tex[y1, x0] * (1 - fx) + tex[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def sample_nearest(texture: np.ndarray, uv: np.ndarray) -> np.ndarray:
    h, w = texture.shape[:2]
    x = np.rint(np.clip(uv[:, 0], 0, 1) * (w - 1)).astype(np.int64)
    y = np.rint(np.clip(uv[:, 1], 0, 1) * (h - 1)).astype(np.int64)
    return texture[y, x].astype(np.float64)


# -- rendered faces -----------------------------------------------------------

@dataclass
class RenderedFace:
    """Rendered footprint of one face in one camera.

    ``mask`` and ``patch`` cover the ``bbox`` window only; both are empty
    (and ``bbox`` is None) when nothing was drawn.
    """

    camera_id: str
    mask: np.ndarray
    patch: np.ndarray
    bbox: Optional[BBox2D]
    mean_depth: float = float("nan")
    person_id: int = -1
    note: str = ""

    @property
    def empty(self) -> bool:
        return self.bbox is None

    def full_mask(self, height: int, width: int) -> np.ndarray:
        m = np.zeros((height, width), bool)
        if self.bbox is not None:
            b = self.bbox
            m[b.y_min:b.y_max, b.x_min:b.x_max] = self.mask
        return m

    def pixels(self) -> np.ndarray:
        """Covered pixels as (x, y) rows in full-frame coordinates."""
        if self.bbox is None:
            return np.zeros((0, 2), np.int64)
        ys, xs = np.nonzero(self.mask)
        return np.stack([xs + self.bbox.x_min, ys + self.bbox.y_min], axis=1)


def bbox_of_mask(mask) -> Optional[BBox2D]:
    """Tight half-open box of a boolean raster or of an (N, 2) list of (x, y) pixels."""
    m = np.asarray(mask)
    if m.dtype == bool and m.ndim == 2:
        ys, xs = np.nonzero(m)
    else:
        m = m.reshape(-1, 2)
        xs, ys = m[:, 0], m[:, 1]
    if len(xs) == 0:
        return None
    return BBox2D(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def _empty_render(camera_id, person_id, note=""):
    return RenderedFace(camera_id, np.zeros((0, 0), bool), np.zeros((0, 0, 3), np.uint8), None, float("nan"), person_id,
                        note)


def rasterize_face(face, texture: np.ndarray, camera: Camera, scene_depth: Optional[DepthFrame] = None,
                   tau: float = 0.05, depth_clip: bool = True, bilinear: bool = True,
                   strict: bool = False, min_pixels: int = 0) -> RenderedFace:
    """Texture-mapped render of a posed face.

    With ``depth_clip`` set, pixels where the face lies more than ``tau``
    behind the measured scene depth are dropped (depth holes never clip).
    A face whose unclipped footprint covers fewer than ``min_pixels`` is not
    drawn.
    When every triangle is behind the camera the result is empty, or
    ``DegeneratePose`` is raised if ``strict``.
    """
    frags, uv = rasterize(face.vertices, face.triangles, camera, face.uvs)
    if frags.n_front == 0 and len(face.triangles):
        behind = np.all(camera.world_to_camera(face.vertices)[:, 2] < NEAR_PLANE)
        if behind:
            if strict:
                raise DegeneratePose("face is entirely behind the camera")
            return _empty_render(camera.id, face.person_id, "behind camera")
    if len(frags) < min_pixels:
        return _empty_render(camera.id, face.person_id, "below minimum size")
    if len(frags) and depth_clip and scene_depth is not None:
        d = scene_depth.values[frags.pixels[:, 1], frags.pixels[:, 0]]
        keep = (d == scene_depth.missing_value) | (frags.depth <= d / 1000.0 + tau)
        frags = Fragments(frags.pixels[keep], frags.depth[keep], frags.tri[keep], frags.bary[keep],
                          frags.triangles, frags.n_front)
    if len(frags) == 0:
        return _empty_render(camera.id, face.person_id, "no pixels")
    fuv = np.einsum("nk,nkc->nc", frags.bary, uv[frags.triangles[frags.tri]])
    colors = sample_bilinear(texture, fuv) if bilinear else sample_nearest(texture, fuv)
    box = bbox_of_mask(frags.pixels)
    mask = np.zeros((box.height, box.width), bool)
    patch = np.zeros((box.height, box.width, 3), np.uint8)
    lx, ly = frags.pixels[:, 0] - box.x_min, frags.pixels[:, 1] - box.y_min
    mask[ly, lx] = True
    patch[ly, lx] = np.clip(np.rint(colors), 0, 255).astype(np.uint8)
    return RenderedFace(camera.id, mask, patch, box, float(frags.depth.mean()), face.person_id)


# -- Poisson blending ---------------------------------------------------------

@dataclass(frozen=True)
class BlendConfig:
    alpha: float = 0.725
    target_preblur: Optional[int] = None
    solver_tol: float = 1e-6
    solver_max_iters: int = 10000

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.target_preblur is not None and (self.target_preblur < 1 or self.target_preblur % 2 == 0):
            raise ValueError("target_preblur must be a positive odd kernel size")
        if self.solver_tol <= 0 or self.solver_max_iters < 1:
            raise ValueError("solver_tol and solver_max_iters must be positive")


@dataclass
class BlendReport:
    iterations: int = 0
    residual: float = 0.0
    residuals: list = field(default_factory=list)
    converged: bool = True
    fallback: bool = False
    n_unknowns: int = 0


_NEIGHBOURS = ((0, 1), (0, -1), (1, 0), (-1, 0))


def interior_of(mask: np.ndarray) -> np.ndarray:
    """Mask pixels whose four neighbours are all in the mask and that do not
    sit on the raster edge."""
    m = np.asarray(mask, bool)
    inner = np.zeros_like(m)
    inner[1:-1, 1:-1] = m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return inner


class PoissonSystem:
    """Five-point Laplacian over the unknown pixels of a mask, matrix-free.

    ``apply(f)`` computes ``4 f_p - sum of unknown neighbours``; known
    neighbours move to the right-hand side.
    """

    def __init__(self, unknown: np.ndarray):
        self.unknown = np.asarray(unknown, bool)
        self.ys, self.xs = np.nonzero(self.unknown)
        h, w = self.unknown.shape
        lut = np.full((h, w), -1, np.int64)
        lut[self.ys, self.xs] = np.arange(len(self.ys))
        self.lut = lut
        self.nbr = np.stack([lut[self.ys + dy, self.xs + dx] for dy, dx in _NEIGHBOURS], axis=1)

    def __len__(self):
        return len(self.ys)

    def apply(self, f: np.ndarray) -> np.ndarray:
        out = 4.0 * f
        for k in range(4):
            j = self.nbr[:, k]
            ok = j >= 0
            out[ok] -= f[j[ok]]
        return out

    def rhs(self, boundary: np.ndarray, source: np.ndarray, target: np.ndarray, alpha: float) -> np.ndarray:
        """Right-hand side for guidance ``alpha grad(source) + (1 - alpha) grad(target)``
        and Dirichlet values from ``boundary`` (all (H, W, C) float)."""
        y, x = self.ys, self.xs
        b = np.zeros((len(y), boundary.shape[2]))
        for k, (dy, dx) in enumerate(_NEIGHBOURS):
            qy, qx = y + dy, x + dx
            b += alpha * (source[y, x] - source[qy, qx]) + (1 - alpha) * (target[y, x] - target[qy, qx])
            known = self.nbr[:, k] < 0
            b[known] += boundary[qy[known], qx[known]]
        return b


def conjugate_residual(system: PoissonSystem, b: np.ndarray, x0: np.ndarray, tol: float, max_iters: int):
    """Conjugate Residual iterations, one independent solve per column.

    CR minimises the residual norm over a growing Krylov space, so the
    residual of each column is non-increasing. Convergence is confirmed on
    the true residual ``b - A x``; if the recursively updated one has drifted
    below it, the iteration restarts from the true residual. Returns
    ``(x, iterations, residual_history)`` with residuals relative to ``|b|``.
    """
    x = x0.copy()
    r = b - system.apply(x)
    bnorm = np.linalg.norm(b, axis=0)
    bnorm[bnorm == 0] = 1.0
    hist = [float(np.max(np.linalg.norm(r, axis=0) / bnorm))]
    if hist[0] <= tol:
        return x, 0, hist
    p = r.copy()
    ar = system.apply(r)
    ap = ar.copy()
    rar = np.sum(r * ar, axis=0)
    it = 0
    for it in range(1, max_iters + 1):
        apap = np.sum(ap * ap, axis=0)
        a = np.divide(rar, apap, out=np.zeros_like(rar), where=apap > 0)
        x += a * p
        r -= a * ap
        hist.append(float(np.max(np.linalg.norm(r, axis=0) / bnorm)))
        if hist[-1] <= tol:
            r = b - system.apply(x)
            hist[-1] = float(np.max(np.linalg.norm(r, axis=0) / bnorm))
            if hist[-1] <= tol:
                break
            p = r.copy()
            ap = system.apply(r)
            rar = np.sum(r * ap, axis=0)
            continue
        ar = system.apply(r)
        rar_new = np.sum(r * ar, axis=0)
        beta = np.divide(rar_new, rar, out=np.zeros_like(rar), where=rar != 0)
        rar = rar_new
        p = r + beta * p
        ap = ar + beta * ap
    return x, it, hist


def solve_poisson(target: np.ndarray, source: np.ndarray, mask: np.ndarray, alpha: float = 0.725,
                  tol: float = 1e-6, max_iters: int = 10000, preblur: Optional[int] = None,
                  x0: Optional[np.ndarray] = None):
    """Float solve of the mixed-gradient Poisson problem on one raster.

    ``target`` and ``source`` are (H, W) or (H, W, C). The unknowns are the
    interior of ``mask``; the remaining mask pixels and everything outside
    keep ``target``. Returns ``(result, BlendReport)``; the result is only
    meaningful if the report says converged.
    """
    tgt = np.asarray(target, dtype=np.float64)
    src = np.asarray(source, dtype=np.float64)
    squeeze = tgt.ndim == 2
    if squeeze:
        tgt, src = tgt[..., None], src[..., None]
    guide_t = tgt
    if preblur:
        guide_t = cv2.GaussianBlur(tgt, (preblur, preblur), 0).reshape(tgt.shape)
    system = PoissonSystem(interior_of(mask))
    out = tgt.copy()
    report = BlendReport(n_unknowns=len(system))
    if len(system):
        b = system.rhs(tgt, src, guide_t, alpha)
        start = tgt[system.ys, system.xs] if x0 is None else np.asarray(x0, dtype=np.float64).reshape(b.shape)
        x, it, hist = conjugate_residual(system, b, start, tol, max_iters)
        report.iterations, report.residuals, report.residual = it, hist, hist[-1]
        report.converged = hist[-1] <= tol
        out[system.ys, system.xs] = x
    return (out[..., 0] if squeeze else out), report


def poisson_blend(frame: np.ndarray, rendered: RenderedFace, cfg: Optional[BlendConfig] = None):
    """Harmonize a rendered face into ``frame``; returns ``(image, report)``.

    Only interior pixels of the face mask change. If the solver misses its
    tolerance the patch is pasted directly and ``report.fallback`` is set.
    """
    cfg = cfg or BlendConfig()
    out = np.array(frame, copy=True)
    if rendered.empty:
        return out, BlendReport()
    b = rendered.bbox
    # pad the window by one pixel of frame so the mask border is well defined
    x0, y0 = max(b.x_min - 1, 0), max(b.y_min - 1, 0)
    x1, y1 = min(b.x_max + 1, frame.shape[1]), min(b.y_max + 1, frame.shape[0])
    mask = rendered.full_mask(frame.shape[0], frame.shape[1])[y0:y1, x0:x1]
    src = np.zeros((y1 - y0, x1 - x0, 3))
    src[b.y_min - y0:b.y_max - y0, b.x_min - x0:b.x_max - x0] = rendered.patch
    win = frame[y0:y1, x0:x1].astype(np.float64)
    # the frame edge is treated as outside the mask so it stays fixed
    edge = np.zeros(frame.shape[:2], bool)
    edge[0, :] = edge[-1, :] = edge[:, 0] = edge[:, -1] = True
    mask = mask & ~edge[y0:y1, x0:x1]
    res, report = solve_poisson(win, src, mask, cfg.alpha, cfg.solver_tol, cfg.solver_max_iters, cfg.target_preblur)
    inner = interior_of(mask)
    if not report.converged:
        report.fallback = True
        res = win.copy()
        res[inner] = src[inner]
    region = out[y0:y1, x0:x1]
    region[inner] = np.clip(np.rint(res[inner]), 0, 255).astype(out.dtype)
    return out, report


def blend_or_raise(frame, rendered, cfg=None):
    """Like :func:`poisson_blend` but raises ``SolverDiverged`` instead of falling back."""
    out, report = poisson_blend(frame, rendered, cfg)
    if report.fallback:
        raise SolverDiverged(f"residual {report.residual:.3g} after {report.iterations} iterations")
    return out, report


# -- conventional obfuscators -------------------------------------------------

def _box_slices(bbox: BBox2D, shape):
    x0, y0 = max(bbox.x_min, 0), max(bbox.y_min, 0)
    x1, y1 = min(bbox.x_max, shape[1]), min(bbox.y_max, shape[0])
    return slice(y0, y1), slice(x0, x1)


def blacken(frame: np.ndarray, bbox: BBox2D) -> np.ndarray:
    out = np.array(frame, copy=True)
    out[_box_slices(bbox, frame.shape)] = 0
    return out


def pixelate(frame: np.ndarray, bbox: BBox2D, block: int = 8) -> np.ndarray:
    """Replace each ``block``x``block`` cell of the box (anchored at its corner) by its mean."""
    out = np.array(frame, copy=True)
    ys, xs = _box_slices(bbox, frame.shape)
    region = out[ys, xs].astype(np.float64)
    h, w = region.shape[:2]
    for y in range(0, h, block):
        for x in range(0, w, block):
            cell = region[y:y + block, x:x + block]
            cell[:] = cell.reshape(-1, cell.shape[-1]).mean(axis=0)
    out[ys, xs] = np.clip(np.rint(region), 0, 255).astype(out.dtype)
    return out


def blur(frame: np.ndarray, bbox: BBox2D, kernel: int = 61) -> np.ndarray:
    """Gaussian blur of the whole frame, copied back inside the box."""
    out = np.array(frame, copy=True)
    ys, xs = _box_slices(bbox, frame.shape)
    blurred = cv2.GaussianBlur(frame, (kernel, kernel), 0)
    out[ys, xs] = blurred[ys, xs]
    return out


BACKENDS = ("mesh_poisson", "blacken", "pixelate_8", "blur_61")


def obfuscate(frame: np.ndarray, bbox: BBox2D, backend: str) -> np.ndarray:
    if backend == "blacken":
        return blacken(frame, bbox)
    if backend == "pixelate_8":
        return pixelate(frame, bbox, 8)
    if backend == "blur_61":
        return blur(frame, bbox, 61)
    raise ValueError(f"unknown box backend {backend!r}")
