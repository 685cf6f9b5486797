"""Detection scoring against ground-truth face boxes and SSIM image quality."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionMismatch, TooSmall
from .geometry import BBox2D

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GTAnnotation:
    frame_index: int
    camera_id: str
    person_id: int
    bbox: BBox2D
    fully_occluded: bool = False


@dataclass(frozen=True)
class Detection:
    frame_index: int
    camera_id: str
    bbox: BBox2D
    person_id: Optional[int] = None


def iou(a: BBox2D, b: BBox2D) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(dets: Sequence[BBox2D], gts: Sequence[BBox2D]) -> np.ndarray:
    m = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            m[i, j] = iou(d, g)
    return m


def greedy_match(ious: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """One-to-one matching by descending IoU among pairs at or above ``threshold``.

    Ties are broken by detection index, then annotation index.
    """
    di, gi = np.nonzero(ious >= threshold)
    order = np.lexsort((gi, di, -ious[di, gi]))
    used_d, used_g, pairs = set(), set(), []
    for k in order:
        d, g = int(di[k]), int(gi[k])
        if d in used_d or g in used_g:
            continue
        used_d.add(d)
        used_g.add(g)
        pairs.append((d, g))
    return pairs


@dataclass
class CameraScore:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    n_gt: int = 0
    ignored: int = 0

    @property
    def precision(self) -> float:
        n = self.tp + self.fp
        return self.tp / n if n else 0.0

    @property
    def precision_undefined(self) -> bool:
        return self.tp + self.fp == 0

    @property
    def recall(self) -> float:
        return self.tp / self.n_gt if self.n_gt else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def add(self, other: "CameraScore"):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.n_gt += other.n_gt
        self.ignored += other.ignored

    def as_dict(self) -> dict:
        d = asdict(self)
        d.update(precision=self.precision, recall=self.recall, f1=self.f1, precision_undefined=self.precision_undefined)
        return d


@dataclass
class MatchResult:
    per_camera: dict
    overall: CameraScore
    # (detection index, annotation index, iou) into the caller's lists
    matches: list
    ignored_detections: list


def _group(items, key):
    out = defaultdict(list)
    for i, it in enumerate(items):
        out[key(it)].append(i)
    return out


def match_and_score(detections: Sequence[Detection], annotations: Sequence[GTAnnotation],
                    iou_threshold: float = 0.4, ignore_occluded: bool = True) -> MatchResult:
    """Per frame and camera greedy matching, then per-camera counts.

    Fully-occluded annotations are never counted as ground truth. With
    ``ignore_occluded`` an unmatched detection overlapping one of them at
    ``iou_threshold`` is neither TP nor FP; without it such a detection is
    a false positive.
    """
    det_groups = _group(detections, lambda d: (d.frame_index, d.camera_id))
    ann_groups = _group(annotations, lambda a: (a.frame_index, a.camera_id))
    cams = sorted({k[1] for k in det_groups} | {k[1] for k in ann_groups})
    per_cam = {c: CameraScore() for c in cams}
    matches, ignored = [], []
    for key in sorted(set(det_groups) | set(ann_groups), key=lambda k: (k[0], str(k[1]))):
        d_idx = det_groups.get(key, [])
        a_idx = ann_groups.get(key, [])
        vis = [j for j in a_idx if not annotations[j].fully_occluded]
        occ = [j for j in a_idx if annotations[j].fully_occluded]
        ious = iou_matrix([detections[i].bbox for i in d_idx], [annotations[j].bbox for j in vis])
        pairs = greedy_match(ious, iou_threshold)
        score = per_cam[key[1]]
        score.n_gt += len(vis)
        score.tp += len(pairs)
        score.fn += len(vis) - len(pairs)
        matched_d = {d for d, _ in pairs}
        for d, g in pairs:
            matches.append((d_idx[d], vis[g], float(ious[d, g])))
        for k, i in enumerate(d_idx):
            if k in matched_d:
                continue
            if ignore_occluded and any(iou(detections[i].bbox, annotations[j].bbox) >= iou_threshold for j in occ):
                score.ignored += 1
                ignored.append(i)
            else:
                score.fp += 1
    overall = CameraScore()
    for s in per_cam.values():
        overall.add(s)
    return MatchResult(per_cam, overall, matches, ignored)


def holistic_recall(detections: Sequence[Detection], annotations: Sequence[GTAnnotation], iou_threshold: float = 0.4,
                    match: Optional[MatchResult] = None, ignore_occluded: bool = True):
    """Fraction of (frame, person) units detected in every camera where the
    person has a visible annotation.

    Returns ``(value, units)`` with ``units[(frame, person)] = detected``.
    Each matched detection inherits the person id of its annotation.
    """
    match = match or match_and_score(detections, annotations, iou_threshold, ignore_occluded)
    hit = {j for _, j, _ in match.matches}
    units: dict = {}
    for j, a in enumerate(annotations):
        if a.fully_occluded:
            continue
        key = (a.frame_index, a.person_id)
        units[key] = units.get(key, True) and (j in hit)
    value = sum(units.values()) / len(units) if units else 0.0
    return value, units


def conjunction_bound(annotations: Sequence[GTAnnotation], match: MatchResult, units: dict) -> dict:
    """For each camera, ``(holistic recall over units visible there, camera recall)``.

    A unit detected in every visible view is in particular detected in
    camera c, so the first value can never exceed the second.
    """
    hit = {j for _, j, _ in match.matches}
    out = {}
    by_cam = _group(annotations, lambda a: a.camera_id)
    for cam, idx in by_cam.items():
        vis = [j for j in idx if not annotations[j].fully_occluded]
        if not vis:
            continue
        keys = {(annotations[j].frame_index, annotations[j].person_id) for j in vis}
        h = sum(units[k] for k in keys) / len(keys)
        r = sum(j in hit for j in vis) / len(vis)
        out[cam] = (h, r)
    return out


# -- SSIM ---------------------------------------------------------------------

def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(g)
    rows = sliding_window_view(img, n, axis=0) @ g
    return sliding_window_view(rows, n, axis=1) @ g


def ssim(a, b, window: int = 11, k1: float = 0.01, k2: float = 0.03, dynamic_range: float = 255.0,
         sigma: float = 1.5) -> float:
    """Mean SSIM over all fully-contained Gaussian windows; channels averaged."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionMismatch(f"shapes differ: {x.shape} vs {y.shape}")
    if x.ndim < 2 or x.shape[0] < window or x.shape[1] < window:
        raise TooSmall(f"image {x.shape[:2]} smaller than window {window}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * dynamic_range) ** 2, (k2 * dynamic_range) ** 2
    vals = []
    for c in range(x.shape[2]):
        xc, yc = x[..., c], y[..., c]
        mx, my = _filter_valid(xc, g), _filter_valid(yc, g)
        sxx = _filter_valid(xc * xc, g) - mx * mx
        syy = _filter_valid(yc * yc, g) - my * my
        sxy = _filter_valid(xc * yc, g) - mx * my
        m = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(m.mean())
    return float(np.mean(vals))


# -- report -------------------------------------------------------------------

@dataclass
class MetricsReport:
    iou_threshold: float
    per_camera: dict
    overall: dict
    holistic_recall: float
    n_units: int
    units_detected: int
    bound: dict = field(default_factory=dict)
    bound_ok: bool = True
    ssim: Optional[dict] = None
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = [f"IoU threshold {self.iou_threshold:g}", "",
                 f"{'camera':<12}{'P':>8}{'R':>8}{'F1':>8}{'TP':>7}{'FP':>7}{'FN':>7}{'GT':>7}"]
        rows = list(self.per_camera.items()) + [("all", self.overall)]
        for cam, s in rows:
            lines.append(f"{cam:<12}{s['precision']:>8.4f}{s['recall']:>8.4f}{s['f1']:>8.4f}"
                         f"{s['tp']:>7}{s['fp']:>7}{s['fn']:>7}{s['n_gt']:>7}")
        lines += ["", f"holistic recall {self.holistic_recall:.4f} ({self.units_detected}/{self.n_units} units)"]
        if self.ssim:
            lines.append(f"ssim mean {self.ssim['mean']:.4f} over {self.ssim['count']} crops")
        for f in self.flags:
            lines.append(f"note: {f}")
        return "\n".join(lines) + "\n"


def evaluate(detections: Sequence[Detection], annotations: Sequence[GTAnnotation], iou_threshold: float = 0.4,
             ignore_occluded: bool = True) -> MetricsReport:
    match = match_and_score(detections, annotations, iou_threshold, ignore_occluded)
    value, units = holistic_recall(detections, annotations, iou_threshold, match)
    bound = conjunction_bound(annotations, match, units)
    bound_ok = all(h <= r + 1e-12 for h, r in bound.values())
    if not bound_ok:
        raise AssertionError(f"holistic recall exceeds a camera recall: {bound}")
    flags = []
    for cam, s in match.per_camera.items():
        if s.precision_undefined:
            flags.append(f"camera {cam}: no detections, precision reported as 0")
    return MetricsReport(
        iou_threshold=iou_threshold,
        per_camera={c: s.as_dict() for c, s in match.per_camera.items()},
        overall=match.overall.as_dict(),
        holistic_recall=value,
        n_units=len(units),
        units_detected=int(sum(units.values())),
        bound={c: list(v) for c, v in bound.items()},
        bound_ok=bound_ok,
        flags=flags,
    )


def ssim_summary(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> dict:
    vals = [ssim(a, b) for a, b in pairs if min(a.shape[:2]) >= 11]
    return {"mean": float(np.mean(vals)) if vals else float("nan"), "count": len(vals)}
