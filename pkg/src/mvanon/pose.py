"""Multi-view 2D keypoints to tracked, smoothed 3D skeletons and head frames."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DegenerateGeometry, InsufficientHeadJoints, InsufficientViews
from .geometry import Camera, CameraRig, RigidTransform, project_to_so3, triangulate_dlt

log = logging.getLogger(__name__)

JOINT_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
N_JOINTS = len(JOINT_NAMES)
J = {name: i for i, name in enumerate(JOINT_NAMES)}
HEAD_JOINTS = ("nose", "left_eye", "right_eye", "left_ear", "right_ear")
TORSO_JOINTS = (J["left_shoulder"], J["right_shoulder"], J["left_hip"], J["right_hip"])


@dataclass(frozen=True)
class Pose2D:
    """One person-agnostic detection: ``keypoints`` is (17, 3) of x, y, confidence."""

    camera_id: str
    keypoints: np.ndarray

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float64).reshape(N_JOINTS, 3)
        if np.any((kp[:, 2] < 0) | (kp[:, 2] > 1)):
            raise ValueError("keypoint confidence must lie in [0, 1]")
        object.__setattr__(self, "keypoints", kp)


@dataclass(frozen=True)
class Pose3D:
    joints: np.ndarray
    valid: np.ndarray
    frame_index: int

    def __post_init__(self):
        object.__setattr__(self, "joints", np.asarray(self.joints, dtype=np.float64).reshape(N_JOINTS, 3))
        object.__setattr__(self, "valid", np.asarray(self.valid, dtype=bool).reshape(N_JOINTS))

    def joint(self, name: str) -> Optional[np.ndarray]:
        i = J[name]
        return self.joints[i] if self.valid[i] else None

    def torso_center(self) -> Optional[np.ndarray]:
        idx = [i for i in TORSO_JOINTS if self.valid[i]]
        if not idx:
            idx = list(np.nonzero(self.valid)[0])
        if not idx:
            return None
        return self.joints[idx].mean(axis=0)


@dataclass
class Track:
    person_id: int
    poses: list = field(default_factory=list)
    texture_id: int = 0

    @property
    def frame_indices(self) -> list[int]:
        return [p.frame_index for p in self.poses]

    def at(self, frame_index: int) -> Optional[Pose3D]:
        for p in self.poses:
            if p.frame_index == frame_index:
                return p
        return None


@dataclass(frozen=True)
class HeadFrame:
    pose: RigidTransform
    joints_used: tuple

    @property
    def origin(self) -> np.ndarray:
        return self.pose.translation


# -- association --------------------------------------------------------------

def fundamental_matrix(cam_a: Camera, cam_b: Camera) -> np.ndarray:
    """F with ``x_b^T F x_a = 0`` for pixel coordinates."""
    r_ba = cam_b.pose.rotation.T @ cam_a.pose.rotation
    t_ba = cam_b.pose.rotation.T @ (cam_a.pose.translation - cam_b.pose.translation)
    tx = np.array([[0, -t_ba[2], t_ba[1]], [t_ba[2], 0, -t_ba[0]], [-t_ba[1], t_ba[0], 0]])
    e = tx @ r_ba
    return np.linalg.inv(cam_b.intrinsics.K).T @ e @ np.linalg.inv(cam_a.intrinsics.K)


def _line_dist(lines, pts):
    norm = np.maximum(np.linalg.norm(lines[:, :2], axis=1), 1e-12)
    return np.abs(np.sum(lines[:, :2] * pts, axis=1) + lines[:, 2]) / norm


def symmetric_epipolar_distance(f: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    ha = np.hstack([xa, np.ones((len(xa), 1))])
    hb = np.hstack([xb, np.ones((len(xb), 1))])
    return 0.5 * (_line_dist(ha @ f.T, xb) + _line_dist(hb @ f, xa))


def _pair_cost(f, ka, kb, min_confidence, min_shared=3):
    shared = (ka[:, 2] >= min_confidence) & (kb[:, 2] >= min_confidence)
    if shared.sum() < min_shared:
        return np.inf
    return float(np.mean(symmetric_epipolar_distance(f, ka[shared, :2], kb[shared, :2])))


def associate_across_views(
    detections: Mapping[str, Sequence[Pose2D]],
    rig: CameraRig,
    epipolar_gate: float = 20.0,
    min_confidence: float = 0.3,
) -> list[dict]:
    """Group per-camera detections of the same person.

    Average-linkage agglomeration over the mean symmetric epipolar distance;
    a group holds at most one detection per camera, singletons are dropped.
    Returns a list of ``{camera_id: detection_index}``.
    """
    nodes = [(cid, k) for cid in rig.ids for k in range(len(detections.get(cid, ())))]
    if not nodes:
        return []
    n = len(nodes)
    cost = np.full((n, n), np.inf)
    fcache = {}
    for a in range(n):
        for b in range(a + 1, n):
            ca, cb = nodes[a][0], nodes[b][0]
            if ca == cb:
                continue
            if (ca, cb) not in fcache:
                fcache[(ca, cb)] = fundamental_matrix(rig[ca], rig[cb])
            ka = detections[ca][nodes[a][1]].keypoints
            kb = detections[cb][nodes[b][1]].keypoints
            cost[a, b] = cost[b, a] = _pair_cost(fcache[(ca, cb)], ka, kb, min_confidence)
    groups = [[i] for i in range(n)]
    while True:
        best, pair = np.inf, None
        for gi in range(len(groups)):
            cams_i = {nodes[m][0] for m in groups[gi]}
            for gj in range(gi + 1, len(groups)):
                if cams_i & {nodes[m][0] for m in groups[gj]}:
                    continue
                c = np.mean([cost[a, b] for a in groups[gi] for b in groups[gj]])
                if c < best:
                    best, pair = c, (gi, gj)
        if pair is None or best > epipolar_gate:
            break
        gi, gj = pair
        groups[gi] = groups[gi] + groups[gj]
        del groups[gj]
    out = []
    for g in groups:
        if len(g) >= 2:
            out.append({nodes[m][0]: nodes[m][1] for m in sorted(g)})
    out.sort(key=lambda g: sorted(g.items()))
    return out


def lift_to_3d(
    group: Mapping[str, Pose2D],
    rig: CameraRig,
    min_confidence: float = 0.3,
    frame_index: int = 0,
) -> Pose3D:
    """Confidence-weighted per-joint DLT over the views of one group."""
    joints = np.zeros((N_JOINTS, 3))
    valid = np.zeros(N_JOINTS, dtype=bool)
    for j in range(N_JOINTS):
        obs, w = [], []
        for cid, det in group.items():
            x, y, c = det.keypoints[j]
            if c >= min_confidence and c > 0:
                obs.append((rig[cid], (x, y)))
                w.append(c)
        try:
            joints[j], _ = triangulate_dlt(obs, 2, np.asarray(w))
            valid[j] = True
        except (InsufficientViews, DegenerateGeometry):
            continue
    return Pose3D(joints, valid, frame_index)


# -- tracking -----------------------------------------------------------------

def track_people(
    frames: Sequence[Sequence[Pose3D]],
    gate: float = 0.5,
    max_gap: int = 15,
    n_textures: int = 1,
) -> list[Track]:
    """Frame-to-frame optimal assignment on torso centres.

    Tracks unseen for more than ``max_gap`` frames are retired. New tracks
    are opened in a detection-order-independent sequence (sorted by centre).
    """
    tracks: list[Track] = []
    last_center: dict[int, np.ndarray] = {}
    last_seen: dict[int, int] = {}
    for poses in frames:
        poses = [p for p in poses if p.torso_center() is not None]
        if not poses:
            continue
        fidx = poses[0].frame_index
        centers = np.array([p.torso_center() for p in poses])
        active = [t.person_id for t in tracks if fidx - last_seen[t.person_id] <= max_gap + 1]
        assigned = {}
        if active:
            prev = np.array([last_center[i] for i in active])
            d = np.linalg.norm(prev[:, None, :] - centers[None, :, :], axis=2)
            big = 1e6
            rows, cols = linear_sum_assignment(np.where(d <= gate, d, big))
            for r, c in zip(rows, cols):
                if d[r, c] <= gate:
                    assigned[c] = active[r]
        new = sorted((c for c in range(len(poses)) if c not in assigned), key=lambda c: tuple(centers[c]))
        for c in new:
            pid = len(tracks)
            tracks.append(Track(pid, [], pid % max(n_textures, 1)))
            assigned[c] = pid
        for c, pid in assigned.items():
            tracks[pid].poses.append(poses[c])
            last_center[pid] = centers[c]
            last_seen[pid] = fidx
    return tracks


def gaussian_weights(window: int, sigma: Optional[float] = None) -> np.ndarray:
    half = window // 2
    sigma = sigma if sigma is not None else window / 4.0
    x = np.arange(-half, half + 1, dtype=np.float64)
    if sigma <= 0:
        return (x == 0).astype(np.float64)
    return np.exp(-0.5 * (x / sigma) ** 2)


def smooth_track(track: Track, window: int = 11, max_interp_gap: int = 15, sigma: Optional[float] = None) -> Track:
    """Gaussian moving average over valid samples, then linear gap filling.

    The kernel standard deviation defaults to ``window / 4``. Gaps of at most
    ``max_interp_gap`` frames between valid samples of a joint are filled
    from the smoothed neighbours; longer gaps stay invalid.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if not track.poses:
        return replace(track, poses=[])
    f0, f1 = track.poses[0].frame_index, track.poses[-1].frame_index
    n = f1 - f0 + 1
    raw = np.zeros((n, N_JOINTS, 3))
    ok = np.zeros((n, N_JOINTS), dtype=bool)
    for p in track.poses:
        raw[p.frame_index - f0] = p.joints
        ok[p.frame_index - f0] = p.valid
    w = gaussian_weights(window | 1 if window % 2 == 0 else window, sigma)
    half = len(w) // 2
    out = np.zeros_like(raw)
    out_ok = ok.copy()
    for t in np.nonzero(ok.any(axis=1))[0]:
        lo, hi = max(0, t - half), min(n, t + half + 1)
        ww = w[lo - t + half: hi - t + half][:, None] * ok[lo:hi]
        s = ww.sum(axis=0)
        num = np.einsum("kj,kjc->jc", ww, raw[lo:hi])
        good = ok[t]
        out[t, good] = num[good] / s[good, None]
    for j in range(N_JOINTS):
        idx = np.nonzero(ok[:, j])[0]
        for a, b in zip(idx[:-1], idx[1:]):
            gap = b - a - 1
            if 0 < gap <= max_interp_gap:
                for t in range(a + 1, b):
                    lam = (t - a) / (b - a)
                    out[t, j] = (1 - lam) * out[a, j] + lam * out[b, j]
                    out_ok[t, j] = True
    poses = [Pose3D(out[t], out_ok[t], f0 + t) for t in range(n) if out_ok[t].any()]
    return Track(track.person_id, poses, track.texture_id)


# -- head frame ---------------------------------------------------------------

def _frame_axes(pts: Mapping[str, np.ndarray]) -> np.ndarray:
    if "left_eye" in pts and "right_eye" in pts:
        right = pts["right_eye"] - pts["left_eye"]
    else:
        right = pts["right_ear"] - pts["left_ear"]
    if "left_ear" in pts and "right_ear" in pts:
        fwd = pts["nose"] - 0.5 * (pts["left_ear"] + pts["right_ear"])
    else:
        fwd = pts["nose"] - 0.5 * (pts["left_eye"] + pts["right_eye"])
    right = right / np.linalg.norm(right)
    fwd = fwd - np.dot(fwd, right) * right
    fwd = fwd / np.linalg.norm(fwd)
    up = np.cross(right, fwd)
    return np.stack([right, fwd, up], axis=1)


def head_joint_subset(pose: Pose3D) -> tuple:
    ok = {n for n in HEAD_JOINTS if pose.valid[J[n]]}
    if "nose" not in ok:
        raise InsufficientHeadJoints("nose is not valid")
    used = ["nose"]
    if {"left_eye", "right_eye"} <= ok:
        used += ["left_eye", "right_eye"]
    if {"left_ear", "right_ear"} <= ok:
        used += ["left_ear", "right_ear"]
    if len(used) < 3:
        raise InsufficientHeadJoints("need the nose plus both eyes or both ears")
    return tuple(used)


def head_frame(pose: Pose3D, canonical: Mapping[str, np.ndarray]) -> HeadFrame:
    """World-from-head frame from the valid head joints.

    ``canonical`` maps head joint names to their positions in the template's
    canonical frame; the same axis construction is applied to both point sets,
    so canonical keypoints in canonical pose give the identity.
    """
    used = head_joint_subset(pose)
    obs = {n: pose.joints[J[n]] for n in used}
    can = {n: np.asarray(canonical[n], dtype=np.float64) for n in used}
    r = project_to_so3(_frame_axes(obs) @ _frame_axes(can).T)
    mean_obs = np.mean([obs[n] for n in used], axis=0)
    mean_can = np.mean([can[n] for n in used], axis=0)
    return HeadFrame(RigidTransform(r, mean_obs - r @ mean_can), used)
