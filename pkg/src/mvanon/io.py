"""File formats: calibration, frames, keypoints, 3D poses, annotation and
detection tables.

Layout of a recording root::

    calibration.json
    color/<camera>/<frame:06d>.png      8-bit RGB
    depth/<camera>/<frame:06d>.png      16-bit, millimetres, 0 = hole
    keypoints/<camera>/<frame:06d>.json {"poses": [[[x, y, conf] x 17], ...]}
    poses3d/<frame:06d>.json            {"people": [{"person_id": k, "joints": [[x, y, z, valid] x 17]}]}
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from .errors import ParseError
from .evaluation import Detection, GTAnnotation
from .geometry import BBox2D, Camera, CameraIntrinsics, CameraRig, RigidTransform
from .pointcloud import DepthFrame
from .pose import N_JOINTS, Pose2D, Pose3D


def frame_name(frame: int, ext: str) -> str:
    return f"{frame:06d}.{ext}"


def _load_json(path: Path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, exc.lineno) from exc
    except OSError as exc:
        raise ParseError(str(exc), path) from exc


def _dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# -- calibration --------------------------------------------------------------

def save_calibration(rig: CameraRig, path) -> None:
    cams = []
    for cam in rig:
        k = cam.intrinsics
        cams.append({
            "id": cam.id, "role": cam.role, "width": k.width, "height": k.height,
            "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
            "world_from_camera": [[float(x) for x in row] for row in cam.pose.matrix],
        })
    _dump_json(Path(path), {"cameras": cams})


def load_calibration(path) -> CameraRig:
    data = _load_json(Path(path))
    cams = []
    try:
        for c in data["cameras"]:
            k = CameraIntrinsics(float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]),
                                 int(c["width"]), int(c["height"]))
            m = np.asarray(c["world_from_camera"], dtype=np.float64)
            cams.append(Camera(str(c["id"]), k, RigidTransform.from_matrix(m), c.get("role", "workflow")))
        return CameraRig(tuple(cams))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad calibration entry: {exc}", path) from exc


# -- images -------------------------------------------------------------------

def color_path(root, cam: str, frame: int) -> Path:
    return Path(root) / "color" / cam / frame_name(frame, "png")


def depth_path(root, cam: str, frame: int) -> Path:
    return Path(root) / "depth" / cam / frame_name(frame, "png")


def write_color(path, rgb: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), np.ascontiguousarray(rgb[..., ::-1])):
        raise OSError(f"could not write {path}")


def read_color(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise FileNotFoundError(str(path))
    return np.ascontiguousarray(img[..., ::-1])


def write_depth(path, depth: DepthFrame) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), depth.values):
        raise OSError(f"could not write {path}")


def read_depth(path) -> DepthFrame:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FileNotFoundError(str(path))
    if img.dtype != np.uint16 or img.ndim != 2:
        raise ParseError("depth image must be single-channel 16-bit", path)
    return DepthFrame(img)


def list_frames(root, cam: str, modality: str = "color") -> list[int]:
    d = Path(root) / modality / cam
    if not d.is_dir():
        return []
    out = []
    for p in d.iterdir():
        if p.stem.isdigit():
            out.append(int(p.stem))
    return sorted(out)


# -- keypoints ----------------------------------------------------------------

def keypoints_path(root, cam: str, frame: int) -> Path:
    return Path(root) / "keypoints" / cam / frame_name(frame, "json")


def save_keypoints(path, poses: list) -> None:
    _dump_json(Path(path), {"poses": [np.round(p.keypoints, 6).tolist() for p in poses]})


def load_keypoints(path, camera_id: str) -> list[Pose2D]:
    data = _load_json(Path(path))
    try:
        return [Pose2D(camera_id, np.asarray(p, dtype=np.float64).reshape(N_JOINTS, 3)) for p in data["poses"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad keypoint record: {exc}", path) from exc


def poses3d_path(root, frame: int) -> Path:
    return Path(root) / "poses3d" / frame_name(frame, "json")


def save_poses3d(path, poses: list, person_ids: Optional[list] = None) -> None:
    people = []
    for k, p in enumerate(poses):
        rows = np.hstack([p.joints, p.valid[:, None].astype(np.float64)])
        rec = {"joints": np.round(rows, 9).tolist()}
        if person_ids is not None:
            rec["person_id"] = int(person_ids[k])
        people.append(rec)
    _dump_json(Path(path), {"people": people})


def load_poses3d(path, frame: int) -> list[Pose3D]:
    data = _load_json(Path(path))
    try:
        out = []
        for rec in data["people"]:
            a = np.asarray(rec["joints"], dtype=np.float64).reshape(N_JOINTS, 4)
            out.append(Pose3D(a[:, :3], a[:, 3] > 0.5, frame))
        return out
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad 3D pose record: {exc}", path) from exc


# -- tables -------------------------------------------------------------------

ANNOTATION_FIELDS = ("frame", "camera", "person_id", "x", "y", "w", "h", "fully_occluded")
DETECTION_FIELDS = ("frame", "camera", "person_id", "x", "y", "w", "h", "verdict")


def _truthy(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes"):
        return True
    if v in ("0", "false", "no", ""):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _read_rows(path, required):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(str(exc), path) from exc
    reader = csv.DictReader(text.splitlines())
    missing = [f for f in required if f not in (reader.fieldnames or [])]
    if missing:
        raise ParseError(f"missing columns {missing}", path, 1)
    for row in reader:
        yield reader.line_num, row


def write_annotations(path, annotations) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ANNOTATION_FIELDS)
        for a in annotations:
            w.writerow([a.frame_index, a.camera_id, a.person_id, *a.bbox.as_xywh(), int(a.fully_occluded)])


def read_annotations(path) -> list[GTAnnotation]:
    out = []
    for line, row in _read_rows(path, ANNOTATION_FIELDS):
        try:
            box = BBox2D.from_xywh(int(row["x"]), int(row["y"]), int(row["w"]), int(row["h"]))
            out.append(GTAnnotation(int(row["frame"]), row["camera"], int(row["person_id"]), box,
                                    _truthy(row["fully_occluded"])))
        except (ValueError, TypeError) as exc:
            raise ParseError(str(exc), path, line) from exc
    keys = [(a.frame_index, a.camera_id, a.person_id) for a in out]
    if len(set(keys)) != len(keys):
        raise ParseError("duplicate (frame, camera, person) annotation", path)
    return out


def write_detections(path, rows) -> None:
    """``rows`` are (Detection, verdict) pairs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETECTION_FIELDS)
        for d, verdict in rows:
            pid = "" if d.person_id is None else d.person_id
            w.writerow([d.frame_index, d.camera_id, pid, *d.bbox.as_xywh(), verdict])


def read_detections(path) -> list[Detection]:
    out = []
    for line, row in _read_rows(path, ("frame", "camera", "x", "y", "w", "h")):
        try:
            box = BBox2D.from_xywh(int(row["x"]), int(row["y"]), int(row["w"]), int(row["h"]))
            pid = row.get("person_id") or ""
            out.append(Detection(int(row["frame"]), row["camera"], box, int(pid) if pid.strip() else None))
        except (ValueError, TypeError) as exc:
            raise ParseError(str(exc), path, line) from exc
    return out
