import numpy as np
import pytest

from mvanon import io
from mvanon.errors import ParseError
from mvanon.evaluation import Detection, GTAnnotation
from mvanon.geometry import BBox2D
from mvanon.pointcloud import DepthFrame
from mvanon.pose import N_JOINTS, Pose2D, Pose3D


def test_calibration_roundtrip(rig, tmp_path):
    io.save_calibration(rig, tmp_path / "calib.json")
    back = io.load_calibration(tmp_path / "calib.json")
    assert back.ids == rig.ids
    for a, b in zip(rig, back):
        assert a.intrinsics == b.intrinsics and a.role == b.role
        assert np.allclose(a.pose.matrix, b.pose.matrix, atol=1e-12)


def test_calibration_parse_error_line(tmp_path):
    p = tmp_path / "calib.json"
    p.write_text('{\n "cameras": [\n  {"id": "a",,}\n ]\n}\n')
    with pytest.raises(ParseError) as exc:
        io.load_calibration(p)
    assert exc.value.line == 3


def test_calibration_missing_field(tmp_path):
    p = tmp_path / "calib.json"
    p.write_text('{"cameras": [{"id": "a"}]}')
    with pytest.raises(ParseError):
        io.load_calibration(p)


def test_images_roundtrip(tmp_path, rng):
    rgb = rng.integers(0, 256, (12, 16, 3), dtype=np.uint8)
    io.write_color(tmp_path / "c" / "x.png", rgb)
    assert np.array_equal(io.read_color(tmp_path / "c" / "x.png"), rgb)
    d = DepthFrame(rng.integers(0, 9000, (12, 16)).astype(np.uint16))
    io.write_depth(tmp_path / "d.png", d)
    assert np.array_equal(io.read_depth(tmp_path / "d.png").values, d.values)


def test_list_frames(tmp_path):
    for f in (3, 1, 2):
        io.write_color(io.color_path(tmp_path, "cam0", f), np.zeros((4, 4, 3), np.uint8))
    assert io.list_frames(tmp_path, "cam0") == [1, 2, 3]
    assert io.list_frames(tmp_path, "missing") == []


def test_keypoints_roundtrip(tmp_path, rng):
    kp = np.c_[rng.uniform(0, 100, (N_JOINTS, 2)), rng.uniform(0, 1, N_JOINTS)]
    path = io.keypoints_path(tmp_path, "cam1", 5)
    io.save_keypoints(path, [Pose2D("cam1", kp)])
    back = io.load_keypoints(path, "cam1")
    assert len(back) == 1 and np.allclose(back[0].keypoints, kp, atol=1e-6)


def test_poses3d_roundtrip(tmp_path, rng):
    valid = rng.random(N_JOINTS) > 0.3
    pose = Pose3D(rng.normal(size=(N_JOINTS, 3)), valid, 4)
    path = io.poses3d_path(tmp_path, 4)
    io.save_poses3d(path, [pose], [9])
    back = io.load_poses3d(path, 4)[0]
    assert np.array_equal(back.valid, valid)
    assert np.allclose(back.joints[valid], pose.joints[valid], atol=1e-9)


def test_annotations_roundtrip(tmp_path):
    anns = [GTAnnotation(0, "cam0", 1, BBox2D(10, 20, 30, 45), False),
            GTAnnotation(2, "cam3", 0, BBox2D(0, 0, 5, 5), True)]
    io.write_annotations(tmp_path / "a.csv", anns)
    assert io.read_annotations(tmp_path / "a.csv") == anns


def test_annotations_bad_row_line(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("frame,camera,person_id,x,y,w,h,fully_occluded\n0,c,0,1,1,4,4,0\n1,c,0,1,x,4,4,0\n")
    with pytest.raises(ParseError) as exc:
        io.read_annotations(p)
    assert exc.value.line == 3


def test_annotations_duplicate(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("frame,camera,person_id,x,y,w,h,fully_occluded\n0,c,0,1,1,4,4,0\n0,c,0,2,2,4,4,0\n")
    with pytest.raises(ParseError):
        io.read_annotations(p)


def test_annotations_missing_column(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("frame,camera,x,y,w,h\n0,c,1,1,4,4\n")
    with pytest.raises(ParseError) as exc:
        io.read_annotations(p)
    assert exc.value.line == 1


def test_detections_roundtrip(tmp_path):
    rows = [(Detection(0, "cam0", BBox2D(1, 2, 3, 4), 7), "visible"),
            (Detection(1, "cam1", BBox2D(5, 5, 9, 9), None), "unknown_depth")]
    io.write_detections(tmp_path / "d.csv", rows)
    assert io.read_detections(tmp_path / "d.csv") == [d for d, _ in rows]
