import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvanon.errors import AttributeMismatch, TooFewPoints
from mvanon.pointcloud import (DepthFrame, PointCloud, SpatialIndex, crop_sphere, estimate_normals, fuse,
                               unproject_depth)


def test_single_pixel_at_principal_point(toy_camera):
    d = np.zeros((100, 100), np.uint16)
    d[50, 50] = 2000
    cloud = unproject_depth(toy_camera, DepthFrame(d))
    assert np.allclose(cloud.points, [[0, 0, 2]])


def test_all_holes_give_empty_cloud(toy_camera):
    assert len(unproject_depth(toy_camera, DepthFrame(np.zeros((100, 100), np.uint16)))) == 0


@pytest.mark.parametrize("stride", [1, 2, 3, 7])
def test_stride_grid_count(toy_camera, stride):
    d = DepthFrame(np.full((100, 100), 1500, np.uint16))
    n = int(np.ceil(100 / stride)) ** 2
    assert len(unproject_depth(toy_camera, d, stride)) == n


@given(st.integers(1, 5), st.floats(0, 1))
@settings(max_examples=30, deadline=None)
def test_count_never_exceeds_valid_grid(stride, hole_fraction):
    from mvanon.geometry import Camera, CameraIntrinsics

    cam = Camera("c", CameraIntrinsics(40.0, 40.0, 15.5, 11.5, 32, 24))
    rng = np.random.default_rng(int(hole_fraction * 1000) + stride)
    vals = rng.integers(500, 3000, (24, 32)).astype(np.uint16)
    vals[rng.random((24, 32)) < hole_fraction] = 0
    d = DepthFrame(vals)
    assert len(unproject_depth(cam, d, stride)) <= np.count_nonzero(d.valid[::stride, ::stride])


def test_window_matches_full_unprojection(rig, rng):
    cam = rig["cam0"]
    vals = rng.integers(500, 4000, (cam.height, cam.width)).astype(np.uint16)
    d = DepthFrame(vals)
    full = unproject_depth(cam, d, 2)
    win = unproject_depth(cam, d, 2, window=(101, 33, 300, 250))
    px, _ = cam.project(full.points)
    px = np.rint(px).astype(int)
    inside = (px[:, 0] >= 101) & (px[:, 0] < 300) & (px[:, 1] >= 33) & (px[:, 1] < 250)
    assert np.allclose(np.sort(win.points, axis=0), np.sort(full.points[inside], axis=0))


def test_unprojected_points_reproject(rig):
    cam = rig["cam2"]
    d = DepthFrame(np.full((cam.height, cam.width), 2345, np.uint16))
    cloud = unproject_depth(cam, d, 16)
    px, z = cam.project(cloud.points)
    assert np.allclose(z, 2.345)
    assert np.allclose(px, np.rint(px), atol=1e-9)


def test_fuse_sizes(rng):
    a, b = PointCloud(rng.normal(size=(100, 3))), PointCloud(rng.normal(size=(250, 3)))
    assert len(fuse([a, b])) == 350
    assert np.array_equal(fuse([PointCloud.empty(), a]).points, a.points)


def test_fuse_attribute_mismatch(rng):
    a = PointCloud(rng.normal(size=(5, 3)), np.zeros((5, 3), np.uint8))
    b = PointCloud(rng.normal(size=(5, 3)))
    with pytest.raises(AttributeMismatch):
        fuse([a, b])


def test_crop_sphere_examples(rng):
    cloud = PointCloud(rng.normal(size=(200, 3)))
    assert len(crop_sphere(cloud, (1000, 0, 0), 0.3)) == 0
    r = np.linalg.norm(cloud.points, axis=1).max()
    assert len(crop_sphere(cloud, (0, 0, 0), r)) == len(cloud)


def test_crop_sphere_planted_cluster(rng):
    inside = rng.normal(size=(50, 3))
    inside = 0.2 * inside / np.linalg.norm(inside, axis=1, keepdims=True) * rng.uniform(0, 1, (50, 1))
    outside = rng.normal(size=(50, 3))
    outside = outside / np.linalg.norm(outside, axis=1, keepdims=True) * rng.uniform(0.31, 2, (50, 1))
    pts = np.vstack([inside, outside])[rng.permutation(100)]
    crop = crop_sphere(PointCloud(pts), (0, 0, 0), 0.3)
    brute = pts[np.linalg.norm(pts, axis=1) <= 0.3]
    assert len(crop) == 50
    assert np.array_equal(crop.points, brute)
    assert np.array_equal(crop_sphere(crop, (0, 0, 0), 0.3).points, crop.points)


def test_spatial_index_matches_brute_force(rng):
    for _ in range(100):
        n = int(rng.integers(1, 500))
        pts = rng.uniform(-1, 1, (n, 3))
        q = rng.uniform(-1.2, 1.2, (20, 3))
        j, d = SpatialIndex(PointCloud(pts)).nearest(q)
        dist = np.linalg.norm(q[:, None] - pts[None], axis=2)
        assert np.allclose(d, dist.min(axis=1))
        assert np.allclose(dist[np.arange(20), j], dist.min(axis=1))


def test_spatial_index_gate():
    idx = SpatialIndex(PointCloud([[0.0, 0, 0]]))
    j, d = idx.nearest([[1.0, 0, 0], [0.05, 0, 0]], max_distance=0.1)
    assert list(j) == [-1, 0]


@pytest.mark.parametrize("k", [3, 5, 10, 30])
def test_plane_normals(rng, k):
    pts = np.c_[rng.uniform(-1, 1, (300, 2)), np.zeros(300)]
    n = estimate_normals(PointCloud(pts), k, viewpoint=(0, 0, 1)).normals
    ang = np.arccos(np.clip(n @ [0, 0, 1], -1, 1))
    assert ang.max() < 1e-6


def test_sphere_normals_radial(rng):
    v = rng.normal(size=(2000, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    n = estimate_normals(PointCloud(v), 10, viewpoint=(0, 0, 0)).normals
    # viewpoint inside: normals point inward, i.e. along -radial
    cos = np.sum(n * -v, axis=1)
    assert np.median(cos) > 0.995 and cos.min() > 0.95


def test_normals_too_few_points():
    with pytest.raises(TooFewPoints):
        estimate_normals(PointCloud(np.zeros((2, 3))), 3)


def test_depth_frame_meters():
    d = DepthFrame.from_meters(np.array([[1.2345, 0.0], [np.nan, 2.0]]))
    assert d.values.tolist() == [[1234, 0], [0, 2000]] or d.values.tolist() == [[1235, 0], [0, 2000]]
    m = d.meters()
    assert np.isnan(m[0, 1]) and np.isnan(m[1, 0])
