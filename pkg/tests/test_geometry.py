import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_rotation, ring_rig
from mvanon.errors import (BehindCamera, DegenerateConfiguration, InsufficientViews, InvalidDepth, TooFewPoints)
from mvanon.geometry import (BBox2D, RigidTransform, SimilarityTransform, backproject, project_point,
                             project_to_so3, triangulate_dlt, umeyama_align)
from oracles import refine_point


def assert_rotation(r, tol=1e-9):
    assert np.allclose(r.T @ r, np.eye(3), atol=tol)
    assert abs(np.linalg.det(r) - 1.0) < tol


@pytest.mark.parametrize("p, pixel", [((0, 0, 2), (50, 50)), ((1, 0, 2), (100, 50))])
def test_project_point_examples(toy_camera, p, pixel):
    px, depth = project_point(toy_camera, p)
    assert np.allclose(px, pixel)
    assert depth == 2


def test_project_behind_camera(toy_camera):
    with pytest.raises(BehindCamera):
        project_point(toy_camera, (0, 0, -1))


def test_backproject_principal_point(toy_camera):
    assert np.allclose(backproject(toy_camera, (50, 50), 2.0), (0, 0, 2))


@pytest.mark.parametrize("depth", [0.0, -1.0, np.nan])
def test_backproject_invalid_depth(toy_camera, depth):
    with pytest.raises(InvalidDepth):
        backproject(toy_camera, (50, 50), depth)


def test_project_backproject_roundtrip(rig, rng):
    cam = rig["cam1"]
    pts = rng.uniform([-1, -1, 0.5], [1, 1, 2], size=(1000, 3))
    worst = 0.0
    for p in pts:
        px, d = project_point(cam, p)
        if not cam.intrinsics.contains(px)[0]:
            continue
        worst = max(worst, np.linalg.norm(backproject(cam, px, d) - p))
    assert worst < 1e-9


def test_rigid_transform_compose_inverse(rng):
    a = RigidTransform(random_rotation(rng), rng.normal(size=3))
    b = RigidTransform(random_rotation(rng), rng.normal(size=3))
    p = rng.normal(size=(10, 3))
    assert np.allclose(a.compose(b).apply(p), a.apply(b.apply(p)))
    assert np.allclose(a.inverse().apply(a.apply(p)), p)
    assert_rotation(a.compose(b).rotation)


def test_similarity_premul(rng):
    s = SimilarityTransform(1.3, random_rotation(rng), rng.normal(size=3))
    r = RigidTransform(random_rotation(rng), rng.normal(size=3))
    p = rng.normal(size=(5, 3))
    assert np.allclose(s.premul(r).apply(p), r.apply(s.apply(p)))
    assert np.allclose(s.inverse_apply(s.apply(p)), p)


@given(st.lists(st.floats(-1, 1), min_size=9, max_size=9))
def test_project_to_so3_is_proper(values):
    m = np.reshape(values, (3, 3)) + 1e-3 * np.eye(3)
    if np.linalg.matrix_rank(m) < 3:
        return
    assert_rotation(project_to_so3(m))


def test_triangulate_two_views_example(toy_camera):
    from mvanon.geometry import Camera

    right = Camera("right", toy_camera.intrinsics, RigidTransform(np.eye(3), np.array([1.0, 0, 0])))
    p = np.array([0.3, -0.2, 2.5])
    obs = [(c, project_point(c, p)[0]) for c in (toy_camera, right)]
    x, err = triangulate_dlt(obs)
    assert np.linalg.norm(x - p) < 1e-6
    assert err < 1e-6


def test_triangulate_single_view(toy_camera):
    with pytest.raises(InsufficientViews):
        triangulate_dlt([(toy_camera, (50.0, 50.0))])


@pytest.mark.parametrize("n_views", [2, 3, 4])
def test_triangulate_noiseless_any_view_count(rng, n_views):
    rig = ring_rig()
    for _ in range(50):
        p = rng.uniform([-1, -1, 0.5], [1, 1, 2])
        obs = [(c, project_point(c, p)[0]) for c in list(rig)[:n_views]]
        x, err = triangulate_dlt(obs)
        assert np.linalg.norm(x - p) < 1e-6
        assert err < 1e-6


def test_triangulate_noise_matches_nonlinear_oracle(rng):
    """With 1 px noise the linear solution stays close to the reprojection
    optimum and its error is of the same order as the optimum's."""
    rig = ring_rig()
    lin, opt = [], []
    for _ in range(200):
        p = rng.uniform([-1, -1, 0.8], [1, 1, 1.8])
        obs = [(c, project_point(c, p)[0] + rng.uniform(-1, 1, 2)) for c in rig]
        x, err = triangulate_dlt(obs)
        assert err > 0
        ref = refine_point(obs, x)
        lin.append(np.linalg.norm(x - p))
        opt.append(np.linalg.norm(ref - p))
        assert np.linalg.norm(x - ref) < 5e-3
    assert np.percentile(lin, 95) <= 1.5 * np.percentile(opt, 95) + 1e-4


def test_umeyama_identity(rng):
    src = rng.normal(size=(10, 3))
    s = umeyama_align(src, src)
    assert abs(s.scale - 1) < 1e-12
    assert np.allclose(s.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(s.translation, 0, atol=1e-12)


def test_umeyama_recovers_known_similarity(rng):
    for _ in range(20):
        truth = SimilarityTransform(rng.uniform(0.5, 2), random_rotation(rng), rng.normal(size=3))
        src = rng.normal(size=(12, 3))
        est = umeyama_align(src, truth.apply(src))
        assert abs(est.scale - truth.scale) < 1e-9
        assert np.allclose(est.rotation, truth.rotation, atol=1e-9)
        assert np.allclose(est.translation, truth.translation, atol=1e-9)
        assert_rotation(est.rotation)
        perm = rng.permutation(len(src))
        est2 = umeyama_align(src[perm], truth.apply(src)[perm])
        assert np.allclose(est2.matrix, est.matrix, atol=1e-9)


def test_umeyama_errors():
    with pytest.raises(TooFewPoints):
        umeyama_align(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegenerateConfiguration):
        umeyama_align(line, line)


def test_bbox_from_xywh():
    b = BBox2D.from_xywh(10, 5, 21, 16)
    assert (b.x_min, b.y_min, b.x_max, b.y_max) == (10, 5, 31, 21)
    assert b.area == 21 * 16
    assert b.as_xywh() == (10, 5, 21, 16)
