import numpy as np
import pytest

from conftest import random_rotation
from mvanon.errors import InsufficientHeadJoints
from mvanon.geometry import RigidTransform
from mvanon.pose import (HEAD_JOINTS, J, N_JOINTS, Pose2D, Pose3D, Track, associate_across_views, gaussian_weights,
                         head_frame, lift_to_3d, smooth_track, track_people)
from mvanon.synth import SceneSpec, make_people, skeleton
from mvanon.template import LANDMARK_NAMES


@pytest.fixture(scope="module")
def people(template):
    spec = SceneSpec(n_persons=3)
    return make_people(spec, np.random.default_rng(0), template)


@pytest.fixture
def canonical(template):
    return {n: template.vertices[template.landmarks[n]] for n in LANDMARK_NAMES}


def detections_for(rig, joints_list, conf=0.95):
    out = {}
    for cam in rig:
        dets = []
        for joints in joints_list:
            px, z = cam.project(joints)
            dets.append(Pose2D(cam.id, np.c_[px, np.full(N_JOINTS, conf)]))
        out[cam.id] = dets
    return out


def test_one_person_four_views(rig, people, template):
    joints = skeleton(people[0], 0, template)
    groups = associate_across_views(detections_for(rig, [joints]), rig)
    assert groups == [{c: 0 for c in rig.ids}]


def test_two_people_no_cross_assignment(rig, people, template):
    a = skeleton(people[0], 0, template)
    b = skeleton(people[1], 0, template)
    assert np.linalg.norm(a.mean(0) - b.mean(0)) > 1.0
    dets = detections_for(rig, [a, b])
    # shuffle per camera so index equality does not hide mistakes
    rng = np.random.default_rng(5)
    truth = {}
    for cid in rig.ids:
        order = rng.permutation(2)
        dets[cid] = [dets[cid][i] for i in order]
        truth[cid] = {int(order[k]): k for k in range(2)}
    groups = associate_across_views(dets, rig)
    assert len(groups) == 2
    for g in groups:
        ids = {truth[c][k] for c, k in g.items()}
        assert len(ids) == 1 and len(g) == 4


def test_far_detection_is_discarded(rig, people, template):
    joints = skeleton(people[0], 0, template)
    dets = detections_for(rig, [joints])
    bogus = dets["cam0"][0].keypoints.copy()
    bogus[:, 0] += 150
    dets["cam0"] = dets["cam0"] + [Pose2D("cam0", bogus)]
    groups = associate_across_views(dets, rig)
    assert len(groups) == 1 and groups[0]["cam0"] == 0


def test_lift_noiseless(rig, people, template):
    joints = skeleton(people[1], 7, template)
    dets = detections_for(rig, [joints])
    pose = lift_to_3d({c: d[0] for c, d in dets.items()}, rig)
    assert pose.valid.all()
    assert np.abs(pose.joints - joints).max() < 1e-6
    for cam in rig:
        px, _ = cam.project(pose.joints)
        assert np.abs(px - dets[cam.id][0].keypoints[:, :2]).max() < 1e-6


def test_lift_single_view_and_zero_confidence(rig, people, template):
    joints = skeleton(people[0], 0, template)
    dets = detections_for(rig, [joints])
    group = {c: d[0] for c, d in dets.items()}
    for cid in rig.ids[1:]:
        kp = group[cid].keypoints.copy()
        kp[J["nose"], 2] = 0.0
        group[cid] = Pose2D(cid, kp)
    # a wild observation with zero confidence must not pull the wrist
    kp = group["cam0"].keypoints.copy()
    kp[J["left_wrist"]] = [0.0, 0.0, 0.0]
    group["cam0"] = Pose2D("cam0", kp)
    pose = lift_to_3d(group, rig)
    assert not pose.valid[J["nose"]]
    assert np.abs(pose.joints[J["left_wrist"]] - joints[J["left_wrist"]]).max() < 1e-6


def stationary(n_frames, center, gaps=()):
    frames = []
    for f in range(n_frames):
        if f in gaps:
            frames.append([])
            continue
        joints = np.tile(center, (N_JOINTS, 1))
        frames.append([Pose3D(joints, np.ones(N_JOINTS, bool), f)])
    return frames


def test_single_stationary_person():
    tracks = track_people(stationary(100, [0, 0, 1.0]))
    assert len(tracks) == 1 and len(tracks[0].poses) == 100


def test_gap_resumes_same_id():
    tracks = track_people(stationary(20, [0, 0, 1.0], gaps={5, 6, 7}), max_gap=5)
    assert len(tracks) == 1
    assert tracks[0].frame_indices == [f for f in range(20) if f not in (5, 6, 7)]


def test_gap_longer_than_max_opens_new_track():
    tracks = track_people(stationary(20, [0, 0, 1.0], gaps=set(range(3, 10))), max_gap=5)
    assert len(tracks) == 2


def crossing_frames(n=41, min_sep=0.7):
    frames = []
    for f in range(n):
        s = (f - n // 2) / (n // 2)
        a = np.array([s * 2.0, -min_sep / 2, 1.0])
        b = np.array([-s * 2.0, min_sep / 2, 1.0])
        frames.append([Pose3D(np.tile(p, (N_JOINTS, 1)), np.ones(N_JOINTS, bool), f) for p in (a, b)])
    return frames


def test_crossing_ids_preserved():
    frames = crossing_frames()
    tracks = track_people(frames, gate=0.5)
    assert len(tracks) == 2
    # the persons pass on opposite sides of y = 0, so each track keeps one sign
    for tr in tracks:
        xs = [p.joints[0, 1] for p in tr.poses]
        assert len(set(np.sign(xs))) == 1


def test_tracking_order_invariant():
    frames = crossing_frames()
    rng = np.random.default_rng(0)
    shuffled = [[fr[i] for i in rng.permutation(len(fr))] for fr in frames]
    a, b = track_people(frames), track_people(shuffled)
    for ta, tb in zip(a, b):
        assert ta.person_id == tb.person_id
        assert np.allclose([p.joints for p in ta.poses], [p.joints for p in tb.poses])


def test_texture_ids_constant():
    tracks = track_people(crossing_frames(), n_textures=4)
    assert [t.texture_id for t in tracks] == [0, 1]


def make_track(values, frames=None):
    frames = frames if frames is not None else range(len(values))
    poses = [Pose3D(np.tile(v, (N_JOINTS, 1)), np.ones(N_JOINTS, bool), f) for v, f in zip(values, frames)]
    return Track(4, poses, 2)


def test_smooth_constant_unchanged():
    tr = make_track([[1.0, 2.0, 3.0]] * 20)
    out = smooth_track(tr)
    assert np.allclose([p.joints for p in out.poses], [p.joints for p in tr.poses], atol=1e-12)
    assert out.frame_indices == tr.frame_indices and out.person_id == 4 and out.texture_id == 2
    again = smooth_track(out)
    assert np.allclose([p.joints for p in again.poses], [p.joints for p in out.poses], atol=1e-12)


def test_smooth_interpolates_gap():
    out = smooth_track(make_track([[0.0, 0, 0], [1.0, 0, 0]], frames=[0, 2]), window=1)
    assert out.frame_indices == [0, 1, 2]
    assert np.allclose(out.poses[1].joints[0], [0.5, 0, 0])


def test_smooth_spike_weighted_mean():
    vals = np.zeros((21, 3))
    vals[10, 2] = 0.10
    out = smooth_track(make_track(vals), window=5)
    # window 5 with sigma = 5 / 4, weights written out by hand
    w = np.exp(-0.5 * (np.arange(-2, 3) / 1.25) ** 2)
    assert np.allclose(gaussian_weights(5), w)
    assert np.isclose(out.poses[10].joints[0, 2], 0.10 * w[2] / w.sum())
    assert np.isclose(out.poses[9].joints[0, 2], 0.10 * w[3] / w.sum())


def test_smooth_long_gap_not_filled():
    out = smooth_track(make_track([[0.0, 0, 0], [1.0, 0, 0]], frames=[0, 30]), max_interp_gap=15)
    assert out.frame_indices == [0, 30]


def head_pose_from(canonical, transform, drop=()):
    joints = np.zeros((N_JOINTS, 3))
    valid = np.zeros(N_JOINTS, bool)
    for n in HEAD_JOINTS:
        if n in drop:
            continue
        joints[J[n]] = transform.apply(canonical[n][None])[0]
        valid[J[n]] = True
    return Pose3D(joints, valid, 0)


def test_head_frame_identity(canonical):
    hf = head_frame(head_pose_from(canonical, RigidTransform.identity()), canonical)
    assert np.allclose(hf.pose.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(hf.pose.translation, 0, atol=1e-12)


@pytest.mark.parametrize("drop", [(), ("left_ear", "right_ear"), ("left_eye", "right_eye")])
def test_head_frame_rotation(canonical, drop):
    rng = np.random.default_rng(9)
    for _ in range(10):
        t = RigidTransform(random_rotation(rng), rng.normal(size=3))
        hf = head_frame(head_pose_from(canonical, t, drop), canonical)
        assert np.allclose(hf.pose.rotation, t.rotation, atol=1e-9)
        r = hf.pose.rotation
        assert np.allclose(r.T @ r, np.eye(3), atol=1e-9)


@pytest.mark.parametrize("drop", [("left_eye", "right_eye", "left_ear", "right_ear"), ("left_eye", "right_ear"),
                                  ("nose",)])
def test_head_frame_insufficient(canonical, drop):
    with pytest.raises(InsufficientHeadJoints):
        head_frame(head_pose_from(canonical, RigidTransform.identity(), drop), canonical)


def test_head_frame_forward_axis(canonical):
    """Forward points from the ear midpoint towards the nose."""
    hf = head_frame(head_pose_from(canonical, RigidTransform.identity()), canonical)
    fwd = hf.pose.rotation[:, 1]
    d = canonical["nose"] - 0.5 * (canonical["left_ear"] + canonical["right_ear"])
    assert fwd @ d > 0
