import numpy as np
import pytest

from mvanon.geometry import Camera, CameraIntrinsics, CameraRig, RigidTransform
from mvanon.synth import SceneSpec, gen_synth, look_at
from mvanon.template import canonical_template


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_camera():
    """Identity pose, 100x100 image, f=100, principal point at (50, 50)."""
    return Camera("toy", CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 100, 100))


def ring_rig(n=4, radius=3.0, height=2.2, target=(0.0, 0.0, 1.2), width=640, height_px=480):
    cams = []
    for i in range(n):
        a = np.deg2rad(45.0 + 360.0 * i / n)
        pos = (radius * np.cos(a), radius * np.sin(a), height)
        k = CameraIntrinsics(0.8 * width, 0.8 * width, (width - 1) / 2, (height_px - 1) / 2, width, height_px)
        cams.append(Camera(f"cam{i}", k, look_at(pos, target)))
    return CameraRig(tuple(cams))


@pytest.fixture
def rig():
    return ring_rig()


@pytest.fixture(scope="session")
def template():
    return canonical_template()


@pytest.fixture(scope="session")
def small_scene(tmp_path_factory):
    """Ten synthetic frames, generated once per session."""
    root = tmp_path_factory.mktemp("scene")
    return gen_synth(root, SceneSpec(seed=3, n_frames=10))


@pytest.fixture(scope="session")
def small_run(small_scene, tmp_path_factory):
    from mvanon.pipeline import PipelineConfig, run_anonymize

    out = tmp_path_factory.mktemp("anon")
    cfg = PipelineConfig.from_yaml(small_scene.root / "config.yaml", {"output": str(out)})
    return cfg, run_anonymize(cfg)


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return RigidTransform.from_rotvec(axis * rng.uniform(0, max_angle)).rotation
