import numpy as np
import pytest

from gavatar.body import Pose, bind_nearest
from gavatar.cloud import GaussianCloud, logit
from gavatar.fixtures import make_cylinder_body
from gavatar.geometry import quat_normalize, sh_dc_from_color


@pytest.fixture(scope='session')
def body():
    return make_cylinder_body()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def build_test_cloud(body, n=5, seed=3, degree=1, opacity_range=(0.3, 0.7)):
    """Small bound cloud with interior (non-saturated) colors."""
    rng = np.random.default_rng(seed)
    pts = (body.vertices[rng.choice(body.vertex_count, n, replace=False)]
           + rng.normal(0, 0.01, (n, 3)))
    vidx, fidx = bind_nearest(pts, body)
    cloud = GaussianCloud(
        positions=pts,
        rotations=quat_normalize(rng.normal(size=(n, 4))),
        scales=rng.uniform(0.05, 0.15, (n, 3)),
        opacity_logits=logit(rng.uniform(*opacity_range, n)),
        sh=np.zeros((n, 16, 3)), degree=degree,
        bind_vertex=vidx, bind_face=fidx, bind_weights=body.weights[vidx])
    active = (degree + 1) ** 2
    cloud.sh[:, 1:active, :] = rng.normal(0, 0.15, (n, active - 1, 3))
    cloud.sh[:, 0, :] = sh_dc_from_color(rng.uniform(0.3, 0.7, (n, 3)))
    return cloud


@pytest.fixture(scope='session')
def tiny_dataset(tmp_path_factory):
    """8-frame synthetic turntable shared across tests."""
    from gavatar.assets import SyntheticSpec, load_dataset, make_synthetic
    out = tmp_path_factory.mktemp('tinyds')
    spec = SyntheticSpec(frames=8, width=48, height=48, gaussians=120, seed=4)
    manifest, ckpt = make_synthetic(spec, out)
    return load_dataset(manifest), ckpt


@pytest.fixture(scope='session')
def turntable_dataset(tmp_path_factory):
    """100-frame turntable used by frame-selection tests."""
    from gavatar.assets import SyntheticSpec, load_dataset, make_synthetic
    out = tmp_path_factory.mktemp('turntable')
    spec = SyntheticSpec(frames=100, width=32, height=32, gaussians=60, seed=5)
    manifest, ckpt = make_synthetic(spec, out)
    return load_dataset(manifest), ckpt


def rest_pose(body) -> Pose:
    return Pose.rest(body.joint_count)
