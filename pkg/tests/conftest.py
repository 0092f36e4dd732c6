import numpy as np
import pytest

from splatseg.scene import (CameraView, DeformationTrack, DynamicScene,
                            GaussianSet, inverse_sigmoid, quat_normalize)


def make_camera(cam_id="cam0", width=48, height=48, fx=60.0, fy=60.0,
                R=None, T=None) -> CameraView:
    return CameraView(
        id=cam_id, width=width, height=height, fx=fx, fy=fy,
        cx=width / 2.0, cy=height / 2.0,
        R=np.eye(3) if R is None else R,
        T=np.zeros(3) if T is None else T,
    )


def random_gaussians(rng, n, *, z_range=(2.0, 6.0), xy_spread=1.4,
                     sigma_range=(0.03, 0.25), opacity_range=(0.2, 0.95)) -> GaussianSet:
    """Random splats in front of an origin camera looking down +z."""
    positions = np.stack([
        rng.uniform(-xy_spread, xy_spread, n),
        rng.uniform(-xy_spread, xy_spread, n),
        rng.uniform(*z_range, n),
    ], axis=1)
    quats = quat_normalize(rng.normal(size=(n, 4)))
    log_scales = np.log(rng.uniform(*sigma_range, size=(n, 3)))
    logits = inverse_sigmoid(rng.uniform(*opacity_range, size=n))
    sh = np.zeros((n, 48))
    sh[:, 0::16] = rng.normal(0.0, 0.7, size=(n, 3))
    sh[:, 1:16] = rng.normal(0.0, 0.05, size=(n, 15))
    sh[:, 17:32] = rng.normal(0.0, 0.05, size=(n, 15))
    sh[:, 33:48] = rng.normal(0.0, 0.05, size=(n, 15))
    return GaussianSet(positions, quats, log_scales, logits, sh)


def static_scene(gaussians: GaussianSet, cameras, name="test") -> DynamicScene:
    return DynamicScene(gaussians=gaussians, track=DeformationTrack.static(len(gaussians)),
                        cameras=list(cameras), name=name)


def single_gaussian(position, opacity=0.999, sigma=0.5, rgb=(1.0, 0.0, 0.0)) -> GaussianSet:
    from splatseg.sh import rgb_to_dc

    sh = np.zeros((1, 48))
    sh[0, 0::16] = rgb_to_dc(np.asarray(rgb))
    return GaussianSet(
        positions=np.asarray(position, dtype=np.float64).reshape(1, 3),
        rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
        log_scales=np.log(np.full((1, 3), sigma)),
        opacity_logits=inverse_sigmoid([opacity]),
        sh=sh,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
