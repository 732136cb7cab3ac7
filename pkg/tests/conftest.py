import numpy as np
import pytest
import torch

from dynsplat.core import Camera, Gaussian3D, RigidPose, quat_from_axis_angle


def make_camera(focal=60.0, size=(16, 16), pose=None) -> Camera:
    w, h = size
    return Camera(focal=focal, principal_point=np.array([w / 2, h / 2]),
                  resolution=(w, h), world_to_cam=pose or RigidPose.identity())


def random_gaussians(rng: np.random.Generator, n: int, feature_dim: int = 4,
                     spread: float = 0.6, depth_range=(1.5, 3.0)) -> list[Gaussian3D]:
    """Random well-conditioned Gaussians in front of an identity camera."""
    out = []
    for _ in range(n):
        axis = rng.normal(size=3)
        q = quat_from_axis_angle(axis, rng.uniform(0, np.pi))
        f = rng.normal(size=feature_dim)
        f = f / np.linalg.norm(f)
        out.append(Gaussian3D(
            mean=np.array([rng.uniform(-spread, spread), rng.uniform(-spread, spread),
                           rng.uniform(*depth_range)]),
            scale=rng.uniform(0.02, 0.12, size=3),
            rotation=q,
            opacity=float(rng.uniform(0.3, 0.9)),
            color=rng.uniform(0.05, 0.95, size=3),
            fg_prob=float(rng.uniform(0, 1)),
            feature=f,
        ))
    return out


@pytest.fixture(autouse=True)
def _torch_float64():
    # geometry contract is double precision end to end
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)
