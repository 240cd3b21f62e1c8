import numpy as np
import pytest

from servosim.geometry import CameraIntrinsics, PoseTransform, rotation_from_theta_u
from servosim.image import ImageBuffer
from servosim.rendering import PlanarScene


def random_rotation(rng, max_angle=np.pi - 1e-3):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(1e-6, max_angle)
    return rotation_from_theta_u(angle * axis)


def random_pose(rng, t_scale=1.0, max_angle=np.pi - 1e-3):
    return PoseTransform(random_rotation(rng, max_angle), rng.normal(scale=t_scale, size=3))


def smooth_texture(width, height, seed=0, coarse=12, low=30, high=225):
    """Band-limited random texture: coarse noise bilinearly upsampled."""
    rng = np.random.default_rng(seed)
    grid = rng.uniform(0.0, 1.0, size=(coarse, coarse))
    ys = np.linspace(0, coarse - 1, height)
    xs = np.linspace(0, coarse - 1, width)
    x0 = np.clip(np.floor(xs).astype(int), 0, coarse - 2)
    y0 = np.clip(np.floor(ys).astype(int), 0, coarse - 2)
    fx = xs - x0
    fy = (ys - y0)[:, None]
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x0 + 1] * fx
    bot = grid[y0 + 1][:, x0] * (1 - fx) + grid[y0 + 1][:, x0 + 1] * fx
    vals = top * (1 - fy) + bot * fy
    return ImageBuffer(np.rint(low + (high - low) * vals).astype(np.uint8))


def photo_texture(width, height, seed):
    """Photo-like corpus image: two texture octaves plus fine detail."""
    rng = np.random.default_rng(seed)
    base = smooth_texture(width, height, seed=seed, coarse=6).as_float()
    mid = smooth_texture(width, height, seed=seed + 1000, coarse=20).as_float()
    noise = rng.normal(0, 6, size=(height, width))
    vals = 0.55 * base + 0.45 * mid + noise
    return ImageBuffer(np.clip(vals, 0, 255).astype(np.uint8))


def make_intrinsics(width=64, height=64, focal=None):
    f = focal if focal is not None else float(width)
    return CameraIntrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height)


@pytest.fixture
def textured_scene():
    intr = make_intrinsics(64, 64)
    return PlanarScene(smooth_texture(64, 64, seed=7), intr, depth0=0.2)
