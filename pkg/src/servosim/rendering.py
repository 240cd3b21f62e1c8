"""Virtual views of a textured plane seen from a moving pinhole camera.

The scene is the reference image projected onto the plane z = depth0 of the
reference camera frame. Any other camera pose induces a plane homography;
views are synthesized by inverse warping with bilinear interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from servosim.errors import DegeneratePose
from servosim.geometry import CameraIntrinsics, PoseTransform
from servosim.image import ImageBuffer, require_same_shape

_PLANE_NORMAL = np.array([0.0, 0.0, 1.0])
_MIN_PLANE_DISTANCE = 1e-6


@dataclass(frozen=True)
class PlanarScene:
    """Reference image on a fronto-parallel plane at distance depth0 (m)."""

    reference_image: ImageBuffer
    intrinsics: CameraIntrinsics
    depth0: float
    fill_value: int = 128

    def __post_init__(self):
        if self.depth0 <= 0:
            raise ValueError("depth0 must be positive")
        if not 0 <= self.fill_value <= 255:
            raise ValueError("fill_value must be an 8-bit intensity")


@dataclass(frozen=True)
class Homography:
    """3x3 projective map between pixel coordinates, scale-normalized."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError("homography must be 3x3")
        if abs(np.linalg.det(m)) <= 1e-12:
            raise ValueError("homography is singular")
        if abs(m[2, 2]) > 1e-12:
            m = m / m[2, 2]
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map pixel points of shape (N, 2) through the homography."""
        p = np.asarray(points, dtype=float)
        ones = np.ones((p.shape[0], 1))
        q = np.hstack([p, ones]) @ self.matrix.T
        return q[:, :2] / q[:, 2:3]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))


def _camera_from_reference(pose: PoseTransform) -> tuple[np.ndarray, np.ndarray]:
    """Rotation/translation mapping reference-frame coords into the camera frame."""
    r_cr = pose.rotation.T
    t_cr = -(r_cr @ pose.translation)
    return r_cr, t_cr


def plane_distance(scene: PlanarScene, pose: PoseTransform) -> float:
    """Signed distance from the camera center to the scene plane along its normal."""
    return scene.depth0 - float(_PLANE_NORMAL @ pose.translation)


def homography_for_pose(scene: PlanarScene, pose: PoseTransform) -> Homography:
    """Plane-induced homography taking reference pixels to view pixels.

    ``pose`` is the camera expressed in the reference frame. Identity yields
    the identity map. Raises :class:`DegeneratePose` when the camera center
    reaches the plane or the plane leaves the camera's forward half-space
    entirely.
    """
    d_eff = plane_distance(scene, pose)
    if d_eff < _MIN_PLANE_DISTANCE:
        raise DegeneratePose(
            f"camera center at plane distance {d_eff:.3e} m (< {_MIN_PLANE_DISTANCE} m)"
        )
    k = scene.intrinsics.matrix()
    k_inv = np.linalg.inv(k)
    r_cr, t_cr = _camera_from_reference(pose)
    euclidean = r_cr + np.outer(t_cr, _PLANE_NORMAL) / scene.depth0
    h = Homography(k @ euclidean @ k_inv)
    if not _plane_faces_camera_somewhere(scene, pose):
        raise DegeneratePose("plane lies entirely behind the camera")
    return h


def _view_ray_denominators(scene: PlanarScene, pose: PoseTransform, px: np.ndarray, py: np.ndarray):
    """Per-pixel n' R K^-1 p term; positive where the plane is in front."""
    intr = scene.intrinsics
    n_cam = pose.rotation.T @ _PLANE_NORMAL  # normal seen from the camera
    return (
        n_cam[0] * (px - intr.cx) / intr.fx
        + n_cam[1] * (py - intr.cy) / intr.fy
        + n_cam[2]
    )


def _plane_faces_camera_somewhere(scene: PlanarScene, pose: PoseTransform) -> bool:
    w, h = scene.intrinsics.width, scene.intrinsics.height
    xs = np.array([0.0, (w - 1) / 2.0, w - 1.0])
    ys = np.array([0.0, (h - 1) / 2.0, h - 1.0])
    gx, gy = np.meshgrid(xs, ys)
    den = _view_ray_denominators(scene, pose, gx.ravel(), gy.ravel())
    return bool(np.any(den > 0))


def _bilinear_sample(pixels: np.ndarray, sx: np.ndarray, sy: np.ndarray, fill: float):
    """Sample at real coordinates with bilinear interpolation.

    The image footprint is the pixel-area extent [-0.5, W-0.5] x [-0.5, H-0.5];
    the outer half-pixel ring clamps to the edge texels. Coordinates outside
    the footprint take the fill value.
    """
    h, w = pixels.shape
    valid = (sx >= -0.5) & (sx <= w - 0.5) & (sy >= -0.5) & (sy <= h - 0.5)
    sxc = np.clip(sx, 0.0, w - 1.0)
    syc = np.clip(sy, 0.0, h - 1.0)
    x0 = np.clip(np.floor(sxc), 0, max(w - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(syc), 0, max(h - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(sxc - x0, 0.0, 1.0)
    fy = np.clip(syc - y0, 0.0, 1.0)
    p = pixels.astype(np.float64)
    top = p[y0, x0] * (1 - fx) + p[y0, x1] * fx
    bot = p[y1, x0] * (1 - fx) + p[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    return np.where(valid, out, float(fill))


class _WarpGrid:
    """Cached pixel-centre grid for one output size."""

    _cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    @classmethod
    def get(cls, width: int, height: int):
        key = (width, height)
        if key not in cls._cache:
            gx, gy = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
            cls._cache[key] = (gx, gy)
        return cls._cache[key]


def render_view(scene: PlanarScene, pose: PoseTransform) -> ImageBuffer:
    """Synthesize the view of the scene plane from ``pose``.

    Inverse-warps the reference image through the plane homography with
    bilinear interpolation; rays missing the visible side of the plane or
    landing outside the reference image take the scene fill value.
    """
    hom = homography_for_pose(scene, pose)
    h_inv = np.linalg.inv(hom.matrix)
    w, h = scene.intrinsics.width, scene.intrinsics.height
    gx, gy = _WarpGrid.get(w, h)

    denom = _view_ray_denominators(scene, pose, gx, gy)
    hx = h_inv[0, 0] * gx + h_inv[0, 1] * gy + h_inv[0, 2]
    hy = h_inv[1, 0] * gx + h_inv[1, 1] * gy + h_inv[1, 2]
    hz = h_inv[2, 0] * gx + h_inv[2, 1] * gy + h_inv[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = hx / hz
        sy = hy / hz
    behind = denom <= 0
    sx = np.where(behind, -1.0, sx)
    sy = np.where(behind, -1.0, sy)

    out = _bilinear_sample(scene.reference_image.pixels, sx, sy, scene.fill_value)
    return ImageBuffer(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def ssd(a: ImageBuffer, b: ImageBuffer) -> float:
    """Sum of squared intensity differences, in floating point."""
    require_same_shape(a, b)
    diff = a.as_float() - b.as_float()
    return float(np.sum(diff * diff))
