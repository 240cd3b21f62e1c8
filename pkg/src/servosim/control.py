"""Control laws: pose-based servoing on an estimated relative pose, and the
classical direct photometric baseline it is compared against.

The PBVS law drives the camera with v = -lambda (R' t ; theta_u) computed
from the current-in-desired relative pose. The photometric law solves the
damped normal equations of the intensity interaction matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from servosim.errors import SingularSystem
from servosim.geometry import CameraIntrinsics, Pose6, Twist, rotation_from_theta_u
from servosim.image import ImageBuffer, require_same_shape


@dataclass(frozen=True)
class ControlGains:
    lambda_: float = 0.5
    max_linear_speed: float = 0.25  # m/s
    max_angular_speed: float = 0.5  # rad/s

    def __post_init__(self):
        if self.lambda_ <= 0:
            raise ValueError("lambda must be positive")
        if self.max_linear_speed <= 0 or self.max_angular_speed <= 0:
            raise ValueError("speed caps must be positive")


@dataclass(frozen=True)
class PhotometricContext:
    intrinsics: CameraIntrinsics
    depth: float  # assumed-constant scene depth for the interaction matrix

    def __post_init__(self):
        if self.depth <= 0:
            raise ValueError("depth must be positive")


def _cap_group(v: np.ndarray, cap: float) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm > cap:
        return v * (cap / norm)
    return v


def pbvs_velocity(delta_star: Pose6, gains: ControlGains) -> Twist:
    """Camera twist toward the desired pose given the current-in-desired
    relative pose (radians). Caps rescale each component group uniformly."""
    rot = rotation_from_theta_u(delta_star.theta_u)  # desired -> current rotation
    linear = -gains.lambda_ * (rot.T @ delta_star.t)
    angular = -gains.lambda_ * delta_star.theta_u
    return Twist(
        _cap_group(linear, gains.max_linear_speed),
        _cap_group(angular, gains.max_angular_speed),
    )


def photometric_interaction_row(
    x_img: float, y_img: float, grad_x: float, grad_y: float, depth: float
) -> np.ndarray:
    """Row of the intensity interaction matrix at one normalized image point.

    Gradients are with respect to normalized coordinates. The row is
    -grad' L_x with the standard point matrix under constant depth.
    """
    if depth <= 0:
        raise ValueError("depth must be positive")
    x, y, z = x_img, y_img, depth
    row_x = np.array([-1.0 / z, 0.0, x / z, x * y, -(1.0 + x * x), y])
    row_y = np.array([0.0, -1.0 / z, y / z, 1.0 + y * y, -x * y, -x])
    return -(grad_x * row_x + grad_y * row_y)


def _interaction_matrix(img: ImageBuffer, ctx: PhotometricContext):
    """Stacked interaction rows and the interior-pixel slice they cover."""
    intr = ctx.intrinsics
    p = img.as_float()
    # Central differences in pixel units; borders excluded.
    gu = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    gv = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    # Convert to gradients w.r.t. normalized coordinates.
    gx = gu * intr.fx
    gy = gv * intr.fy
    us, vs = np.meshgrid(
        np.arange(1, img.width - 1, dtype=float), np.arange(1, img.height - 1, dtype=float)
    )
    x = (us - intr.cx) / intr.fx
    y = (vs - intr.cy) / intr.fy
    z = ctx.depth
    cols = [
        -gx / z,
        -gy / z,
        (gx * x + gy * y) / z,
        gx * x * y + gy * (1.0 + y * y),
        -(gx * (1.0 + x * x) + gy * x * y),
        gx * y - gy * x,
    ]
    rows = -np.stack([c.ravel() for c in cols], axis=1)
    return rows


def photometric_velocity(
    current: ImageBuffer,
    desired: ImageBuffer,
    ctx: PhotometricContext,
    gains: ControlGains,
    damping_scale: float = 1e-3,
) -> Twist:
    """Direct photometric control: v = -lambda L+ (I - I*).

    The pseudo-inverse is applied through the 6x6 normal equations with
    Tikhonov damping mu = damping_scale * trace / 6. Raises
    :class:`SingularSystem` when the damped system is numerically singular
    (textureless images).
    """
    require_same_shape(current, desired)
    rows = _interaction_matrix(current, ctx)
    err = (current.as_float() - desired.as_float())[1:-1, 1:-1].ravel()
    normal = rows.T @ rows
    mu = damping_scale * float(np.trace(normal)) / 6.0
    damped = normal + mu * np.eye(6)
    if not np.all(np.isfinite(damped)) or np.linalg.cond(damped) > 1e12:
        raise SingularSystem("photometric normal equations are singular")
    solution = np.linalg.solve(damped, rows.T @ err)
    v = -gains.lambda_ * solution
    return Twist(v[:3], v[3:])
