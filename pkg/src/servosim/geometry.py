"""SE(3) algebra: rigid transforms, (t, theta-u) pose vectors, twists.

Angles are radians everywhere inside the package; degrees appear only at
file and wire boundaries (see :func:`Pose6.to_file_units`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_ORTHONORMAL_TOL = 1e-9
_SMALL_ANGLE = 1e-7
_NEAR_PI = math.pi - 1e-6


def _as_vector3(value, name: str) -> np.ndarray:
    v = np.asarray(value, dtype=float).reshape(-1)
    if v.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {np.shape(value)}")
    return v


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class PoseTransform:
    """Rigid transform: ``X_parent = rotation @ X_child + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float)
        t = _as_vector3(self.translation, "translation").copy()
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err >= _ORTHONORMAL_TOL:
            raise ValueError(f"rotation not orthonormal (max |R'R - I| = {err:.3e})")
        if np.linalg.det(r) < 0.0:
            raise ValueError("rotation has determinant -1 (reflection)")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "PoseTransform":
        return PoseTransform(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (3,) or (N, 3) into the parent frame."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Pose6:
    """6-vector pose: translation (m) plus angle-axis rotation (rad)."""

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    theta_u: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = _as_vector3(self.t, "t").copy()
        tu = _as_vector3(self.theta_u, "theta_u").copy()
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(tu))):
            raise ValueError("Pose6 components must be finite")
        t.setflags(write=False)
        tu.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "theta_u", tu)

    @staticmethod
    def zero() -> "Pose6":
        return Pose6(np.zeros(3), np.zeros(3))

    def angle(self) -> float:
        return float(np.linalg.norm(self.theta_u))

    def to_file_units(self) -> list[float]:
        """(tx, ty, tz, rx, ry, rz) with meters and degrees, for file/wire use."""
        return [*map(float, self.t), *map(float, np.degrees(self.theta_u))]

    @staticmethod
    def from_file_units(values) -> "Pose6":
        v = np.asarray(values, dtype=float).reshape(-1)
        if v.shape != (6,):
            raise ValueError(f"pose vector must have 6 numbers, got {v.shape}")
        return Pose6(v[:3], np.radians(v[3:]))


@dataclass(frozen=True)
class Twist:
    """Camera velocity: linear (m/s) and angular (rad/s) parts."""

    linear: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        lin = _as_vector3(self.linear, "linear").copy()
        ang = _as_vector3(self.angular, "angular").copy()
        if not (np.all(np.isfinite(lin)) and np.all(np.isfinite(ang))):
            raise ValueError("Twist components must be finite")
        lin.setflags(write=False)
        ang.setflags(write=False)
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "angular", ang)

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


def compose(a: PoseTransform, b: PoseTransform) -> PoseTransform:
    """Chain two transforms; equals the 4x4 homogeneous product a @ b."""
    return PoseTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(t: PoseTransform) -> PoseTransform:
    rt = t.rotation.T
    return PoseTransform(rt, -(rt @ t.translation))


def rotation_from_theta_u(theta_u: np.ndarray) -> np.ndarray:
    """Rodrigues formula; first-order branch below the small-angle cutoff."""
    tu = _as_vector3(theta_u, "theta_u")
    theta = float(np.linalg.norm(tu))
    k = skew(tu)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def _canonical_pi_sign(u: np.ndarray) -> np.ndarray:
    """Resolve the +-u ambiguity at theta = pi: first nonzero component positive."""
    for c in u:
        if abs(c) > 1e-12:
            return u if c > 0 else -u
    return u


def theta_u_from_rotation(rotation: np.ndarray) -> np.ndarray:
    """Angle-axis of a rotation matrix, canonical angle in [0, pi].

    The angle comes from atan2 of the skew-part norm against the trace;
    near pi the axis is extracted from the symmetric part (R + I branch),
    which stays well conditioned where the skew part vanishes.
    """
    r = np.asarray(rotation, dtype=float)
    w = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    s = float(np.linalg.norm(w))  # sin(theta)
    c = float(np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0))  # cos(theta)
    theta = math.atan2(s, c)
    if theta < _SMALL_ANGLE:
        return w  # first-order: theta*u = vee(R - R') / 2
    if theta < _NEAR_PI:
        return (theta / s) * w
    # Near pi: sym(R) = cos(theta) I + (1 - cos(theta)) u u', solve for u u'.
    outer = ((r + r.T) / 2.0 - c * np.eye(3)) / (1.0 - c)
    col = int(np.argmax(np.diag(outer)))
    u = outer[:, col]
    u = u / np.linalg.norm(u)
    if s > 1e-12:
        if float(np.dot(u, w)) < 0.0:
            u = -u
    else:
        u = _canonical_pi_sign(u)
    return theta * u


def canonicalize_theta_u(theta_u: np.ndarray) -> np.ndarray:
    """Fold an angle-axis vector into the canonical range ||theta_u|| in [0, pi]."""
    tu = _as_vector3(theta_u, "theta_u")
    theta = float(np.linalg.norm(tu))
    if theta == 0.0:
        return np.zeros(3)
    u = tu / theta
    theta = math.fmod(theta, 2.0 * math.pi)
    if theta > math.pi:
        theta = 2.0 * math.pi - theta
        u = -u
    if abs(theta - math.pi) < 1e-15:
        u = _canonical_pi_sign(u)
    return theta * u


def to_pose6(t: PoseTransform) -> Pose6:
    return Pose6(t.translation, theta_u_from_rotation(t.rotation))


def from_pose6(p: Pose6) -> PoseTransform:
    return PoseTransform(rotation_from_theta_u(p.theta_u), p.t)


def relative_pose(t_ref_desired: PoseTransform, t_ref_current: PoseTransform) -> Pose6:
    """Pose of the current frame expressed in the desired frame (both given
    relative to a shared reference)."""
    return to_pose6(compose(inverse(t_ref_desired), t_ref_current))


def _so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    k = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + (k @ k) / 6.0
    a = (1.0 - math.cos(theta)) / (theta * theta)
    b = (theta - math.sin(theta)) / (theta * theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def twist_exp(v: Twist, dt: float) -> PoseTransform:
    """Exact SE(3) exponential of the scaled twist v*dt."""
    phi = v.angular * dt
    rho = v.linear * dt
    rot = rotation_from_theta_u(phi)
    trans = _so3_left_jacobian(phi) @ rho
    return PoseTransform(rot, trans)


def integrate_twist(pose: PoseTransform, v: Twist, dt: float) -> PoseTransform:
    """Advance a pose by a body-frame twist over dt seconds."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return compose(pose, twist_exp(v, dt))
