"""Planar-scene visual servoing simulator.

Renders virtual views of a textured plane from one reference image, forges
perturbed training datasets, and closes a 6-DOF pose-based servoing loop
around pluggable pose estimators (ground-truth oracle or a remote service
speaking the estimator wire protocol).
"""

from servosim.geometry import (
    CameraIntrinsics,
    Pose6,
    PoseTransform,
    Twist,
    compose,
    from_pose6,
    integrate_twist,
    inverse,
    relative_pose,
    to_pose6,
)
from servosim.image import ImageBuffer, load_image, save_image
from servosim.rendering import Homography, PlanarScene, homography_for_pose, render_view, ssd

__all__ = [
    "CameraIntrinsics",
    "Pose6",
    "PoseTransform",
    "Twist",
    "compose",
    "from_pose6",
    "integrate_twist",
    "inverse",
    "relative_pose",
    "to_pose6",
    "ImageBuffer",
    "load_image",
    "save_image",
    "Homography",
    "PlanarScene",
    "homography_for_pose",
    "render_view",
    "ssd",
]
