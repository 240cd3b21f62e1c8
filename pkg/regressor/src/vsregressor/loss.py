"""Euclidean pose loss on (translation, angle-axis) 6-vectors.

Labels and predictions are in file units: translation meters, rotation
degrees. Per sample: ||t_hat - t||_2 + beta * ||r_hat - r||_2.
"""

from __future__ import annotations

import torch


def pose_loss_vec(pred: torch.Tensor, target: torch.Tensor, beta: float = 0.01) -> torch.Tensor:
    """Per-sample pose loss for (N, 6) tensors; returns shape (N,)."""
    if pred.shape[-1] != 6 or target.shape[-1] != 6:
        raise ValueError("pose vectors must have 6 components")
    t_err = torch.linalg.vector_norm(pred[..., :3] - target[..., :3], dim=-1)
    r_err = torch.linalg.vector_norm(pred[..., 3:] - target[..., 3:], dim=-1)
    return t_err + beta * r_err


def pose_loss_mean(pred: torch.Tensor, target: torch.Tensor, beta: float = 0.01) -> torch.Tensor:
    return pose_loss_vec(pred, target, beta).mean()
