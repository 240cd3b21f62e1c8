"""CNN relative-pose regressor for planar visual servoing datasets.

Trains a convolutional backbone with a 6-output regression head on the
dataset manifest format produced by the simulator, and serves predictions
over the estimator wire protocol (length-prefixed JSON frames).
"""

from vsregressor.loss import pose_loss_vec
from vsregressor.model import RegressorModel, load_model
from vsregressor.train import TrainConfig, train

__all__ = ["RegressorModel", "load_model", "TrainConfig", "train", "pose_loss_vec"]
