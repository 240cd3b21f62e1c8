"""Backbone + 6-output regression head, with a serialized preprocessing
spec so serving applies exactly the training-time transform.

The default "compact" backbone is a small strided CNN trained from
scratch; torchvision classification backbones are accepted by name and
fine-tuned when pretrained weights are available in the environment
(the final classifier layer is replaced by a fresh 6-output linear head).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn


@dataclass
class Preprocessing:
    """Input normalization plus the affine output calibration.

    The network predicts standardized label coordinates; poses are
    recovered as ``z * label_scale + label_mean`` (file units: m, deg).
    ``input_mode`` is "stacked_reference" when the reference image rides
    along as a second channel (the net_[I0] form) or "single".
    """

    side: int
    channels: int
    mean: float
    std: float
    label_mean: tuple[float, ...] = (0.0,) * 6
    label_scale: tuple[float, ...] = (1.0,) * 6
    input_mode: str = "single"

    def to_dict(self) -> dict:
        return {
            "side": self.side,
            "channels": self.channels,
            "mean": self.mean,
            "std": self.std,
            "label_mean": list(self.label_mean),
            "label_scale": list(self.label_scale),
            "input_mode": self.input_mode,
        }

    @staticmethod
    def from_dict(d: dict) -> "Preprocessing":
        return Preprocessing(
            side=int(d["side"]),
            channels=int(d["channels"]),
            mean=float(d["mean"]),
            std=float(d["std"]),
            label_mean=tuple(d.get("label_mean", (0.0,) * 6)),
            label_scale=tuple(d.get("label_scale", (1.0,) * 6)),
            input_mode=d.get("input_mode", "single"),
        )


class CompactPoseNet(nn.Module):
    """Small CNN: stride-1 convs with max pooling (early detail matters for
    sub-pixel pose cues), global pooling, two-layer head."""

    def __init__(self, channels: int = 1):
        super().__init__()

        def block(cin, cout, k=3):
            # GroupNorm: batch-size independent, identical train/eval
            # statistics (BatchNorm's running stats drift under the
            # intensity-jitter augmentation).
            return [
                nn.Conv2d(cin, cout, k, padding=k // 2),
                nn.GroupNorm(8, cout),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]

        self.features = nn.Sequential(
            *block(channels, 24, k=5),
            *block(24, 48),
            *block(48, 96),
            *block(96, 128),
        )
        self.pool = nn.AdaptiveAvgPool2d(2)
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(128 * 4, 256),
            nn.ReLU(inplace=True),
            nn.Linear(256, 6),
        )

    def forward(self, x):
        return self.head(self.pool(self.features(x)))


def _torchvision_backbone(name: str, freeze_depth: int | None):
    import torchvision.models as tvm

    factory = getattr(tvm, name, None)
    if factory is None:
        raise ValueError(f"unknown torchvision backbone '{name}'")
    try:
        net = factory(weights="DEFAULT")
        pretrained = True
    except Exception:
        net = factory(weights=None)
        pretrained = False
    # Replace the classifier with a fresh 6-output head.
    if hasattr(net, "fc") and isinstance(net.fc, nn.Linear):
        net.fc = nn.Linear(net.fc.in_features, 6)
        head_params = list(net.fc.parameters())
    elif hasattr(net, "classifier"):
        cls = net.classifier
        if isinstance(cls, nn.Linear):
            net.classifier = nn.Linear(cls.in_features, 6)
            head_params = list(net.classifier.parameters())
        else:
            last = cls[-1]
            cls[-1] = nn.Linear(last.in_features, 6)
            head_params = list(cls[-1].parameters())
    else:
        raise ValueError(f"cannot attach a regression head to '{name}'")
    if pretrained and freeze_depth is not None:
        children = list(net.children())
        for child in children[:freeze_depth]:
            for p in child.parameters():
                p.requires_grad_(False)
    return net, pretrained, head_params


def build_backbone(name: str, channels: int, freeze_depth: int | None = None):
    """Returns (module, pretrained_flag). 'compact' is the from-scratch net."""
    if name == "compact":
        return CompactPoseNet(channels=channels), False
    net, pretrained, _ = _torchvision_backbone(name, freeze_depth)
    return net, pretrained


@dataclass
class RegressorModel:
    net: nn.Module
    preprocessing: Preprocessing
    backbone: str
    reference: np.ndarray | None = None  # (side, side) uint8, stacked-reference mode

    def _input_tensor(self, images: np.ndarray) -> torch.Tensor:
        spec = self.preprocessing
        x = torch.from_numpy(images.astype(np.float32))
        x = (x / 255.0 - spec.mean) / spec.std
        x = x.unsqueeze(1)
        if spec.input_mode == "stacked_reference":
            if self.reference is None:
                raise ValueError("model is in stacked_reference mode but has no reference image")
            ref = torch.from_numpy(self.reference.astype(np.float32))
            ref = ((ref / 255.0 - spec.mean) / spec.std).expand(len(images), 1, -1, -1)
            x = torch.cat([x, ref], dim=1)
        elif spec.channels > 1:
            x = x.expand(-1, spec.channels, -1, -1)
        return x

    def predict_array(self, images: np.ndarray) -> np.ndarray:
        """Predict poses for a (N, H, W) uint8 batch; returns (N, 6) file units."""
        spec = self.preprocessing
        if images.ndim != 3:
            raise ValueError("expected a (N, H, W) batch")
        if images.shape[1] != spec.side or images.shape[2] != spec.side:
            raise ValueError(
                f"images are {images.shape[1]}x{images.shape[2]}, model wants {spec.side}x{spec.side}"
            )
        self.net.eval()
        with torch.no_grad():
            out = self.net(self._input_tensor(images)).numpy().astype(np.float64)
        return out * np.asarray(spec.label_scale) + np.asarray(spec.label_mean)

    def predict_image(self, image) -> np.ndarray:
        """Predict one pose from a PIL image or (H, W) uint8 array, resizing
        to the preprocessing side if needed."""
        spec = self.preprocessing
        if isinstance(image, np.ndarray):
            image = Image.fromarray(image)
        gray = image.convert("L")
        if gray.size != (spec.side, spec.side):
            gray = gray.resize((spec.side, spec.side), Image.BILINEAR)
        arr = np.asarray(gray, dtype=np.uint8)[None]
        return self.predict_array(arr)[0]


def save_model(model: RegressorModel, out_dir, report: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"state_dict": model.net.state_dict(), "backbone": model.backbone},
        out / "weights.pt",
    )
    (out / "preprocessing.json").write_text(
        json.dumps(model.preprocessing.to_dict(), indent=2) + "\n", encoding="utf-8"
    )
    if model.reference is not None:
        Image.fromarray(model.reference, mode="L").save(out / "reference.png", format="PNG")
    if report is not None:
        (out / "training_report.json").write_text(
            json.dumps(report, indent=2) + "\n", encoding="utf-8"
        )


def load_model(model_dir) -> RegressorModel:
    model_dir = Path(model_dir)
    spec = Preprocessing.from_dict(
        json.loads((model_dir / "preprocessing.json").read_text(encoding="utf-8"))
    )
    blob = torch.load(model_dir / "weights.pt", map_location="cpu", weights_only=True)
    backbone = blob["backbone"]
    net, _ = build_backbone(backbone, channels=spec.channels)
    net.load_state_dict(blob["state_dict"])
    net.eval()
    reference = None
    ref_path = model_dir / "reference.png"
    if ref_path.is_file():
        with Image.open(ref_path) as img:
            reference = np.asarray(img.convert("L"), dtype=np.uint8)
    return RegressorModel(net=net, preprocessing=spec, backbone=backbone, reference=reference)
