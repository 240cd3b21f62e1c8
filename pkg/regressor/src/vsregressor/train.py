"""Training loop for the pose regressor.

The optimization objective is the Euclidean pose loss (translation meters
plus 0.01 x rotation degrees, Eq.-style two-norm sum). Minimizing that
two-norm form from a random initialization is badly conditioned (its
gradients are unit-magnitude direction vectors with a fixed 100:1 group
weighting), so training runs in two phases: a warm-up that minimizes the
squared error on per-axis standardized labels, then fine-tuning on the
exact pose loss at a reduced learning rate. Validation always reports the
exact pose-loss metric.

Deterministic for a fixed seed up to torch backend nondeterminism; CPU
runs reproduce exactly in practice.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from vsregressor.data import (
    Manifest,
    load_images,
    read_manifest,
    stratified_split,
)
from vsregressor.loss import pose_loss_mean, pose_loss_vec
from vsregressor.model import Preprocessing, RegressorModel, build_backbone, save_model

_STD_FLOOR = 1e-3  # per-axis label std floor for the warm-up standardization


@dataclass
class TrainConfig:
    manifest: str
    out_dir: str | None = None
    backbone: str = "compact"
    image_side: int = 64
    batch_size: int = 50
    epochs: int = 50
    beta: float = 0.01
    learning_rate: float = 1e-3
    seed: int = 0
    validation_fraction: float = 0.1
    warmup_fraction: float = 0.6
    eq_lr_scale: float = 0.2
    augment: bool = True  # label-free intensity jitter on training batches
    freeze_depth: int | None = None
    stage_filter: str | None = None  # train on "coarse" / "fine" only

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if not (0.0 < self.validation_fraction < 1.0):
            raise ValueError("validation_fraction must be in (0, 1)")
        if not (0.0 <= self.warmup_fraction <= 1.0):
            raise ValueError("warmup_fraction must be in [0, 1]")

    @staticmethod
    def from_file(path) -> "TrainConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        allowed = {f.name for f in TrainConfig.__dataclass_fields__.values()}
        unknown = set(data) - set(allowed)
        if unknown:
            raise ValueError(f"train config: unknown fields {sorted(unknown)}")
        return TrainConfig(**data)


@dataclass
class TrainResult:
    model: RegressorModel
    report: dict


def _load_reference(manifest: Manifest, cfg: TrainConfig) -> np.ndarray | None:
    """Reference image named by the manifest header, resized to the training
    side; None when the file is gone or the path was never recorded."""
    from PIL import Image

    ref_path = manifest.header.get("reference_image") or ""
    if not ref_path:
        return None
    path = Path(ref_path)
    if not path.is_absolute():
        path = Path(cfg.manifest).resolve().parent / path
    if not path.is_file():
        return None
    with Image.open(path) as img:
        gray = img.convert("L")
        if gray.size != (cfg.image_side, cfg.image_side):
            gray = gray.resize((cfg.image_side, cfg.image_side), Image.BILINEAR)
        return np.asarray(gray, dtype=np.uint8)


class _BatchStream:
    """Vectorized in-memory batches: one tensor slice per batch instead of
    per-item collation, deterministic shuffling from its own generator.

    In stacked-reference mode the (already normalized) reference channel is
    concatenated to every image; augmentation touches only the live image.
    """

    def __init__(
        self, images: np.ndarray, labels: np.ndarray, mean, std, channels, batch_size,
        reference: torch.Tensor | None = None,
    ):
        self.images = torch.from_numpy(np.ascontiguousarray(images))
        self.labels = torch.as_tensor(labels, dtype=torch.float32)
        self.mean = mean
        self.std = std
        self.channels = channels
        self.batch_size = batch_size
        self.reference = reference  # (1, side, side) normalized, or None

    def __len__(self):
        return len(self.images)

    def _normalize(self, raw: torch.Tensor) -> torch.Tensor:
        x = (raw / 255.0 - self.mean) / self.std
        x = x.unsqueeze(1)
        if self.reference is not None:
            ref = self.reference.expand(x.shape[0], 1, -1, -1)
            x = torch.cat([x, ref], dim=1)
        elif self.channels > 1:
            x = x.expand(-1, self.channels, -1, -1)
        return x

    def batches(self, generator: torch.Generator | None, augment_gen: torch.Generator | None):
        n = len(self.images)
        order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
        for start in range(0, n, self.batch_size):
            idx = order[start : start + self.batch_size]
            raw = self.images[idx].float()
            if augment_gen is not None:
                # Lighting-style jitter: per-image affine intensity change
                # plus mild pixel noise. Pose labels are unaffected.
                b = len(idx)
                gain = 1.0 + 0.15 * (2.0 * torch.rand(b, 1, 1, generator=augment_gen) - 1.0)
                bias = 24.0 * (2.0 * torch.rand(b, 1, 1, generator=augment_gen) - 1.0)
                noise = 2.0 * torch.randn(raw.shape, generator=augment_gen)
                raw = torch.clamp(raw * gain + bias + noise, 0.0, 255.0)
            yield self._normalize(raw), self.labels[idx]


def _validation_metrics(net, stream: _BatchStream, beta, to_pose):
    net.eval()
    preds, targets = [], []
    with torch.no_grad():
        for imgs, labs in stream.batches(None, None):
            preds.append(to_pose(net(imgs)))
            targets.append(labs)
    if not preds:
        nan = float("nan")
        return nan, nan, nan
    pred = torch.cat(preds)
    target = torch.cat(targets)
    loss = float(pose_loss_vec(pred, target, beta).mean())
    t_err = float(torch.linalg.vector_norm(pred[:, :3] - target[:, :3], dim=1).mean())
    r_err = float(torch.linalg.vector_norm(pred[:, 3:] - target[:, 3:], dim=1).mean())
    return loss, t_err, r_err


def train(cfg: TrainConfig) -> TrainResult:
    """Fit the regressor on a dataset manifest; returns the model and a
    report with per-epoch losses and the dataset's own label statistics."""
    torch.manual_seed(cfg.seed)
    manifest = read_manifest(cfg.manifest)
    samples = manifest.samples
    if cfg.stage_filter is not None:
        samples = [s for s in samples if s.stage == cfg.stage_filter]
        if not samples:
            raise ValueError(f"no samples with stage '{cfg.stage_filter}'")
        manifest = Manifest(header=manifest.header, samples=samples)

    train_idx, val_idx = stratified_split(manifest, cfg.validation_fraction, cfg.seed)
    images = load_images(manifest.samples, cfg.image_side)
    labels = np.stack([s.label for s in manifest.samples])

    mean = float(images[train_idx].mean() / 255.0)
    std = float(max(images[train_idx].std() / 255.0, 1e-6))

    # The reference image, when the manifest still points at it, rides
    # along as a second input channel: the net sees (current, reference)
    # and regresses their relative pose rather than memorizing the scene.
    reference = _load_reference(manifest, cfg)
    if cfg.backbone == "compact":
        input_mode = "stacked_reference" if reference is not None else "single"
        channels = 2 if reference is not None else 1
    else:
        input_mode = "single"
        channels = 3
        reference = None

    lab_mean = labels[train_idx].mean(axis=0)
    lab_scale = np.maximum(labels[train_idx].std(axis=0), _STD_FLOOR)
    spec = Preprocessing(
        side=cfg.image_side,
        channels=channels,
        mean=mean,
        std=std,
        label_mean=tuple(float(v) for v in lab_mean),
        label_scale=tuple(float(v) for v in lab_scale),
        input_mode=input_mode,
    )
    t_mean = torch.tensor(lab_mean, dtype=torch.float32)
    t_scale = torch.tensor(lab_scale, dtype=torch.float32)

    ref_tensor = None
    if reference is not None:
        ref_tensor = (
            (torch.from_numpy(reference.astype(np.float32)) / 255.0 - mean) / std
        ).unsqueeze(0)

    train_stream = _BatchStream(
        images[train_idx], labels[train_idx], mean, std, channels, cfg.batch_size, ref_tensor
    )
    val_stream = _BatchStream(
        images[val_idx], labels[val_idx], mean, std, channels, max(cfg.batch_size, 128), ref_tensor
    )
    shuffle_gen = torch.Generator().manual_seed(cfg.seed)
    augment_gen = torch.Generator().manual_seed(cfg.seed + 1) if cfg.augment else None

    net, pretrained = build_backbone(cfg.backbone, channels=channels, freeze_depth=cfg.freeze_depth)
    mse = torch.nn.MSELoss()

    def to_pose(z):
        # The net predicts standardized coordinates; this is the affine
        # back to file units, mirrored at inference by the stored spec.
        return z * t_scale + t_mean

    def warmup_loss(z, target):
        return mse(z, (target - t_mean) / t_scale)

    def exact_loss(z, target):
        return pose_loss_mean(to_pose(z), target, cfg.beta)

    warmup_epochs = min(cfg.epochs, math.ceil(cfg.epochs * cfg.warmup_fraction))
    phases = [("warmup", warmup_epochs, cfg.learning_rate, warmup_loss)]
    if cfg.epochs > warmup_epochs:
        phases.append(
            ("pose-loss", cfg.epochs - warmup_epochs, cfg.learning_rate * cfg.eq_lr_scale, exact_loss)
        )

    epochs_log = []
    started = time.perf_counter()
    epoch_counter = 0
    for phase_name, n_epochs, lr, loss_fn in phases:
        trainable = [p for p in net.parameters() if p.requires_grad]
        optimizer = torch.optim.AdamW(trainable, lr=lr, weight_decay=1e-4)
        for _ in range(n_epochs):
            net.train()
            total, count = 0.0, 0
            for imgs, labs in train_stream.batches(shuffle_gen, augment_gen):
                optimizer.zero_grad()
                loss = loss_fn(net(imgs), labs)
                loss.backward()
                optimizer.step()
                total += float(loss.detach()) * len(imgs)
                count += len(imgs)
            val_loss, _, _ = _validation_metrics(net, val_stream, cfg.beta, to_pose)
            epochs_log.append(
                {
                    "epoch": epoch_counter,
                    "phase": phase_name,
                    "train_loss": total / max(count, 1),
                    "val_loss": val_loss,
                }
            )
            epoch_counter += 1

    final_val, val_t_err, val_r_err = _validation_metrics(net, val_stream, cfg.beta, to_pose)
    coarse_std = (
        manifest.coarse_label_std()
        if any(s.stage == "coarse" for s in manifest.samples)
        else np.zeros(6)
    )
    report = {
        "backbone": cfg.backbone,
        "pretrained": pretrained,
        "phases": [{"name": n, "epochs": e, "learning_rate": lr} for n, e, lr, _ in phases],
        "epochs": epochs_log,
        "final_val_loss": final_val,
        "final_val_translation_error_m": val_t_err,
        "final_val_rotation_error_deg": val_r_err,
        "beta": cfg.beta,
        "seed": cfg.seed,
        "train_samples": len(train_idx),
        "val_samples": len(val_idx),
        "coarse_label_std": coarse_std.tolist(),
        "wall_seconds": time.perf_counter() - started,
    }
    model = RegressorModel(
        net=net, preprocessing=spec, backbone=cfg.backbone, reference=reference
    )
    if cfg.out_dir:
        save_model(model, cfg.out_dir, report)
    return TrainResult(model=model, report=report)
