"""Reader for the simulator's dataset manifest (JSONL) and torch datasets.

The manifest is consumed strictly through its published schema: a header
line followed by one sample record per line with `file`, `label`
([tx, ty, tz, rx, ry, rz] in meters/degrees), and `stage`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image


class ManifestError(Exception):
    pass


@dataclass
class ManifestSample:
    index: int
    path: Path
    label: np.ndarray  # 6 floats, file units
    stage: str


@dataclass
class Manifest:
    header: dict
    samples: list[ManifestSample]

    @property
    def coarse_count(self) -> int:
        return int(self.header["stages"]["coarse"])

    @property
    def fine_count(self) -> int:
        return int(self.header["stages"]["fine"])

    def coarse_label_std(self) -> np.ndarray:
        labels = np.stack([s.label for s in self.samples if s.stage == "coarse"])
        return labels.std(axis=0)


def read_manifest(path) -> Manifest:
    path = Path(path)
    base = path.parent
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ManifestError("empty manifest")
    header = json.loads(lines[0])
    if header.get("kind") != "header":
        raise ManifestError("first line must be the manifest header")
    units = header.get("units")
    if units != {"translation": "m", "rotation": "deg"}:
        raise ManifestError(f"unsupported units {units}")
    samples = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("kind") != "sample":
            raise ManifestError(f"line {i}: expected a sample record")
        label = np.asarray(rec["label"], dtype=np.float64)
        if label.shape != (6,):
            raise ManifestError(f"line {i}: label must have 6 numbers")
        samples.append(
            ManifestSample(
                index=int(rec["index"]),
                path=base / rec["file"],
                label=label,
                stage=str(rec["stage"]),
            )
        )
    if not samples:
        raise ManifestError("manifest has no samples")
    return Manifest(header=header, samples=samples)


def load_images(samples: list[ManifestSample], side: int) -> np.ndarray:
    """Load all sample images as a (N, side, side) uint8 array, resizing
    (bilinear) when the stored resolution differs."""
    out = np.empty((len(samples), side, side), dtype=np.uint8)
    for i, s in enumerate(samples):
        with Image.open(s.path) as img:
            gray = img.convert("L")
            if gray.size != (side, side):
                gray = gray.resize((side, side), Image.BILINEAR)
            out[i] = np.asarray(gray, dtype=np.uint8)
    return out


class PoseDataset(torch.utils.data.Dataset):
    """Images normalized by the recorded mean/std; labels in file units."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, mean: float, std: float, channels: int):
        if len(images) != len(labels):
            raise ValueError("images and labels must align")
        self.images = images
        self.labels = torch.as_tensor(labels, dtype=torch.float32)
        self.mean = mean
        self.std = std
        self.channels = channels

    def __len__(self):
        return len(self.images)

    def __getitem__(self, idx):
        img = torch.from_numpy(self.images[idx].astype(np.float32))
        img = (img / 255.0 - self.mean) / self.std
        img = img.unsqueeze(0)
        if self.channels > 1:
            img = img.expand(self.channels, -1, -1)
        return img, self.labels[idx]


def stratified_split(manifest: Manifest, validation_fraction: float, seed: int):
    """Deterministic 1-in-k style split per stage (coarse/fine separately)."""
    rng = np.random.default_rng([seed, 0x5B117])
    train_idx, val_idx = [], []
    for stage in ("coarse", "fine"):
        idx = [i for i, s in enumerate(manifest.samples) if s.stage == stage]
        if not idx:
            continue
        idx = np.array(idx)
        rng.shuffle(idx)
        n_val = max(1, int(round(len(idx) * validation_fraction))) if len(idx) > 1 else 0
        val_idx.extend(idx[:n_val].tolist())
        train_idx.extend(idx[n_val:].tolist())
    return sorted(train_idx), sorted(val_idx)
