import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

REPO_ROOT = Path(__file__).resolve().parent.parent.parent  # workdir with the simulator package
FIXTURES = REPO_ROOT / "fixtures"


def smooth_texture(width, height, seed=0, coarse=12, low=30, high=225):
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
    return np.rint(low + (high - low) * vals).astype(np.uint8)


def photo_texture(width, height, seed):
    rng = np.random.default_rng(seed)
    base = smooth_texture(width, height, seed=seed, coarse=6).astype(float)
    mid = smooth_texture(width, height, seed=seed + 1000, coarse=20).astype(float)
    noise = rng.normal(0, 6, size=(height, width))
    return np.clip(0.55 * base + 0.45 * mid + noise, 0, 255).astype(np.uint8)


def save_png(arr, path):
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def run_simulator(args, timeout=1800):
    """Invoke the simulator CLI (the primary component's external interface)."""
    return subprocess.run(
        [sys.executable, "-m", "servosim", *args],
        capture_output=True,
        text=True,
        timeout=timeout,
    )


def build_dataset_via_cli(
    root: Path,
    coarse: int,
    fine: int,
    seed: int = 3,
    side: int = 64,
    perturbations: bool = True,
    zero_std: bool = False,
):
    """Write a dataset config and run `servosim dataset`; returns the
    dataset directory (with manifest.jsonl)."""
    root.mkdir(parents=True, exist_ok=True)
    save_png(smooth_texture(side, side, seed=200), root / "ref.png")
    cfg = {
        "reference_image": "ref.png",
        "intrinsics": {
            "fx": float(side),
            "fy": float(side),
            "cx": side / 2.0,
            "cy": side / 2.0,
            "width": side,
            "height": side,
        },
        "depth0_m": 0.2,
        "seed": seed,
        "coarse": {"count": coarse},
        "fine": {"count": fine, "scale_of_coarse": 0.01},
    }
    if zero_std:
        cfg["coarse"]["std_translation_m"] = [0.0, 0.0, 0.0]
        cfg["coarse"]["std_rotation_deg"] = [0.0, 0.0, 0.0]
    if perturbations:
        corpus = root / "corpus"
        corpus.mkdir(exist_ok=True)
        for i in range(3):
            save_png(photo_texture(96, 96, seed=210 + i), corpus / f"c{i}.png")
        cfg["perturbations"] = {
            "lighting_fraction": 0.5,
            "occlusion_fraction": 0.5,
            "corpus_dir": "corpus",
            "slic": {"cluster_count": 32, "compactness": 10.0},
        }
    (root / "dataset.json").write_text(json.dumps(cfg))
    out = root / "ds"
    result = run_simulator(
        ["dataset", "--config", str(root / "dataset.json"), "--out", str(out)]
    )
    assert result.returncode == 0, f"dataset build failed: {result.stderr}"
    return out


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """2k-sample perturbed dataset shared by the fast training tests."""
    root = tmp_path_factory.mktemp("smallds")
    return build_dataset_via_cli(root, coarse=1800, fine=200)


@pytest.fixture(scope="session")
def small_clean_dataset(tmp_path_factory):
    """2k-sample dataset without perturbations (the easier nominal case)."""
    root = tmp_path_factory.mktemp("cleands")
    return build_dataset_via_cli(root, coarse=1800, fine=200, perturbations=False)
