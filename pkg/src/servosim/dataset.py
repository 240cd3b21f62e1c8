"""Training dataset synthesis: pose sampling, rendering, perturbation,
labeling, and a line-oriented manifest that replays byte-identically.

Labels are relative to the reference camera and stored in file units
(meters, degrees). The rotation draw composes the three sampled angles as a
single angle-axis vector; the manifest header records that convention.
"""

from __future__ import annotations

import json
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from servosim.errors import (
    ConfigError,
    DegeneratePose,
    ManifestParseError,
    ManifestValidationError,
)
from servosim.geometry import (
    CameraIntrinsics,
    Pose6,
    PoseTransform,
    compose,
    from_pose6,
    relative_pose,
    to_pose6,
)
from servosim.image import ImageBuffer, load_image, save_image
from servosim.perturbations import (
    GaussianLight,
    LightingConfig,
    SlicParams,
    apply_lighting,
    composite_occlusion,
    extract_patch,
    slic_segment,
)
from servosim.rendering import PlanarScene, homography_for_pose, render_view

SCHEMA_VERSION = 1
ROTATION_CONVENTION = "angle_axis_composed"
_MAX_REDRAWS = 100
_CORPUS_EXTENSIONS = {".png", ".jpg", ".jpeg"}


@dataclass(frozen=True)
class PoseSamplerConfig:
    """Gaussian draw around a mean pose; stds in meters and degrees."""

    count: int
    std_translation: tuple[float, float, float] = (0.01, 0.01, 0.01)
    std_rotation: tuple[float, float, float] = (10.0, 10.0, 20.0)
    mean_pose: PoseTransform = field(default_factory=PoseTransform.identity)

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be at least 1")
        if any(s < 0 for s in self.std_translation) or any(s < 0 for s in self.std_rotation):
            raise ValueError("standard deviations must be non-negative")
        object.__setattr__(self, "std_translation", tuple(float(s) for s in self.std_translation))
        object.__setattr__(self, "std_rotation", tuple(float(s) for s in self.std_rotation))

    def scaled(self, factor: float, count: int | None = None) -> "PoseSamplerConfig":
        return PoseSamplerConfig(
            count=self.count if count is None else count,
            std_translation=tuple(s * factor for s in self.std_translation),
            std_rotation=tuple(s * factor for s in self.std_rotation),
            mean_pose=self.mean_pose,
        )

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "std_translation_m": list(self.std_translation),
            "std_rotation_deg": list(self.std_rotation),
            "mean_pose": to_pose6(self.mean_pose).to_file_units(),
        }


def draw_pose_offset(cfg: PoseSamplerConfig, rng: np.random.Generator) -> Pose6:
    """One 6-axis Gaussian draw in file units, as an internal-unit Pose6."""
    draw = rng.normal(size=6)
    t = draw[:3] * np.asarray(cfg.std_translation)
    rot_deg = draw[3:] * np.asarray(cfg.std_rotation)
    return Pose6(t, np.radians(rot_deg))


def sample_poses(cfg: PoseSamplerConfig, rng: np.random.Generator) -> list[PoseTransform]:
    """Independent per-axis Gaussian perturbations composed onto the mean pose."""
    return [compose(cfg.mean_pose, from_pose6(draw_pose_offset(cfg, rng))) for _ in range(cfg.count)]


@dataclass(frozen=True)
class LightingRanges:
    """Uniform draw ranges for randomized lighting configs."""

    gain: tuple[float, float] = (0.7, 1.3)
    bias: tuple[float, float] = (-30.0, 30.0)
    light_count: tuple[int, int] = (1, 3)
    amplitude: tuple[float, float] = (0.6, 1.4)
    sigma_fraction: tuple[float, float] = (0.15, 0.5)  # of min(width, height)

    def draw(self, rng: np.random.Generator, width: int, height: int) -> LightingConfig:
        gain = float(rng.uniform(*self.gain))
        bias = float(rng.uniform(*self.bias))
        n = int(rng.integers(self.light_count[0], self.light_count[1] + 1))
        side = min(width, height)
        lights = []
        for _ in range(n):
            lights.append(
                GaussianLight(
                    x0=float(rng.uniform(0, width)),
                    y0=float(rng.uniform(0, height)),
                    amplitude=float(rng.uniform(*self.amplitude)),
                    sigma_x=float(rng.uniform(*self.sigma_fraction)) * side,
                    sigma_y=float(rng.uniform(*self.sigma_fraction)) * side,
                )
            )
        return LightingConfig(global_gain=gain, global_bias=bias, lights=tuple(lights))

    def to_dict(self) -> dict:
        return {
            "gain": list(self.gain),
            "bias": list(self.bias),
            "light_count": list(self.light_count),
            "amplitude": list(self.amplitude),
            "sigma_fraction": list(self.sigma_fraction),
        }


@dataclass(frozen=True)
class PerturbationPolicy:
    """Which fraction of samples get each perturbation family, and how."""

    lighting_fraction: float = 0.5
    occlusion_fraction: float = 0.5
    corpus_dir: str | None = None
    slic: SlicParams = field(default_factory=SlicParams)
    lighting_ranges: LightingRanges = field(default_factory=LightingRanges)

    def __post_init__(self):
        if not (0.0 <= self.lighting_fraction <= 1.0 and 0.0 <= self.occlusion_fraction <= 1.0):
            raise ValueError("fractions must lie in [0, 1]")

    @staticmethod
    def none() -> "PerturbationPolicy":
        return PerturbationPolicy(lighting_fraction=0.0, occlusion_fraction=0.0)

    def to_dict(self) -> dict:
        return {
            "lighting_fraction": self.lighting_fraction,
            "occlusion_fraction": self.occlusion_fraction,
            "corpus_dir": self.corpus_dir,
            "slic": {"cluster_count": self.slic.cluster_count, "compactness": self.slic.compactness},
            "lighting_ranges": self.lighting_ranges.to_dict(),
        }


@dataclass(frozen=True)
class OcclusionRecord:
    corpus_file: str
    cluster_id: int
    anchor: tuple[int, int]


@dataclass(frozen=True)
class PerturbationRecord:
    lighting: LightingConfig | None = None
    occlusion: OcclusionRecord | None = None

    def to_dict(self) -> dict:
        out = {}
        if self.lighting is not None:
            out["lighting"] = self.lighting.to_dict()
        if self.occlusion is not None:
            out["occlusion"] = {
                "corpus_file": self.occlusion.corpus_file,
                "cluster_id": self.occlusion.cluster_id,
                "anchor": list(self.occlusion.anchor),
            }
        return out


@dataclass(frozen=True)
class DatasetSample:
    index: int
    file: str
    label: Pose6  # relative to the reference camera
    stage: str  # "coarse" | "fine"
    pose: Pose6  # absolute pose in the reference frame, for self-consistency checks
    perturbations: PerturbationRecord = field(default_factory=PerturbationRecord)


@dataclass
class DatasetManifest:
    seed: int
    intrinsics: CameraIntrinsics
    depth0: float
    fill_value: int
    reference_image_path: str
    coarse: PoseSamplerConfig
    fine: PoseSamplerConfig
    policy: PerturbationPolicy
    samples: list[DatasetSample]

    @property
    def stage_counts(self) -> dict:
        return {"coarse": self.coarse.count, "fine": self.fine.count}


class _CorpusCache:
    """Corpus discovery plus per-file SLIC segmentations, thread-safe."""

    def __init__(self, corpus_dir: str, slic: SlicParams):
        root = Path(corpus_dir)
        if not root.is_dir():
            raise ConfigError(f"occlusion corpus directory not found: {corpus_dir}")
        self.root = root
        self.slic = slic
        self.files = sorted(
            str(p.relative_to(root))
            for p in root.rglob("*")
            if p.suffix.lower() in _CORPUS_EXTENSIONS
        )
        if not self.files:
            raise ConfigError(f"no corpus images under {corpus_dir}")
        self._lock = threading.Lock()
        self._images: dict[str, ImageBuffer] = {}
        self._segs: dict[str, object] = {}

    def segmentation(self, rel_path: str):
        with self._lock:
            cached = self._segs.get(rel_path)
        if cached is not None:
            return cached
        img = self.image(rel_path)
        seg = slic_segment(img, self.slic.cluster_count, self.slic.compactness)
        with self._lock:
            self._segs[rel_path] = seg
        return seg

    def image(self, rel_path: str) -> ImageBuffer:
        with self._lock:
            cached = self._images.get(rel_path)
        if cached is not None:
            return cached
        img = load_image(self.root / rel_path)
        with self._lock:
            self._images[rel_path] = img
        return img


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _draw_perturbations(
    rng: np.random.Generator,
    policy: PerturbationPolicy,
    corpus: _CorpusCache | None,
    width: int,
    height: int,
) -> PerturbationRecord:
    lighting = None
    occlusion = None
    if rng.random() < policy.lighting_fraction:
        lighting = policy.lighting_ranges.draw(rng, width, height)
    if rng.random() < policy.occlusion_fraction and corpus is not None:
        rel = corpus.files[int(rng.integers(len(corpus.files)))]
        seg = corpus.segmentation(rel)
        cluster_id = int(rng.integers(seg.cluster_count))
        anchor = (int(rng.integers(width)), int(rng.integers(height)))
        occlusion = OcclusionRecord(corpus_file=rel, cluster_id=cluster_id, anchor=anchor)
    return PerturbationRecord(lighting=lighting, occlusion=occlusion)


def apply_perturbation_record(
    img: ImageBuffer, record: PerturbationRecord, corpus: _CorpusCache | None
) -> ImageBuffer:
    if record.lighting is not None:
        img = apply_lighting(img, record.lighting)
    if record.occlusion is not None:
        if corpus is None:
            raise ConfigError("occlusion record present but no corpus configured")
        occ = record.occlusion
        patch = extract_patch(
            corpus.image(occ.corpus_file),
            corpus.segmentation(occ.corpus_file),
            occ.cluster_id,
            occ.anchor,
        )
        img = composite_occlusion(img, patch)
    return img


def _sample_stage_poses(
    scene: PlanarScene, cfg: PoseSamplerConfig, rng: np.random.Generator
) -> list[PoseTransform]:
    """Sequential draws with bounded redraws for degenerate poses."""
    poses = []
    for slot in range(cfg.count):
        for attempt in range(_MAX_REDRAWS):
            pose = compose(cfg.mean_pose, from_pose6(draw_pose_offset(cfg, rng)))
            try:
                homography_for_pose(scene, pose)
            except DegeneratePose:
                continue
            poses.append(pose)
            break
        else:
            raise DegeneratePose(
                f"slot {slot}: no valid pose after {_MAX_REDRAWS} redraws; "
                "sampler stds are incompatible with the scene depth"
            )
    return poses


def build_dataset(
    scene: PlanarScene,
    coarse: PoseSamplerConfig,
    fine: PoseSamplerConfig,
    policy: PerturbationPolicy,
    seed: int,
    out_dir: str | os.PathLike,
    workers: int | None = None,
    reference_image_path: str = "",
) -> DatasetManifest:
    """Render, perturb, and persist the full two-stage dataset.

    Deterministic for a fixed seed: pose sampling runs on one sequential
    stream, per-sample perturbation decisions use generators derived from
    (seed, index), and the manifest is assembled in index order.
    """
    out = Path(out_dir)
    images_dir = out / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    corpus = None
    if policy.occlusion_fraction > 0:
        if policy.corpus_dir is None:
            raise ConfigError("occlusion_fraction > 0 requires a corpus_dir")
        corpus = _CorpusCache(policy.corpus_dir, policy.slic)

    master = np.random.default_rng(seed)
    stage_poses = [
        ("coarse", _sample_stage_poses(scene, coarse, master)),
        ("fine", _sample_stage_poses(scene, fine, master)),
    ]
    jobs = []
    index = 0
    for stage, poses in stage_poses:
        for pose in poses:
            jobs.append((index, stage, pose))
            index += 1

    reference = PoseTransform.identity()
    width, height = scene.intrinsics.width, scene.intrinsics.height

    def run_job(job):
        idx, stage, pose = job
        rng = _sample_rng(seed, idx)
        record = _draw_perturbations(rng, policy, corpus, width, height)
        img = render_view(scene, pose)
        img = apply_perturbation_record(img, record, corpus)
        rel_file = f"images/{idx:06d}.png"
        save_image(img, out / rel_file)
        return DatasetSample(
            index=idx,
            file=rel_file,
            label=relative_pose(reference, pose),
            stage=stage,
            pose=to_pose6(pose),
            perturbations=record,
        )

    n_workers = workers if workers is not None else (os.cpu_count() or 1)
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            samples = list(pool.map(run_job, jobs))
    else:
        samples = [run_job(j) for j in jobs]
    samples.sort(key=lambda s: s.index)

    manifest = DatasetManifest(
        seed=seed,
        intrinsics=scene.intrinsics,
        depth0=scene.depth0,
        fill_value=scene.fill_value,
        reference_image_path=reference_image_path,
        coarse=coarse,
        fine=fine,
        policy=policy,
        samples=samples,
    )
    write_manifest(manifest, out / "manifest.jsonl")
    return manifest


def pose_loss(estimate: Pose6, label: Pose6, beta: float = 0.01) -> float:
    """Euclidean pose loss: ||t_err||_2 + beta * ||rot_err_deg||_2.

    Rotation enters in degrees, matching the training-label file units.
    """
    t_err = float(np.linalg.norm(estimate.t - label.t))
    r_err = float(np.linalg.norm(np.degrees(estimate.theta_u) - np.degrees(label.theta_u)))
    return t_err + beta * r_err


def _header_dict(m: DatasetManifest) -> dict:
    intr = m.intrinsics
    return {
        "kind": "header",
        "schema_version": SCHEMA_VERSION,
        "seed": m.seed,
        "reference_image": m.reference_image_path,
        "intrinsics": {
            "fx": intr.fx,
            "fy": intr.fy,
            "cx": intr.cx,
            "cy": intr.cy,
            "width": intr.width,
            "height": intr.height,
        },
        "depth0_m": m.depth0,
        "fill_value": m.fill_value,
        "units": {"translation": "m", "rotation": "deg"},
        "rotation_convention": ROTATION_CONVENTION,
        "stages": m.stage_counts,
        "sampler": {"coarse": m.coarse.to_dict(), "fine": m.fine.to_dict()},
        "policy": m.policy.to_dict(),
    }


def _sample_dict(s: DatasetSample) -> dict:
    return {
        "kind": "sample",
        "index": s.index,
        "file": s.file,
        "label": s.label.to_file_units(),
        "stage": s.stage,
        "pose": s.pose.to_file_units(),
        "perturbations": s.perturbations.to_dict(),
    }


def write_manifest(m: DatasetManifest, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(_header_dict(m), separators=(",", ":")) + "\n")
        for s in m.samples:
            fh.write(json.dumps(_sample_dict(s), separators=(",", ":")) + "\n")


def _require(obj: dict, key: str, line_no: int, kind=None):
    if key not in obj:
        raise ManifestParseError(f"line {line_no}: missing field '{key}'")
    value = obj[key]
    if kind is not None and not isinstance(value, kind):
        raise ManifestParseError(
            f"line {line_no}: field '{key}' has type {type(value).__name__}"
        )
    return value


def _parse_pose6(values, line_no: int, key: str) -> Pose6:
    if not isinstance(values, list) or len(values) != 6:
        raise ManifestParseError(f"line {line_no}: field '{key}' must be a 6-number list")
    try:
        nums = [float(v) for v in values]
    except (TypeError, ValueError):
        raise ManifestParseError(f"line {line_no}: field '{key}' has a non-numeric entry")
    return Pose6.from_file_units(nums)


def _parse_sampler(data: dict, line_no: int) -> PoseSamplerConfig:
    count = _require(data, "count", line_no, int)
    std_t = _require(data, "std_translation_m", line_no, list)
    std_r = _require(data, "std_rotation_deg", line_no, list)
    mean = _parse_pose6(_require(data, "mean_pose", line_no), line_no, "mean_pose")
    return PoseSamplerConfig(
        count=count,
        std_translation=tuple(std_t),
        std_rotation=tuple(std_r),
        mean_pose=from_pose6(mean),
    )


def _parse_policy(data: dict, line_no: int) -> PerturbationPolicy:
    slic_data = _require(data, "slic", line_no, dict)
    ranges = _require(data, "lighting_ranges", line_no, dict)
    return PerturbationPolicy(
        lighting_fraction=_require(data, "lighting_fraction", line_no, (int, float)),
        occlusion_fraction=_require(data, "occlusion_fraction", line_no, (int, float)),
        corpus_dir=data.get("corpus_dir"),
        slic=SlicParams(
            cluster_count=_require(slic_data, "cluster_count", line_no, int),
            compactness=_require(slic_data, "compactness", line_no, (int, float)),
        ),
        lighting_ranges=LightingRanges(
            gain=tuple(_require(ranges, "gain", line_no, list)),
            bias=tuple(_require(ranges, "bias", line_no, list)),
            light_count=tuple(_require(ranges, "light_count", line_no, list)),
            amplitude=tuple(_require(ranges, "amplitude", line_no, list)),
            sigma_fraction=tuple(_require(ranges, "sigma_fraction", line_no, list)),
        ),
    )


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Parse a manifest.jsonl; raises ManifestParseError with line/field info."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ManifestParseError("line 1: empty manifest")

    def load_line(i: int) -> dict:
        try:
            obj = json.loads(lines[i])
        except json.JSONDecodeError as e:
            raise ManifestParseError(f"line {i + 1}: invalid JSON ({e.msg})")
        if not isinstance(obj, dict):
            raise ManifestParseError(f"line {i + 1}: expected a JSON object")
        return obj

    header = load_line(0)
    if header.get("kind") != "header":
        raise ManifestParseError("line 1: first record must be the header")
    version = _require(header, "schema_version", 1, int)
    if version != SCHEMA_VERSION:
        raise ManifestParseError(f"line 1: unsupported schema_version {version}")
    intr_d = _require(header, "intrinsics", 1, dict)
    intrinsics = CameraIntrinsics(
        fx=_require(intr_d, "fx", 1, (int, float)),
        fy=_require(intr_d, "fy", 1, (int, float)),
        cx=_require(intr_d, "cx", 1, (int, float)),
        cy=_require(intr_d, "cy", 1, (int, float)),
        width=_require(intr_d, "width", 1, int),
        height=_require(intr_d, "height", 1, int),
    )
    units = _require(header, "units", 1, dict)
    sampler = _require(header, "sampler", 1, dict)
    coarse = _parse_sampler(_require(sampler, "coarse", 1, dict), 1)
    fine = _parse_sampler(_require(sampler, "fine", 1, dict), 1)
    if units != {"translation": "m", "rotation": "deg"}:
        raise ManifestParseError(f"line 1: unexpected units {units}")
    if _require(header, "rotation_convention", 1, str) != ROTATION_CONVENTION:
        raise ManifestParseError("line 1: unknown rotation_convention")

    samples = []
    for i in range(1, len(lines)):
        if not lines[i].strip():
            continue
        obj = load_line(i)
        line_no = i + 1
        if obj.get("kind") != "sample":
            raise ManifestParseError(f"line {line_no}: expected a sample record")
        perts = _require(obj, "perturbations", line_no, dict)
        lighting = (
            LightingConfig.from_dict(perts["lighting"]) if "lighting" in perts else None
        )
        occlusion = None
        if "occlusion" in perts:
            occ = perts["occlusion"]
            occlusion = OcclusionRecord(
                corpus_file=_require(occ, "corpus_file", line_no, str),
                cluster_id=_require(occ, "cluster_id", line_no, int),
                anchor=tuple(_require(occ, "anchor", line_no, list)),
            )
        samples.append(
            DatasetSample(
                index=_require(obj, "index", line_no, int),
                file=_require(obj, "file", line_no, str),
                label=_parse_pose6(_require(obj, "label", line_no), line_no, "label"),
                stage=_require(obj, "stage", line_no, str),
                pose=_parse_pose6(_require(obj, "pose", line_no), line_no, "pose"),
                perturbations=PerturbationRecord(lighting=lighting, occlusion=occlusion),
            )
        )

    return DatasetManifest(
        seed=_require(header, "seed", 1, int),
        intrinsics=intrinsics,
        depth0=_require(header, "depth0_m", 1, (int, float)),
        fill_value=_require(header, "fill_value", 1, int),
        reference_image_path=_require(header, "reference_image", 1, str),
        coarse=coarse,
        fine=fine,
        policy=_parse_policy(_require(header, "policy", 1, dict), 1),
        samples=samples,
    )


@dataclass
class ValidationReport:
    sample_count: int
    files_checked: int
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_manifest(m: DatasetManifest, base_dir: str | os.PathLike) -> ValidationReport:
    """Check counts, file existence, label finiteness, and self-consistency.

    Raises :class:`ManifestValidationError` listing every violation; returns
    a clean report otherwise.
    """
    base = Path(base_dir)
    violations = []
    expected = m.coarse.count + m.fine.count
    if len(m.samples) != expected:
        violations.append(
            f"sample count {len(m.samples)} != coarse+fine = {expected}"
        )
    stage_seen = {"coarse": 0, "fine": 0}
    files_checked = 0
    for s in m.samples:
        if s.stage not in stage_seen:
            violations.append(f"sample {s.index}: unknown stage '{s.stage}'")
        else:
            stage_seen[s.stage] += 1
        path = base / s.file
        files_checked += 1
        if not path.is_file():
            violations.append(f"sample {s.index}: missing image file {path}")
        if not (np.all(np.isfinite(s.label.t)) and np.all(np.isfinite(s.label.theta_u))):
            violations.append(f"sample {s.index}: non-finite label")
        # Label must equal the relative pose recomputed from the stored pose.
        recomputed = relative_pose(PoseTransform.identity(), from_pose6(s.pose))
        if (
            np.abs(recomputed.t - s.label.t).max() > 1e-6
            or np.abs(np.degrees(recomputed.theta_u) - np.degrees(s.label.theta_u)).max() > 1e-6
        ):
            violations.append(f"sample {s.index}: label inconsistent with recorded pose")
    indices = [s.index for s in m.samples]
    if indices != sorted(indices) or len(set(indices)) != len(indices):
        violations.append("sample indices are not strictly increasing")
    if m.samples and stage_seen["coarse"] != m.coarse.count:
        violations.append(
            f"coarse stage has {stage_seen['coarse']} samples, header says {m.coarse.count}"
        )
    if m.samples and stage_seen["fine"] != m.fine.count:
        violations.append(
            f"fine stage has {stage_seen['fine']} samples, header says {m.fine.count}"
        )
    if violations:
        raise ManifestValidationError(violations)
    return ValidationReport(
        sample_count=len(m.samples), files_checked=files_checked, violations=[]
    )
