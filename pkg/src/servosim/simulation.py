"""Closed-loop servoing experiments: scenario files, the per-iteration loop
(render, perturb, estimate, control, integrate), logging, and CSV export.

The loop measures convergence on the true pose error and requires ten
consecutive in-threshold iterations so a noisy estimator cannot declare
victory on a single crossing. Perturbations corrupt the camera image only,
never the kinematics.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from servosim.control import ControlGains, PhotometricContext, pbvs_velocity, photometric_velocity
from servosim.errors import ConfigError, ConnectionLost, EmptyLog, EstimatorTimeout, SingularSystem
from servosim.estimators import CorruptionSchedule, OracleEstimatorSession, RemoteEstimatorSession
from servosim.geometry import (
    CameraIntrinsics,
    Pose6,
    PoseTransform,
    compose,
    from_pose6,
    integrate_twist,
    inverse,
    relative_pose,
    to_pose6,
)
from servosim.image import ImageBuffer, load_image
from servosim.perturbations import LightingConfig, SlicParams, apply_lighting, composite_occlusion, extract_patch, slic_segment
from servosim.rendering import PlanarScene, render_view, ssd

FLAG_LIGHTING = 1
FLAG_OCCLUSION = 2
CONVERGENCE_STREAK = 10
DIVERGENCE_FACTOR = 10.0
ESTIMATOR_RETRY_BUDGET = 3

CSV_COLUMNS = [
    "iter",
    "err_tx",
    "err_ty",
    "err_tz",
    "err_rx",
    "err_ry",
    "err_rz",
    "est_tx",
    "est_ty",
    "est_tz",
    "est_rx",
    "est_ry",
    "est_rz",
    "v_lin_norm",
    "v_ang_norm",
    "ssd",
    "perturb_flags",
    "wall_ms",
]


@dataclass(frozen=True)
class OracleSpec:
    schedule: CorruptionSchedule = field(default_factory=CorruptionSchedule)


@dataclass(frozen=True)
class RemoteSpec:
    host: str
    port: int
    timeout: float = 2.0
    register_truth: bool = False


@dataclass(frozen=True)
class PerturbationWindow:
    """Image corruption active for iterations start <= i < end."""

    start: int
    end: int
    lighting: LightingConfig | None = None
    occlusion_corpus_file: str | None = None
    occlusion_cluster_id: int = 0
    occlusion_anchor: tuple[int, int] = (0, 0)
    occlusion_slic: SlicParams = field(default_factory=SlicParams)

    def __post_init__(self):
        if self.end <= self.start or self.start < 0:
            raise ValueError("window must satisfy 0 <= start < end")
        if self.lighting is None and self.occlusion_corpus_file is None:
            raise ValueError("window must define lighting or an occlusion")

    def contains(self, iteration: int) -> bool:
        return self.start <= iteration < self.end


@dataclass
class Scenario:
    scene: PlanarScene
    initial_offset: Pose6  # from the desired pose
    desired_pose: PoseTransform
    gains: ControlGains
    dt: float
    max_iterations: int
    estimator: OracleSpec | RemoteSpec
    epsilon_t: float  # meters
    epsilon_r_deg: float
    perturbation_windows: tuple[PerturbationWindow, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.epsilon_t <= 0 or self.epsilon_r_deg <= 0:
            raise ValueError("convergence thresholds must be positive")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    error: Pose6  # true pose error (current in desired frame)
    estimate: Pose6  # estimated delta-star
    v_lin_norm: float
    v_ang_norm: float
    ssd: float
    perturb_flags: int
    wall_ms: float


@dataclass
class ExperimentLog:
    records: list[IterationRecord]
    outcome: str  # converged | max_iterations | diverged | estimator_unavailable
    converged_at: int | None


@dataclass(frozen=True)
class RunSummary:
    final_translation_error_m: float
    final_rotation_error_deg: float
    iterations: int
    peak_linear_speed: float
    peak_angular_speed: float
    ssd_ratio: float  # final / initial
    outcome: str = ""
    converged_at: int | None = None

    def to_dict(self) -> dict:
        return {
            "final_translation_error_m": self.final_translation_error_m,
            "final_rotation_error_deg": self.final_rotation_error_deg,
            "iterations": self.iterations,
            "peak_linear_speed": self.peak_linear_speed,
            "peak_angular_speed": self.peak_angular_speed,
            "ssd_ratio": self.ssd_ratio,
            "outcome": self.outcome,
            "converged_at": self.converged_at,
        }


class _WindowPatchCache:
    """Occlusion patches for scenario windows, cut once and reused."""

    def __init__(self):
        self._cache = {}

    def patch(self, window: PerturbationWindow):
        key = (
            window.occlusion_corpus_file,
            window.occlusion_cluster_id,
            window.occlusion_anchor,
            window.occlusion_slic,
        )
        if key not in self._cache:
            corpus = load_image(window.occlusion_corpus_file)
            seg = slic_segment(
                corpus, window.occlusion_slic.cluster_count, window.occlusion_slic.compactness
            )
            cluster = window.occlusion_cluster_id % seg.cluster_count
            self._cache[key] = extract_patch(corpus, seg, cluster, window.occlusion_anchor)
        return self._cache[key]


def _make_session(scenario: Scenario):
    est = scenario.estimator
    if isinstance(est, OracleSpec):
        return OracleEstimatorSession(est.schedule, seed=scenario.seed)
    return RemoteEstimatorSession(
        est.host, est.port, timeout=est.timeout, register_truth=est.register_truth
    )


def run_experiment(scenario: Scenario) -> ExperimentLog:
    """Execute the closed loop until convergence, divergence, iteration
    budget, or estimator loss. Deterministic given the scenario seed."""
    scene = scenario.scene
    desired_pose = scenario.desired_pose
    current = compose(desired_pose, from_pose6(scenario.initial_offset))
    desired_image = render_view(scene, desired_pose)
    reference = PoseTransform.identity()

    session = _make_session(scenario)
    patches = _WindowPatchCache()
    eps_r = math.radians(scenario.epsilon_r_deg)

    try:
        desired_estimate = session.estimate_desired(
            desired_image, relative_pose(reference, desired_pose)
        )
        t_desired = from_pose6(desired_estimate)  # reference -> desired, as estimated

        init = relative_pose(desired_pose, current)
        init_t = float(np.linalg.norm(init.t))
        init_r = float(np.linalg.norm(init.theta_u))
        limit_t = DIVERGENCE_FACTOR * max(init_t, scenario.epsilon_t)
        limit_r = DIVERGENCE_FACTOR * max(init_r, eps_r)

        records: list[IterationRecord] = []
        streak = 0
        failures = 0
        outcome = "max_iterations"
        converged_at = None

        for it in range(scenario.max_iterations):
            t0 = time.perf_counter()
            image = render_view(scene, current)
            flags = 0
            for window in scenario.perturbation_windows:
                if not window.contains(it):
                    continue
                if window.lighting is not None:
                    image = apply_lighting(image, window.lighting)
                    flags |= FLAG_LIGHTING
                if window.occlusion_corpus_file is not None:
                    image = composite_occlusion(image, patches.patch(window))
                    flags |= FLAG_OCCLUSION

            true_rel = relative_pose(reference, current)
            estimate = None
            while True:
                try:
                    estimate = session.estimate_current(image, true_rel)
                    failures = 0
                    break
                except (EstimatorTimeout, ConnectionLost):
                    failures += 1
                    if failures >= ESTIMATOR_RETRY_BUDGET:
                        break
            if estimate is None:
                outcome = "estimator_unavailable"
                break

            delta_star = to_pose6(compose(inverse(t_desired), from_pose6(estimate)))
            twist = pbvs_velocity(delta_star, scenario.gains)

            err = relative_pose(desired_pose, current)
            records.append(
                IterationRecord(
                    iteration=it,
                    error=err,
                    estimate=delta_star,
                    v_lin_norm=float(np.linalg.norm(twist.linear)),
                    v_ang_norm=float(np.linalg.norm(twist.angular)),
                    ssd=ssd(image, desired_image),
                    perturb_flags=flags,
                    wall_ms=(time.perf_counter() - t0) * 1000.0,
                )
            )

            err_t = float(np.linalg.norm(err.t))
            err_r = float(np.linalg.norm(err.theta_u))
            if err_t < scenario.epsilon_t and err_r < eps_r:
                streak += 1
                if streak >= CONVERGENCE_STREAK:
                    outcome = "converged"
                    converged_at = len(records)
                    break
            else:
                streak = 0
            if err_t > limit_t or err_r > limit_r:
                outcome = "diverged"
                break

            current = integrate_twist(current, twist, scenario.dt)

        return ExperimentLog(records=records, outcome=outcome, converged_at=converged_at)
    finally:
        session.close()


def summarize(log: ExperimentLog) -> RunSummary:
    """Recompute the run summary from the records; idempotent."""
    if not log.records:
        raise EmptyLog("experiment log has no records")
    last = log.records[-1]
    first = log.records[0]
    ratio = last.ssd / first.ssd if first.ssd > 0 else 0.0
    return RunSummary(
        final_translation_error_m=float(np.linalg.norm(last.error.t)),
        final_rotation_error_deg=float(np.degrees(np.linalg.norm(last.error.theta_u))),
        iterations=len(log.records),
        peak_linear_speed=max(r.v_lin_norm for r in log.records),
        peak_angular_speed=max(r.v_ang_norm for r in log.records),
        ssd_ratio=ratio,
        outcome=log.outcome,
        converged_at=log.converged_at,
    )


def _fmt(value: float) -> str:
    return f"{value:.9g}"


def export_log(log: ExperimentLog, path) -> None:
    """One header row plus one row per iteration, floats at 9 significant
    digits; angles in degrees at this file boundary."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for r in log.records:
            err = r.error.to_file_units()
            est = r.estimate.to_file_units()
            row = (
                [str(r.iteration)]
                + [_fmt(v) for v in err]
                + [_fmt(v) for v in est]
                + [_fmt(r.v_lin_norm), _fmt(r.v_ang_norm), _fmt(r.ssd), str(r.perturb_flags), _fmt(r.wall_ms)]
            )
            fh.write(",".join(row) + "\n")


def read_log_csv(path) -> ExperimentLog:
    """Parse an exported CSV back into a log (outcome is not stored in CSV)."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines or lines[0].split(",") != CSV_COLUMNS:
        raise ConfigError(f"not a servosim log CSV: {path}")
    records = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(CSV_COLUMNS):
            raise ConfigError(f"bad CSV row with {len(parts)} columns")
        vals = [float(p) for p in parts]
        records.append(
            IterationRecord(
                iteration=int(vals[0]),
                error=Pose6.from_file_units(vals[1:7]),
                estimate=Pose6.from_file_units(vals[7:13]),
                v_lin_norm=vals[13],
                v_ang_norm=vals[14],
                ssd=vals[15],
                perturb_flags=int(vals[16]),
                wall_ms=vals[17],
            )
        )
    return ExperimentLog(records=records, outcome="", converged_at=None)


@dataclass
class PhotometricRun:
    ssd_initial: float
    ssd_final: float
    final_error: Pose6
    iterations: int
    ssd_history: list[float]

    @property
    def ssd_ratio(self) -> float:
        return self.ssd_final / self.ssd_initial if self.ssd_initial > 0 else 0.0


def run_photometric_experiment(
    scene: PlanarScene,
    desired_pose: PoseTransform,
    initial_offset: Pose6,
    gains: ControlGains,
    dt: float,
    max_iterations: int,
    stop_ssd_ratio: float = 0.0,
) -> PhotometricRun:
    """Direct photometric servoing baseline loop (no pose estimator)."""
    desired = render_view(scene, desired_pose)
    ctx = PhotometricContext(scene.intrinsics, scene.depth0)
    current_pose = compose(desired_pose, from_pose6(initial_offset))
    current = render_view(scene, current_pose)
    initial = ssd(current, desired)
    history = [initial]
    iterations = 0
    for _ in range(max_iterations):
        try:
            twist = photometric_velocity(current, desired, ctx, gains)
        except SingularSystem:
            break
        current_pose = integrate_twist(current_pose, twist, dt)
        current = render_view(scene, current_pose)
        iterations += 1
        history.append(ssd(current, desired))
        if initial > 0 and history[-1] <= stop_ssd_ratio * initial:
            break
    return PhotometricRun(
        ssd_initial=initial,
        ssd_final=history[-1],
        final_error=relative_pose(desired_pose, current_pose),
        iterations=iterations,
        ssd_history=history,
    )


# ---------------------------------------------------------------------------
# Scenario JSON

def _reject_unknown(data: dict, allowed: set[str], where: str):
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown fields {sorted(unknown)}")


def _need(data: dict, key: str, where: str):
    if key not in data:
        raise ConfigError(f"{where}: missing field '{key}'")
    return data[key]


def scenario_from_dict(data: dict, base_dir: Path | None = None) -> Scenario:
    base = base_dir or Path(".")
    _reject_unknown(
        data,
        {
            "scene",
            "initial_offset",
            "desired_pose",
            "gains",
            "dt",
            "max_iterations",
            "estimator",
            "perturbations",
            "convergence",
            "seed",
        },
        "scenario",
    )
    scene_d = _need(data, "scene", "scenario")
    _reject_unknown(
        scene_d, {"reference_image", "intrinsics", "depth0_m", "fill_value"}, "scenario.scene"
    )
    intr_d = _need(scene_d, "intrinsics", "scenario.scene")
    _reject_unknown(intr_d, {"fx", "fy", "cx", "cy", "width", "height"}, "scenario.scene.intrinsics")
    try:
        intrinsics = CameraIntrinsics(**intr_d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"scenario.scene.intrinsics: {e}")
    ref_path = Path(_need(scene_d, "reference_image", "scenario.scene"))
    if not ref_path.is_absolute():
        ref_path = base / ref_path
    if not ref_path.is_file():
        raise ConfigError(f"scenario.scene.reference_image: file not found: {ref_path}")
    reference = load_image(ref_path)
    if (reference.width, reference.height) != (intrinsics.width, intrinsics.height):
        raise ConfigError(
            "scenario.scene: reference image size "
            f"{reference.width}x{reference.height} does not match intrinsics "
            f"{intrinsics.width}x{intrinsics.height}"
        )
    scene = PlanarScene(
        reference,
        intrinsics,
        depth0=float(_need(scene_d, "depth0_m", "scenario.scene")),
        fill_value=int(scene_d.get("fill_value", 128)),
    )

    gains_d = _need(data, "gains", "scenario")
    _reject_unknown(gains_d, {"lambda", "max_linear_speed", "max_angular_speed"}, "scenario.gains")
    gains = ControlGains(
        lambda_=float(_need(gains_d, "lambda", "scenario.gains")),
        max_linear_speed=float(gains_d.get("max_linear_speed", 0.25)),
        max_angular_speed=float(gains_d.get("max_angular_speed", 0.5)),
    )

    est_d = _need(data, "estimator", "scenario")
    est_type = _need(est_d, "type", "scenario.estimator")
    if est_type == "oracle":
        _reject_unknown(est_d, {"type", "schedule"}, "scenario.estimator")
        schedule = CorruptionSchedule.from_dict(est_d.get("schedule", {}))
        estimator = OracleSpec(schedule=schedule)
    elif est_type == "remote":
        _reject_unknown(
            est_d, {"type", "host", "port", "timeout_s", "register_truth"}, "scenario.estimator"
        )
        estimator = RemoteSpec(
            host=_need(est_d, "host", "scenario.estimator"),
            port=int(_need(est_d, "port", "scenario.estimator")),
            timeout=float(est_d.get("timeout_s", 2.0)),
            register_truth=bool(est_d.get("register_truth", False)),
        )
    else:
        raise ConfigError(f"scenario.estimator: unknown type '{est_type}'")

    windows = []
    for i, w in enumerate(data.get("perturbations", [])):
        where = f"scenario.perturbations[{i}]"
        _reject_unknown(w, {"start", "end", "lighting", "occlusion"}, where)
        lighting = None
        corpus_file = None
        cluster_id = 0
        anchor = (0, 0)
        slic = SlicParams()
        if "lighting" in w:
            lighting = LightingConfig.from_dict(w["lighting"])
        if "occlusion" in w:
            occ = w["occlusion"]
            _reject_unknown(occ, {"corpus_file", "cluster_id", "anchor", "slic"}, where + ".occlusion")
            corpus = Path(_need(occ, "corpus_file", where))
            if not corpus.is_absolute():
                corpus = base / corpus
            if not corpus.is_file():
                raise ConfigError(f"{where}.occlusion: corpus file not found: {corpus}")
            corpus_file = str(corpus)
            cluster_id = int(_need(occ, "cluster_id", where))
            anchor = tuple(int(v) for v in _need(occ, "anchor", where))
            if "slic" in occ:
                slic = SlicParams(**occ["slic"])
        try:
            windows.append(
                PerturbationWindow(
                    start=int(_need(w, "start", where)),
                    end=int(_need(w, "end", where)),
                    lighting=lighting,
                    occlusion_corpus_file=corpus_file,
                    occlusion_cluster_id=cluster_id,
                    occlusion_anchor=anchor,
                    occlusion_slic=slic,
                )
            )
        except ValueError as e:
            raise ConfigError(f"{where}: {e}")

    conv = _need(data, "convergence", "scenario")
    _reject_unknown(conv, {"epsilon_t_m", "epsilon_r_deg"}, "scenario.convergence")

    try:
        return Scenario(
            scene=scene,
            initial_offset=Pose6.from_file_units(_need(data, "initial_offset", "scenario")),
            desired_pose=from_pose6(Pose6.from_file_units(_need(data, "desired_pose", "scenario"))),
            gains=gains,
            dt=float(_need(data, "dt", "scenario")),
            max_iterations=int(_need(data, "max_iterations", "scenario")),
            estimator=estimator,
            epsilon_t=float(_need(conv, "epsilon_t_m", "scenario.convergence")),
            epsilon_r_deg=float(_need(conv, "epsilon_r_deg", "scenario.convergence")),
            perturbation_windows=tuple(windows),
            seed=int(data.get("seed", 0)),
        )
    except ValueError as e:
        raise ConfigError(f"scenario: {e}")


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"scenario file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"scenario file is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError("scenario file must hold a JSON object")
    return scenario_from_dict(data, base_dir=path.parent)
