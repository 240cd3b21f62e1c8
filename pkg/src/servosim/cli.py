"""Command-line entry point: dataset generation, experiment runs, the
reference oracle service, report plots, and artifact validation.

Exit codes are the machine contract: 0 success/converged, 2 config error,
3 I/O error, 4 not converged, 5 diverged, 6 estimator unreachable.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from servosim.dataset import (
    LightingRanges,
    PerturbationPolicy,
    PoseSamplerConfig,
    build_dataset,
    read_manifest,
    validate_manifest,
)
from servosim.errors import (
    ConfigError,
    DegeneratePose,
    EstimatorUnreachable,
    ManifestParseError,
    ManifestValidationError,
)
from servosim.estimators import CorruptionSchedule
from servosim.geometry import CameraIntrinsics
from servosim.image import load_image
from servosim.oracle_service import make_oracle_server
from servosim.perturbations import SlicParams
from servosim.rendering import PlanarScene
from servosim.simulation import (
    export_log,
    load_scenario,
    read_log_csv,
    run_experiment,
    scenario_from_dict,
    summarize,
)
from servosim.svgplot import line_plot

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NOT_CONVERGED = 4
EXIT_DIVERGED = 5
EXIT_ESTIMATOR = 6


def _apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply repeatable --override key.path=value entries to a config dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = value
    return data


def _load_json_config(path: str) -> dict:
    p = Path(path)
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


_DATASET_KEYS = {
    "reference_image",
    "intrinsics",
    "depth0_m",
    "fill_value",
    "seed",
    "coarse",
    "fine",
    "perturbations",
}


def _parse_sampler_cfg(data: dict, where: str, coarse: PoseSamplerConfig | None = None):
    allowed = {"count", "std_translation_m", "std_rotation_deg", "scale_of_coarse"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown fields {sorted(unknown)}")
    if "count" not in data:
        raise ConfigError(f"{where}: missing field 'count'")
    if "scale_of_coarse" in data:
        if coarse is None:
            raise ConfigError(f"{where}: scale_of_coarse only applies to the fine stage")
        return coarse.scaled(float(data["scale_of_coarse"]), count=int(data["count"]))
    try:
        return PoseSamplerConfig(
            count=int(data["count"]),
            std_translation=tuple(data.get("std_translation_m", (0.01, 0.01, 0.01))),
            std_rotation=tuple(data.get("std_rotation_deg", (10.0, 10.0, 20.0))),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}")


def _parse_dataset_config(data: dict, base: Path):
    unknown = set(data) - _DATASET_KEYS
    if unknown:
        raise ConfigError(f"dataset config: unknown fields {sorted(unknown)}")
    for key in ("reference_image", "intrinsics", "depth0_m", "coarse", "fine"):
        if key not in data:
            raise ConfigError(f"dataset config: missing field '{key}'")
    try:
        intrinsics = CameraIntrinsics(**data["intrinsics"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"dataset config intrinsics: {e}")

    ref_path = Path(data["reference_image"])
    if not ref_path.is_absolute():
        ref_path = base / ref_path
    if not ref_path.is_file():
        raise FileNotFoundError(f"reference image not found: {ref_path}")
    reference = load_image(ref_path)
    if (reference.width, reference.height) != (intrinsics.width, intrinsics.height):
        raise ConfigError(
            f"reference image is {reference.width}x{reference.height}, intrinsics say "
            f"{intrinsics.width}x{intrinsics.height}"
        )
    scene = PlanarScene(
        reference,
        intrinsics,
        depth0=float(data["depth0_m"]),
        fill_value=int(data.get("fill_value", 128)),
    )
    coarse = _parse_sampler_cfg(data["coarse"], "dataset config coarse")
    fine = _parse_sampler_cfg(data["fine"], "dataset config fine", coarse=coarse)

    pert = data.get("perturbations", {})
    allowed = {"lighting_fraction", "occlusion_fraction", "corpus_dir", "slic", "lighting_ranges"}
    unknown = set(pert) - allowed
    if unknown:
        raise ConfigError(f"dataset config perturbations: unknown fields {sorted(unknown)}")
    corpus_dir = pert.get("corpus_dir")
    if corpus_dir is not None and not Path(corpus_dir).is_absolute():
        corpus_dir = str(base / corpus_dir)
    slic_d = pert.get("slic", {})
    ranges_d = pert.get("lighting_ranges", {})
    try:
        policy = PerturbationPolicy(
            lighting_fraction=float(pert.get("lighting_fraction", 0.0)),
            occlusion_fraction=float(pert.get("occlusion_fraction", 0.0)),
            corpus_dir=corpus_dir,
            slic=SlicParams(
                cluster_count=int(slic_d.get("cluster_count", 64)),
                compactness=float(slic_d.get("compactness", 10.0)),
            ),
            lighting_ranges=LightingRanges(
                gain=tuple(ranges_d.get("gain", (0.7, 1.3))),
                bias=tuple(ranges_d.get("bias", (-30.0, 30.0))),
                light_count=tuple(ranges_d.get("light_count", (1, 3))),
                amplitude=tuple(ranges_d.get("amplitude", (0.6, 1.4))),
                sigma_fraction=tuple(ranges_d.get("sigma_fraction", (0.15, 0.5))),
            ),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"dataset config perturbations: {e}")
    return scene, coarse, fine, policy, str(ref_path)


def cmd_dataset(args) -> int:
    data = _apply_overrides(_load_json_config(args.config), args.override)
    base = Path(args.config).parent
    scene, coarse, fine, policy, ref_path = _parse_dataset_config(data, base)
    seed = args.seed if args.seed is not None else int(data.get("seed", 0))
    out = Path(args.out)
    started = time.perf_counter()
    manifest = build_dataset(
        scene,
        coarse,
        fine,
        policy,
        seed=seed,
        out_dir=out,
        workers=args.workers,
        reference_image_path=ref_path,
    )
    elapsed = time.perf_counter() - started
    print(f"wrote {len(manifest.samples)} samples to {out} in {elapsed:.1f} s")
    return EXIT_OK


def cmd_run(args) -> int:
    data = _apply_overrides(_load_json_config(args.config), args.override)
    scenario = scenario_from_dict(data, base_dir=Path(args.config).parent)
    if args.seed is not None:
        scenario.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = run_experiment(scenario)
    export_log(log, out / "log.csv")
    summary = summarize(log)
    (out / "summary.json").write_text(
        json.dumps(summary.to_dict(), indent=2) + "\n", encoding="utf-8"
    )
    print(
        f"outcome={log.outcome} iterations={summary.iterations} "
        f"final_err={summary.final_translation_error_m * 1000:.3f}mm/"
        f"{summary.final_rotation_error_deg:.3f}deg"
    )
    if log.outcome == "converged":
        return EXIT_OK
    if log.outcome == "max_iterations":
        return EXIT_NOT_CONVERGED
    if log.outcome == "diverged":
        return EXIT_DIVERGED
    return EXIT_ESTIMATOR


def cmd_serve_oracle(args) -> int:
    schedule = CorruptionSchedule()
    seed = args.seed if args.seed is not None else 0
    name = "servosim-oracle"
    if args.config:
        data = _apply_overrides(_load_json_config(args.config), args.override)
        unknown = set(data) - {"schedule", "seed", "name"}
        if unknown:
            raise ConfigError(f"serve-oracle config: unknown fields {sorted(unknown)}")
        schedule = CorruptionSchedule.from_dict(data.get("schedule", {}))
        if args.seed is None:
            seed = int(data.get("seed", 0))
        name = data.get("name", name)
    try:
        server = make_oracle_server(schedule, seed=seed, port=args.port, name=name)
    except OSError as e:
        print(f"cannot bind port {args.port}: {e}", file=sys.stderr)
        return EXIT_IO
    print(f"serving oracle estimates on port {server.port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_report(args) -> int:
    log = read_log_csv(args.log_csv)
    if not log.records:
        raise ConfigError(f"log CSV has no records: {args.log_csv}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    iters = [float(r.iteration) for r in log.records]
    t_norm = [float(np.linalg.norm(r.error.t)) for r in log.records]
    r_norm = [float(np.degrees(np.linalg.norm(r.error.theta_u))) for r in log.records]
    line_plot(
        [("|t| (m)", iters, t_norm), ("|r| (deg)", iters, r_norm)],
        "Positioning error",
        "iteration",
        "error",
        out / "positioning_error.svg",
    )
    line_plot(
        [("SSD", iters, [r.ssd for r in log.records])],
        "SSD distance",
        "iteration",
        "sum of squared differences",
        out / "ssd.svg",
    )
    err_cols = list(zip(*[r.error.to_file_units() for r in log.records]))
    labels = ["tx (m)", "ty (m)", "tz (m)", "rx (deg)", "ry (deg)", "rz (deg)"]
    line_plot(
        [(lbl, iters, list(col)) for lbl, col in zip(labels, err_cols)],
        "Translational and rotational errors",
        "iteration",
        "error",
        out / "pose_errors.svg",
    )
    line_plot(
        [
            ("|v| (m/s)", iters, [r.v_lin_norm for r in log.records]),
            ("|w| (rad/s)", iters, [r.v_ang_norm for r in log.records]),
        ],
        "Camera velocities",
        "iteration",
        "speed",
        out / "velocities.svg",
    )
    summary = summarize(log)
    lines = [
        f"iterations: {summary.iterations}",
        f"final translation error: {summary.final_translation_error_m:.9g} m",
        f"final rotation error: {summary.final_rotation_error_deg:.9g} deg",
        f"peak linear speed: {summary.peak_linear_speed:.9g} m/s",
        f"peak angular speed: {summary.peak_angular_speed:.9g} rad/s",
        f"ssd final/initial: {summary.ssd_ratio:.9g}",
    ]
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote 4 plots and summary.txt to {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    path = Path(args.path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    if path.suffix == ".jsonl":
        manifest = read_manifest(path)
        report = validate_manifest(manifest, path.parent)
        print(f"manifest ok: {report.sample_count} samples, {report.files_checked} files")
    else:
        load_scenario(path)
        print("scenario ok")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="servosim",
        description="Planar-scene visual servoing simulator and dataset synthesizer",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument(
            "--override",
            action="append",
            default=[],
            metavar="K=V",
            help="override a config field (dotted path), repeatable",
        )

    p_dataset = sub.add_parser("dataset", help="generate a training dataset")
    common(p_dataset)
    p_dataset.add_argument("--out", required=True, help="output directory")
    p_dataset.add_argument("--workers", type=int, default=None, help="worker threads")
    p_dataset.set_defaults(func=cmd_dataset)

    p_run = sub.add_parser("run", help="run a closed-loop servoing experiment")
    common(p_run)
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.set_defaults(func=cmd_run)

    p_serve = sub.add_parser("serve-oracle", help="serve the reference oracle estimator")
    common(p_serve, config_required=False)
    p_serve.add_argument("--port", type=int, default=0, help="TCP port (0 = ephemeral)")
    p_serve.set_defaults(func=cmd_serve_oracle)

    p_report = sub.add_parser("report", help="render SVG plots from a log CSV")
    p_report.add_argument("log_csv", help="log.csv produced by `run`")
    p_report.add_argument("--out", required=True, help="output directory")
    p_report.set_defaults(func=cmd_report)

    p_validate = sub.add_parser("validate", help="validate a manifest or scenario file")
    p_validate.add_argument("path", help="manifest.jsonl or scenario.json")
    p_validate.set_defaults(func=cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ManifestParseError, ManifestValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except EstimatorUnreachable as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ESTIMATOR
    except DegeneratePose as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
