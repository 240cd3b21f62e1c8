import hashlib
import json
import socket
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from servosim.cli import main
from servosim.image import save_image
from servosim.protocol import EstimatorClient
from tests.conftest import photo_texture, smooth_texture


def write_dataset_config(tmp_path, count=6, fine=2, with_perturbations=False):
    save_image(smooth_texture(32, 32, seed=70), tmp_path / "ref.png")
    cfg = {
        "reference_image": "ref.png",
        "intrinsics": {"fx": 32.0, "fy": 32.0, "cx": 16.0, "cy": 16.0, "width": 32, "height": 32},
        "depth0_m": 0.2,
        "fill_value": 128,
        "seed": 1,
        "coarse": {"count": count},
        "fine": {"count": fine, "scale_of_coarse": 0.01},
    }
    if with_perturbations:
        corpus = tmp_path / "corpus"
        corpus.mkdir(exist_ok=True)
        save_image(photo_texture(48, 48, seed=71), corpus / "c0.png")
        cfg["perturbations"] = {
            "lighting_fraction": 0.5,
            "occlusion_fraction": 0.5,
            "corpus_dir": "corpus",
            "slic": {"cluster_count": 8, "compactness": 10.0},
        }
    path = tmp_path / "dataset.json"
    path.write_text(json.dumps(cfg))
    return path


def write_scenario(tmp_path, **tweaks):
    save_image(smooth_texture(48, 48, seed=72), tmp_path / "scene.png")
    data = {
        "scene": {
            "reference_image": "scene.png",
            "intrinsics": {"fx": 48.0, "fy": 48.0, "cx": 24.0, "cy": 24.0, "width": 48, "height": 48},
            "depth0_m": 0.3,
            "fill_value": 128,
        },
        "initial_offset": [0.004, -0.003, 0.002, 1.0, -1.0, 4.0],
        "desired_pose": [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        "gains": {"lambda": 0.8, "max_linear_speed": 0.25, "max_angular_speed": 0.5},
        "dt": 0.05,
        "max_iterations": 400,
        "estimator": {"type": "oracle", "schedule": {}},
        "perturbations": [],
        "convergence": {"epsilon_t_m": 0.0005, "epsilon_r_deg": 0.05},
        "seed": 2,
    }
    data.update(tweaks)
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(data))
    return path


def tree_digest(root):
    digest = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(root)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


class TestDatasetCommand:
    def test_valid_config_writes_images(self, tmp_path, capsys):
        cfg = write_dataset_config(tmp_path, count=8, fine=2)
        code = main(["dataset", "--config", str(cfg), "--out", str(tmp_path / "out")])
        assert code == 0
        assert len(list((tmp_path / "out" / "images").glob("*.png"))) == 10
        out = capsys.readouterr().out
        assert "10 samples" in out

    def test_missing_reference_image_exit_3(self, tmp_path, capsys):
        cfg = write_dataset_config(tmp_path)
        (tmp_path / "ref.png").unlink()
        code = main(["dataset", "--config", str(cfg), "--out", str(tmp_path / "out")])
        assert code == 3
        assert "ref.png" in capsys.readouterr().err

    def test_unknown_config_field_exit_2(self, tmp_path, capsys):
        cfg = write_dataset_config(tmp_path)
        data = json.loads(cfg.read_text())
        data["bogus"] = 1
        cfg.write_text(json.dumps(data))
        code = main(["dataset", "--config", str(cfg), "--out", str(tmp_path / "out")])
        assert code == 2

    def test_same_seed_identical_tree(self, tmp_path):
        cfg = write_dataset_config(tmp_path, count=5, fine=1, with_perturbations=True)
        assert main(["dataset", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
        assert main(["dataset", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_seed_flag_changes_output(self, tmp_path):
        cfg = write_dataset_config(tmp_path, count=5, fine=1)
        assert main(["dataset", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "9"]) == 0
        assert main(["dataset", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "10"]) == 0
        assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "b")


class TestRunCommand:
    def test_nominal_scenario_exit_0(self, tmp_path, capsys):
        scen = write_scenario(tmp_path)
        code = main(["run", "--config", str(scen), "--out", str(tmp_path / "run")])
        assert code == 0
        assert (tmp_path / "run" / "log.csv").is_file()
        summary = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert summary["outcome"] == "converged"

    def test_max_iterations_exit_4(self, tmp_path):
        scen = write_scenario(tmp_path, max_iterations=1, initial_offset=[0.02, 0, 0, 0, 0, 0])
        code = main(["run", "--config", str(scen), "--out", str(tmp_path / "run")])
        assert code == 4

    def test_remote_without_server_exit_6(self, tmp_path):
        scen = write_scenario(
            tmp_path,
            estimator={"type": "remote", "host": "127.0.0.1", "port": 1, "timeout_s": 0.2},
        )
        code = main(["run", "--config", str(scen), "--out", str(tmp_path / "run")])
        assert code == 6

    def test_override_flag(self, tmp_path):
        scen = write_scenario(tmp_path)
        code = main(
            [
                "run",
                "--config",
                str(scen),
                "--out",
                str(tmp_path / "run"),
                "--override",
                "max_iterations=1",
                "--override",
                "initial_offset=[0.02,0,0,0,0,0]",
            ]
        )
        assert code == 4


class TestServeOracle:
    def test_handshake_and_estimate_over_subprocess(self, tmp_path):
        # Pick a free port first, then serve on it.
        probe = socket.socket()
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
        probe.close()
        proc = subprocess.Popen(
            [sys.executable, "-m", "servosim", "serve-oracle", "--port", str(port)],
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
        )
        try:
            client = None
            for _ in range(50):
                try:
                    client = EstimatorClient("127.0.0.1", port, timeout=1.0)
                    client.connect()
                    break
                except Exception:
                    client = None
                    time.sleep(0.1)
            assert client is not None, "server never came up"
            assert client.server_name == "servosim-oracle"
            img = smooth_texture(16, 16, seed=73)
            pose, reply = client.request_estimate(img, truth_file_units=[0.0] * 6)
            assert pose == pytest.approx([0.0] * 6)
            client.close()
        finally:
            proc.terminate()
            proc.wait(timeout=5)


class TestReportCommand:
    def _run_log(self, tmp_path):
        scen = write_scenario(tmp_path)
        assert main(["run", "--config", str(scen), "--out", str(tmp_path / "run")]) == 0
        return tmp_path / "run" / "log.csv"

    def test_emits_four_svgs_and_summary(self, tmp_path):
        csv = self._run_log(tmp_path)
        code = main(["report", str(csv), "--out", str(tmp_path / "rep")])
        assert code == 0
        names = sorted(p.name for p in (tmp_path / "rep").iterdir())
        assert names == [
            "pose_errors.svg",
            "positioning_error.svg",
            "ssd.svg",
            "summary.txt",
            "velocities.svg",
        ]
        for svg in (tmp_path / "rep").glob("*.svg"):
            text = svg.read_text()
            assert text.startswith("<svg") and text.rstrip().endswith("</svg>")

    def test_byte_identical_on_rerun(self, tmp_path):
        csv = self._run_log(tmp_path)
        assert main(["report", str(csv), "--out", str(tmp_path / "r1")]) == 0
        assert main(["report", str(csv), "--out", str(tmp_path / "r2")]) == 0
        assert tree_digest(tmp_path / "r1") == tree_digest(tmp_path / "r2")

    def test_empty_csv_exit_2(self, tmp_path):
        bad = tmp_path / "empty.csv"
        bad.write_text("")
        assert main(["report", str(bad), "--out", str(tmp_path / "rep")]) == 2


class TestValidateCommand:
    def test_manifest_ok(self, tmp_path, capsys):
        cfg = write_dataset_config(tmp_path, count=4, fine=1)
        assert main(["dataset", "--config", str(cfg), "--out", str(tmp_path / "ds")]) == 0
        code = main(["validate", str(tmp_path / "ds" / "manifest.jsonl")])
        assert code == 0
        assert "manifest ok" in capsys.readouterr().out

    def test_manifest_with_missing_file(self, tmp_path, capsys):
        cfg = write_dataset_config(tmp_path, count=4, fine=1)
        assert main(["dataset", "--config", str(cfg), "--out", str(tmp_path / "ds")]) == 0
        next(iter((tmp_path / "ds" / "images").glob("*.png"))).unlink()
        code = main(["validate", str(tmp_path / "ds" / "manifest.jsonl")])
        assert code == 2

    def test_scenario_ok(self, tmp_path):
        scen = write_scenario(tmp_path)
        assert main(["validate", str(scen)]) == 0

    def test_scenario_unknown_field(self, tmp_path):
        scen = write_scenario(tmp_path, wat=1)
        assert main(["validate", str(scen)]) == 2
