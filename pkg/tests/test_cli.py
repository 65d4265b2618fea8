"""Command-line pipeline: subcommands, files, exit codes, determinism."""

import json

import numpy as np
import pytest

from plenocal import io
from plenocal.cli import main
from plenocal.rectification import write_pgm


def small_config(tmp_path, **overrides):
    """Config with a compact sensor so CLI runs stay quick."""
    cfg = {
        "camera": {
            "main_focal_mm": 50.0,
            "sensor_origin_mm": [-9.0, -6.1, 68.76],
            "mla_origin_mm": [0.07, -0.05, 65.35],
            "pixel_pitch_mm": 0.009,
            "sensor_resolution": [2000, 1350],
            "lens_pitch_mm": 0.3,
            "micro_image_radius_px": 16.5,
        },
        "board": {"rows": 5, "cols": 5, "cell_mm": [27.0, 27.0]},
        "poses": 6,
        "sigma": 0.0,
        "seed": 3,
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def run(*argv):
    return main([str(a) for a in argv])


class TestSimulate:
    def test_writes_artifacts(self, tmp_path):
        cfg = small_config(tmp_path)
        out = tmp_path / "sim"
        assert run("simulate", "--config", cfg, "--out", out) == 0
        assert (out / "observations.json").exists()
        assert (out / "ground_truth.json").exists()
        assert (out / "run_config.json").exists()
        obs, points, meta = io.read_observations(out / "observations.json")
        assert len(obs) > 0
        assert meta["sensor_px"] == (2000, 1350)

    def test_zero_poses_is_config_error(self, tmp_path):
        cfg = small_config(tmp_path)
        assert run("simulate", "--config", cfg, "--out", tmp_path / "x",
                   "--poses", 0) == 2

    def test_negative_sigma_is_config_error(self, tmp_path):
        cfg = small_config(tmp_path)
        assert run("simulate", "--config", cfg, "--out", tmp_path / "x",
                   "--sigma", -1.0) == 2

    def test_seed_reproducibility_byte_identical(self, tmp_path):
        cfg = small_config(tmp_path, sigma=0.2)
        a, b = tmp_path / "a", tmp_path / "b"
        assert run("simulate", "--config", cfg, "--out", a, "--seed", 5) == 0
        assert run("simulate", "--config", cfg, "--out", b, "--seed", 5) == 0
        for name in ("observations.json", "ground_truth.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_white_image_flag(self, tmp_path):
        cfg = small_config(tmp_path)
        out = tmp_path / "sim"
        assert run("simulate", "--config", cfg, "--out", out,
                   "--white-image") == 0
        assert (out / "white.pgm").exists()


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = small_config(tmp)
    out = tmp / "sim"
    assert run("simulate", "--config", cfg, "--out", out) == 0
    return out


class TestCalibrate:
    def test_noise_free_report(self, sim_dir, tmp_path):
        out = tmp_path / "cal"
        truth = io.read_ground_truth(sim_dir / "ground_truth.json")
        setting_path = tmp_path / "setting.json"
        setting_path.write_text(json.dumps(truth["setting"]))
        assert run("calibrate", sim_dir / "observations.json", "--out", out,
                   "--setting", setting_path) == 0
        report = io.read_report(out / "report.json")
        assert report["refined"]["rms_px"] < 1e-6
        assert (out / "residuals.csv").exists()
        header = (out / "residuals.csv").read_text().splitlines()[0]
        assert header == "pose_id,point_id,i,j,dx,dy"

    def test_default_setting_heuristic(self, sim_dir, tmp_path):
        out = tmp_path / "cal"
        assert run("calibrate", sim_dir / "observations.json", "--out", out) == 0
        assert io.read_report(out / "report.json")["refined"]["rms_px"] < 1e-6

    def test_two_pose_file_fails_with_exit_4(self, tmp_path):
        cfg = small_config(tmp_path, poses=2)
        simout = tmp_path / "sim2"
        assert run("simulate", "--config", cfg, "--out", simout) == 0
        assert run("calibrate", simout / "observations.json",
                   "--out", tmp_path / "cal2") == 4

    def test_noisy_rms_band(self, tmp_path):
        cfg = small_config(tmp_path, sigma=0.3, poses=8)
        simout = tmp_path / "sims"
        assert run("simulate", "--config", cfg, "--out", simout) == 0
        out = tmp_path / "cals"
        assert run("calibrate", simout / "observations.json", "--out", out) == 0
        report = io.read_report(out / "report.json")
        assert 0.24 <= report["refined"]["rms_px"] <= 0.36


class TestEvaluate:
    def test_noise_free_errors_vanish(self, sim_dir, tmp_path):
        cal = tmp_path / "cal"
        truth = io.read_ground_truth(sim_dir / "ground_truth.json")
        setting_path = tmp_path / "setting.json"
        setting_path.write_text(json.dumps(truth["setting"]))
        assert run("calibrate", sim_dir / "observations.json", "--out", cal,
                   "--setting", setting_path) == 0
        out = tmp_path / "eval"
        assert run("evaluate", cal / "report.json",
                   sim_dir / "ground_truth.json", "--out", out) == 0
        metrics = io.load_json(out / "metrics.json")
        assert metrics["refined"]["mean_intrinsic_error"] < 1e-6
        for pose in metrics["refined"]["pose_errors"]:
            assert pose["rotation_rad"] < 1e-6
            assert pose["translation_rel"] < 1e-6

    def test_gauge_mismatch_exit_5(self, sim_dir, tmp_path):
        cal = tmp_path / "cal"
        assert run("calibrate", sim_dir / "observations.json", "--out", cal) == 0
        truth = io.read_ground_truth(sim_dir / "ground_truth.json")
        truth["setting"]["f_prime"] *= 2.0
        tampered = tmp_path / "truth.json"
        io.dump_json(tampered, truth)
        assert run("evaluate", cal / "report.json", tampered,
                   "--out", tmp_path / "eval") == 5


class TestRectify:
    def test_identity_misalignment(self, tmp_path):
        cfg = small_config(tmp_path)
        simout = tmp_path / "simw"
        assert run("simulate", "--config", cfg, "--out", simout,
                   "--white-image") == 0
        out = tmp_path / "rect"
        assert run("rectify", simout / "observations.json",
                   "--white-image", simout / "white.pgm", "--out", out) == 0
        rect = io.load_json(out / "rectification.json")
        H = np.array(rect["homography"])
        assert np.abs(H - np.eye(3)).max() < 0.05
        # aligned input: both slope ranges sit at the detection noise floor
        assert rect["slope_range_before"] < 1e-5
        assert rect["slope_range_after"] < 1e-5
        assert (out / "observations_rectified.json").exists()
        assert (out / "centers.json").exists()

    def test_featureless_image_exit_6(self, sim_dir, tmp_path):
        flat = tmp_path / "flat.pgm"
        write_pgm(flat, np.full((600, 800), 500, dtype=np.uint16))
        assert run("rectify", sim_dir / "observations.json",
                   "--white-image", flat, "--out", tmp_path / "r") == 6

    def test_requires_exactly_one_source(self, sim_dir, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("rectify", sim_dir / "observations.json",
                "--out", tmp_path / "r")
        assert exc.value.code == 2


def test_calibrate_reports_are_deterministic(sim_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("calibrate", sim_dir / "observations.json", "--out", out) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert (a / "residuals.csv").read_bytes() == (b / "residuals.csv").read_bytes()
