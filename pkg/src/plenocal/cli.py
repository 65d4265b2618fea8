"""Batch command-line front end: simulate | rectify | calibrate | evaluate.

Every command writes its fully resolved configuration next to its outputs and
is deterministic for fixed seeds.  Exit codes are a stable contract:

    2  configuration / argument error
    3  simulation (generation) failure
    4  calibration failure
    5  gauge mismatch between result and ground truth
    6  center detection / rectification failure
"""

import os

# honor the thread cap before numpy pulls in its BLAS thread pools
_threads = os.environ.get("PLENOCAL_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .calibration import RefineOptions, calibrate
from .errors import PlenocalError
from .evaluate import intrinsic_errors, mean_intrinsic_error, pose_errors
from .projection import DistortionParams, residuals
from .rectification import (detect_centers, estimate_rectifying_homography,
                            read_pgm, rectify_observations, row_slopes,
                            write_pgm)
from .simulator import (aligned_mla, default_envelope, default_setting,
                        generate_poses, reference_board, reference_camera,
                        physical_to_tpp, synthesize_observations,
                        synthesize_white_image)
from .tpp import TppParams

log = logging.getLogger("plenocal")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_GENERATION = 3
EXIT_CALIBRATION = 4
EXIT_GAUGE = 5
EXIT_DETECTION = 6


class ConfigError(Exception):
    pass


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_config(out: Path, payload: dict) -> None:
    io.dump_json(out / "run_config.json", payload)


# --- simulate -----------------------------------------------------------------

def _load_simulate_config(args) -> dict:
    cfg = {
        "camera": io.camera_to_dict(reference_camera()),
        "board": io.board_to_dict(reference_board()),
        "poses": 12,
        "sigma": 0.0,
        "seed": 0,
        "distortion": None,
        "misalignment_deg": None,
        "white_image": False,
        "scene_range_mm": [1300.0, 1700.0],
        "max_rotation_deg": 40.0,
    }
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg.update(json.load(fh))
    for key in ("poses", "sigma", "seed"):
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    if args.white_image:
        cfg["white_image"] = True
    if args.misalign_deg is not None:
        cfg["misalignment_deg"] = list(args.misalign_deg)
    if cfg["poses"] < 1:
        raise ConfigError(f"pose count must be positive, got {cfg['poses']}")
    if cfg["sigma"] < 0:
        raise ConfigError(f"noise sigma must be non-negative, got {cfg['sigma']}")
    return cfg


def cmd_simulate(args) -> int:
    try:
        cfg = _load_simulate_config(args)
    except (ConfigError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    out = _out_dir(args)
    try:
        camera = io.camera_from_dict(cfg["camera"])
        board = io.board_from_dict(cfg["board"])
        envelope = default_envelope(camera, board,
                                    tuple(cfg["scene_range_mm"]),
                                    max_rotation_deg=cfg["max_rotation_deg"])
        poses = generate_poses(cfg["poses"], cfg["seed"], envelope)
        dist = (DistortionParams(**cfg["distortion"]) if cfg["distortion"]
                else DistortionParams())
        mla = None
        if cfg["misalignment_deg"] is not None:
            rvec = np.radians(np.asarray(cfg["misalignment_deg"], dtype=float))
            mla = aligned_mla(camera, rotation=rvec)
        observations = synthesize_observations(
            camera, board, poses, dist, cfg["sigma"], cfg["seed"] + 1,
            misalignment=mla)
        _, tpp_out = physical_to_tpp(camera)
        tpp_in, _ = physical_to_tpp(camera)
        io.write_observations(
            out / "observations.json", observations,
            board_rows=board.rows, board_cols=board.cols, cell_mm=board.cell,
            pixel_pitch_mm=camera.pixel_pitch, sensor_px=camera.sensor_resolution)
        io.write_ground_truth(
            out / "ground_truth.json", tpp=tpp_out, tpp_interior=tpp_in,
            dist=dist, poses=poses, setting=default_setting(camera),
            noise_sigma=cfg["sigma"], seed=cfg["seed"],
            physical=io.camera_to_dict(camera),
            misalignment=io.mla_to_dict(mla) if mla is not None else None)
        if cfg["white_image"]:
            write_pgm(out / "white.pgm", synthesize_white_image(camera, mla))
        _write_run_config(out, {"command": "simulate", **cfg})
    except PlenocalError as exc:
        log.error("simulation failed: %s: %s", type(exc).__name__, exc)
        return EXIT_GENERATION
    log.info("simulated %d observations over %d poses", len(observations),
             cfg["poses"])
    return EXIT_OK


# --- calibrate -----------------------------------------------------------------

def setting_from_observations(observations, sensor_px) -> TppParams:
    """Heuristic decode setting for files without one: unit x-y scale, the
    micro-image pitch estimated from mean pixel positions per lens, offsets
    at the image center, and a plane separation in the same regime."""
    sums: dict[tuple[int, int], list] = {}
    for o in observations:
        acc = sums.setdefault((o.lens_i, o.lens_j), [0.0, 0.0, 0])
        acc[0] += o.px
        acc[1] += o.py
        acc[2] += 1
    labels = np.array(sorted(sums), dtype=float)
    means = np.array([(sums[tuple(lbl)][0] / sums[tuple(lbl)][2],
                       sums[tuple(lbl)][1] / sums[tuple(lbl)][2])
                      for lbl in labels.astype(int)])
    A = np.column_stack([labels, np.ones(len(labels))])
    coef_x, *_ = np.linalg.lstsq(A, means[:, 0], rcond=None)
    coef_y, *_ = np.linalg.lstsq(A, means[:, 1], rcond=None)
    pitch = (abs(coef_x[0]) + abs(coef_y[1])) / 2.0
    if not np.isfinite(pitch) or pitch <= 0:
        raise ConfigError("cannot estimate a micro-image pitch from the observations")
    w, h = sensor_px if sensor_px and sensor_px[0] else (2.0 * means[:, 0].max(),
                                                         2.0 * means[:, 1].max())
    return TppParams.isotropic(1.0, pitch, w / 2.0, h / 2.0, 11.0 * pitch)


def cmd_calibrate(args) -> int:
    out = _out_dir(args)
    try:
        observations, board_points, meta = io.read_observations(args.observations)
        if args.setting:
            setting = io.tpp_from_dict(io.load_json(args.setting))
        else:
            setting = setting_from_observations(observations, meta["sensor_px"])
        if args.fixed_fprime is not None:
            if args.fixed_fprime <= 0:
                raise ConfigError("--fixed-fprime must be positive")
            setting = TppParams.isotropic(setting.k_x, setting.k_u, setting.u_0,
                                          setting.v_0, args.fixed_fprime,
                                          f_prime=args.fixed_fprime)
    except (ConfigError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    options = RefineOptions(
        optimize_distortion_centers=args.optimize_distortion_centers,
        optimize_xy_distortion=not args.fix_xy_distortion,
        max_iterations=args.max_iterations,
        sensor_size=meta["sensor_px"] if meta["sensor_px"][0] else None)
    try:
        output = calibrate(observations, board_points, setting, options)
    except PlenocalError as exc:
        log.error("calibration failed: %s: %s", type(exc).__name__, exc)
        return EXIT_CALIBRATION
    res, _ = residuals(observations, board_points, output.refined.poses,
                       output.refined.tpp, output.refined.dist)
    from .projection import sort_observations
    option_echo = {
        "optimize_distortion_centers": args.optimize_distortion_centers,
        "fix_xy_distortion": args.fix_xy_distortion,
        "max_iterations": args.max_iterations,
    }
    io.write_report(out / "report.json", output, options=option_echo)
    io.write_residual_csv(out / "residuals.csv", sort_observations(observations), res)
    _write_run_config(out, {
        "command": "calibrate", "observations": str(args.observations),
        "setting": io.tpp_to_dict(setting), **option_echo})
    log.info("linear RMS %.6g px, refined RMS %.6g px",
             output.linear.rms, output.refined.rms)
    return EXIT_OK


# --- evaluate -----------------------------------------------------------------

def _settings_match(a: dict, b: dict, tol: float = 1e-9) -> bool:
    keys = {"k_xy", "k_uv", "u_0", "v_0", "f_prime"}
    for k in keys:
        va, vb = float(a[k]), float(b[k])
        if abs(va - vb) > tol * max(1.0, abs(va), abs(vb)):
            return False
    return True


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    try:
        report = io.read_report(args.result)
        truth = io.read_ground_truth(args.truth)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    if not _settings_match(report["setting"], truth["setting"]):
        log.error("gauge mismatch: result and ground truth use different "
                  "decode settings")
        return EXIT_GAUGE
    tpp_true = io.tpp_from_dict(truth["tpp"])
    poses_true = [io.pose_from_dict(p) for p in truth["poses"]]
    payload = {}
    for stage in ("linear", "refined"):
        result = io.result_from_dict(report[stage])
        if len(result.poses) != len(poses_true):
            log.error("gauge mismatch: %d estimated poses vs %d ground-truth poses",
                      len(result.poses), len(poses_true))
            return EXIT_GAUGE
        errs = intrinsic_errors(result.tpp, tpp_true)
        payload[stage] = {
            "intrinsic_errors": errs,
            "mean_intrinsic_error": mean_intrinsic_error(result.tpp, tpp_true),
            "pose_errors": pose_errors(result.poses, poses_true),
            "rms_px": result.rms,
        }
    io.write_metrics(out / "metrics.json", payload)
    _write_run_config(out, {"command": "evaluate", "result": str(args.result),
                            "truth": str(args.truth)})
    log.info("refined mean intrinsic error %.3e",
             payload["refined"]["mean_intrinsic_error"])
    return EXIT_OK


# --- rectify -----------------------------------------------------------------

def _slope_range(slopes) -> float:
    vals = [s for _, s in slopes]
    return float(max(vals) - min(vals))


def cmd_rectify(args) -> int:
    out = _out_dir(args)
    try:
        observations, board_points, meta = io.read_observations(args.observations)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    try:
        if args.centers:
            centers = io.read_centers(args.centers)
        else:
            image = read_pgm(args.white_image)
            pitch = args.pitch
            if pitch is None:
                setting = setting_from_observations(observations, meta["sensor_px"])
                pitch = setting.k_u
            centers = detect_centers(image, pitch)
        fit = estimate_rectifying_homography(centers)
        before = row_slopes(centers)
        mapped = rectify_centers(centers, fit.homography)
        after = row_slopes(mapped)
    except (PlenocalError, OSError, ValueError) as exc:
        log.error("rectification failed: %s: %s", type(exc).__name__, exc)
        return EXIT_DETECTION
    rectified = rectify_observations(observations, fit.homography)
    board = meta["board"]
    io.write_observations(
        out / "observations_rectified.json", rectified,
        board_rows=board["rows"], board_cols=board["cols"], cell_mm=board["cell_mm"],
        pixel_pitch_mm=meta["pixel_pitch_mm"], sensor_px=meta["sensor_px"])
    io.write_centers(out / "centers.json", centers)
    io.write_rectification(
        out / "rectification.json", homography=fit.homography,
        fitted_pitch=fit.fitted_pitch, rms=fit.rms,
        slope_range_before=_slope_range(before), slope_range_after=_slope_range(after),
        centers_detected=len(centers))
    _write_run_config(out, {
        "command": "rectify", "observations": str(args.observations),
        "white_image": str(args.white_image) if args.white_image else None,
        "centers": str(args.centers) if args.centers else None,
        "pitch": args.pitch})
    log.info("slope range %.3e -> %.3e over %d centers",
             _slope_range(before), _slope_range(after), len(centers))
    return EXIT_OK


def rectify_centers(centers, H):
    """Map detected centers through the homography, keeping their labels."""
    from .rectification import MicroImageCenter, apply_homography
    pts = np.array([(c.x, c.y) for c in centers])
    mapped = apply_homography(pts, H)
    return [MicroImageCenter(c.i, c.j, float(x), float(y))
            for c, (x, y) in zip(centers, mapped)]


# --- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plenocal",
        description="Focused plenoptic camera calibration toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate synthetic observations")
    p.add_argument("--config", type=Path, help="JSON config overriding the defaults")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--sigma", type=float, default=None, help="pixel noise std dev")
    p.add_argument("--poses", type=int, default=None)
    p.add_argument("--white-image", action="store_true")
    p.add_argument("--misalign-deg", type=float, nargs=3, metavar=("RX", "RY", "RZ"),
                   help="MLA rotation in degrees (Rodrigues components)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="closed-form + refined calibration")
    p.add_argument("observations", type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--setting", type=Path, help="JSON decode setting")
    p.add_argument("--fixed-fprime", type=float, default=None)
    p.add_argument("--optimize-distortion-centers", action="store_true")
    p.add_argument("--fix-xy-distortion", action="store_true",
                   help="freeze the x-y plane radial coefficients at zero")
    p.add_argument("--max-iterations", type=int, default=200)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="compare a report against ground truth")
    p.add_argument("result", type=Path)
    p.add_argument("truth", type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rectify", help="estimate and apply the rectifying homography")
    p.add_argument("observations", type=Path)
    p.add_argument("--white-image", type=Path)
    p.add_argument("--centers", type=Path)
    p.add_argument("--pitch", type=float, default=None,
                   help="expected micro-image pitch in pixels")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_rectify)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "rectify" and bool(args.white_image) == bool(args.centers):
        parser.error("rectify needs exactly one of --white-image or --centers")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
