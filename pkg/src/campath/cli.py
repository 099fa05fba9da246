"""Command-line entry point: ``campath {estimate,reconstruct,evaluate,synth}``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .errors import EmptyModel, OutOfRange, ParseError, NonMonotonicTimestamps, SequenceTooShort

log = logging.getLogger("campath")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_ALIGN = 0, 1, 2, 3, 4
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".pgm", ".ppm"}


class ConfigError(Exception):
    pass


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _existing(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _images(directory, what: str) -> list[Path]:
    d = _existing(directory, what)
    if not d.is_dir():
        raise ConfigError(f"{what} is not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _config(args) -> PipelineConfig:
    data = {}
    if args.config:
        try:
            data = json.loads(_existing(args.config, "config file").read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if args.seed is not None:
        data["seed"] = args.seed
    try:
        return PipelineConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config: {exc}") from None


def _rig(args):
    from .stereo import load_calibration

    path = _existing(args.calib, "calibration file")
    try:
        return load_calibration(path)
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad calibration file {path}: {exc}") from None


def _write_manifest(out: Path, command: str, cfg: PipelineConfig | None, inputs, outputs,
                    extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "seed": cfg.seed if cfg else None,
        "config": cfg.to_dict() if cfg else None,
        "config_hash": cfg.digest() if cfg else None,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_estimate(args) -> int:
    from .pipeline import SequenceInput, correct_path, write_trajectory_csv

    cfg = _config(args)
    rig = _rig(args)
    left = _images(args.left_dir, "left image directory")
    right = _images(args.right_dir, "right image directory")
    if len(left) != len(right):
        raise ConfigError(f"{len(left)} left frames but {len(right)} right frames")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traj = correct_path(SequenceInput(left, right, rig, cfg))
    csv_path = out / "trajectory.csv"
    write_trajectory_csv(traj, csv_path)
    flags = {str(p.position_index): list(p.flags) for p in traj if p.flags}
    _write_manifest(out, "estimate", cfg, [Path(args.calib), *left, *right], [csv_path],
                    {"positions": len(traj), "flags": flags})
    print(csv_path)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .pipeline import read_trajectory_csv
    from .recon import build_model, bundle_adjust, export_ply, write_ba_log

    cfg = _config(args)
    rig = _rig(args)
    left = _images(args.left_dir, "left image directory")
    tpath = _existing(args.trajectory, "trajectory file")
    try:
        traj = read_trajectory_csv(tpath)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad trajectory file {tpath}: {exc}") from None
    if len(traj) != len(left):
        raise ConfigError(f"trajectory has {len(traj)} poses for {len(left)} frames")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    problem = build_model(left, traj, rig.left, cfg)
    refined = bundle_adjust(problem, cfg.ba_iters, cfg.ba_tol, cfg.refine_poses)
    ply, ba_log = out / "model.ply", out / "ba_log.csv"
    export_ply(refined.points, ply)
    write_ba_log(refined, ba_log)
    _write_manifest(out, "reconstruct", cfg, [Path(args.calib), tpath, *left], [ply, ba_log],
                    {"points": len(refined.points), "observations": len(refined.observations)})
    print(ply)
    return EXIT_OK


def _frame_times(args, n: int) -> np.ndarray:
    if args.frame_times:
        path = _existing(args.frame_times, "frame times file")
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        try:
            times = np.array([float(r[-1]) for r in rows[1:] if r])
        except ValueError as exc:
            raise ConfigError(f"bad frame times file {path}: {exc}") from None
    else:
        times = np.arange(n) * args.frame_dt
    if len(times) != n:
        raise ConfigError(f"{len(times)} frame times for {n} positions")
    return times


def cmd_evaluate(args) -> int:
    from .evaluation import (
        align_and_resample,
        compute_metrics,
        load_ground_truth,
        write_error_csv,
        write_metrics_json,
    )
    from .pipeline import read_trajectory_csv

    tpath = _existing(args.trajectory, "trajectory file")
    gpath = _existing(args.ground_truth, "ground truth file")
    try:
        traj = read_trajectory_csv(tpath)
        gt = load_ground_truth(gpath)
    except (ParseError, NonMonotonicTimestamps, KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    times = _frame_times(args, len(traj))
    try:
        g, e = align_and_resample(gt, traj, times)
    except OutOfRange as exc:
        print(f"error: alignment failed: {exc}", file=sys.stderr)
        return EXIT_ALIGN
    report = compute_metrics(g, e)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mpath, epath = out / "metrics.json", out / "errors.csv"
    write_metrics_json(report, mpath)
    write_error_csv(report, epath)
    inputs = [tpath, gpath] + ([Path(args.frame_times)] if args.frame_times else [])
    _write_manifest(out, "evaluate", None, inputs, [mpath, epath])
    print(f"total error {report.total_error_mm:.3f} mm, rmse {report.rmse_mm:.3f} mm, "
          f"accuracy {report.accuracy_percent:.2f} %")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .evaluation import GroundTruthTrajectory, save_ground_truth
    from .features import save_image
    from .pipeline import write_trajectory_csv
    from .stereo import save_calibration
    from .synth import render_sequence, scene_from_spec

    spath = _existing(args.scene, "scene spec")
    try:
        spec = json.loads(spath.read_text())
        if args.seed is not None:
            spec["seed"] = args.seed
        scene = scene_from_spec(spec)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad scene spec {spath}: {exc}") from None
    n = args.positions or scene.trajectory.steps
    seq = render_sequence(scene, n, frame_dt=args.frame_dt)
    out = Path(args.out)
    outputs = []
    for side, frames in (("left", seq.left), ("right", seq.right)):
        d = out / side
        d.mkdir(parents=True, exist_ok=True)
        for p, img in enumerate(frames, start=1):
            path = d / f"{p:04d}.png"
            save_image(img, path)
            outputs.append(path)
    calib, gt_csv, times_csv, poses_csv = (out / "calib.json", out / "ground_truth.csv",
                                           out / "frame_times.csv", out / "poses_gt.csv")
    save_calibration(scene.rig, calib)
    save_ground_truth(GroundTruthTrajectory(seq.gt_samples[:, 0], seq.gt_samples[:, 1:]), gt_csv)
    with open(times_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["p", "t"])
        for p, t in enumerate(seq.frame_times, start=1):
            w.writerow([p, repr(float(t))])
    write_trajectory_csv(seq.ground_truth, poses_csv)
    outputs += [calib, gt_csv, times_csv, poses_csv]
    _write_manifest(out, "synth", None, [spath], outputs, {"seed": scene.seed, "positions": n})
    print(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="campath", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, images=True):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--config", help="JSON file of pipeline parameters")
        if images:
            p.add_argument("--calib", help="stereo calibration JSON")
            p.add_argument("--left-dir", help="left camera frames")

    p = sub.add_parser("estimate", help="estimate the camera path of a stereo sequence")
    common(p)
    p.add_argument("--right-dir", help="right camera frames")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("reconstruct", help="build a point cloud along a known path")
    common(p)
    p.add_argument("--trajectory", help="trajectory CSV written by estimate")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="score a trajectory against ground truth")
    common(p, images=False)
    p.add_argument("--trajectory", help="trajectory CSV written by estimate")
    p.add_argument("--ground-truth", help="ground truth CSV with t,x,y,z columns")
    p.add_argument("--frame-times", help="CSV whose last column is each position's time")
    p.add_argument("--frame-dt", type=float, default=1.0, help="seconds between positions")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="render a synthetic stereo sequence")
    common(p, images=False)
    p.add_argument("--scene", help="scene spec JSON")
    p.add_argument("--positions", type=int, help="number of positions (default: trajectory steps)")
    p.add_argument("--frame-dt", type=float, default=1.0, help="seconds between positions")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SequenceTooShort, EmptyModel) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
