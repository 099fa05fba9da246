"""End-to-end camera path estimation for a stereo sequence.

Each camera's rotations are chained pair by pair from its own frames, the
two chains are averaged per position, and translations come from stereo
landmarks measured by the left camera and rotated into the world frame.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import PipelineConfig
from .epipolar import pose_from_features
from .errors import DegenerateAverage, SequenceTooShort, SkipPair, TrackLost
from .features import affine_features, load_image
from .geom import (
    Pose,
    Trajectory,
    accumulate_translation,
    average_rotations,
    chain_rotation,
)
from .stereo import (
    CameraIntrinsics,
    LandmarkTracker,
    Rectifier,
    StereoRig,
    measure_world_offset,
    translation_for_step,
)

log = logging.getLogger(__name__)

ROTATION_COLUMNS = [f"r{i}{j}" for i in range(1, 4) for j in range(1, 4)]
CSV_HEADER = ["p", "tx_mm", "ty_mm", "tz_mm", *ROTATION_COLUMNS, "flags"]


@dataclass
class SequenceInput:
    left: Sequence        # images (arrays) or image paths, one per position
    right: Sequence
    rig: StereoRig
    config: PipelineConfig = field(default_factory=PipelineConfig)

    def __post_init__(self):
        if len(self.left) != len(self.right):
            raise ValueError("left and right sequences differ in length")

    def __len__(self):
        return len(self.left)


def _frame(frames, i):
    f = frames[i]
    if isinstance(f, (str, Path)):
        try:
            return load_image(f)
        except OSError as exc:
            raise OSError(f"frame {i + 1}: {exc}") from exc
    return np.asarray(f, dtype=float)


def estimate_rotation_sequence(frames: Sequence, intrinsics: CameraIntrinsics,
                               cfg: PipelineConfig | None = None):
    """Chained camera-to-start rotations for one camera.

    Returns ``(rotations, flags)``: one rotation per frame, the first being
    identity, and per-position flag tuples. A pair that yields no usable
    estimate reuses the previous relative rotation and is flagged
    ``"rotation_skipped"``.
    """
    cfg = cfg or PipelineConfig()
    n = len(frames)
    if n == 0:
        return [], []
    finals = [chain_rotation(None, None, 1)]
    flags: list[tuple[str, ...]] = [()]
    if n == 1:
        return finals, flags
    views_prev = affine_features(_frame(frames, 0), cfg.sift, cfg.views)
    relative = np.eye(3)
    for p in range(2, n + 1):
        views = affine_features(_frame(frames, p - 1), cfg.sift, cfg.views)
        # view 0 is the identity view, i.e. plain SIFT of the previous frame
        try:
            est = pose_from_features(views_prev[0].features, views, intrinsics, intrinsics, cfg)
            relative = est.rotation
            flags.append(("static",) if est.static else ())
            log.debug("pair %d-%d: %d matches, %d inliers", p - 1, p, est.n_matches, est.n_inliers)
        except SkipPair as exc:
            log.info("pair %d-%d skipped: %s", p - 1, p, exc)
            flags.append(("rotation_skipped",))
        finals.append(chain_rotation(finals[-1], relative, p))
        views_prev = views
    return finals, flags


def correct_path(seq: SequenceInput) -> Trajectory:
    """Averaged rotations plus stereo-chained translations for every position."""
    cfg = seq.config
    n = len(seq)
    if n < 2:
        raise SequenceTooShort(f"{n} positions, need at least 2")
    r1, f1 = estimate_rotation_sequence(seq.left, seq.rig.left, cfg)
    r2, f2 = estimate_rotation_sequence(seq.right, seq.rig.right, cfg)

    rotations, flags = [], []
    for p in range(n):
        fl = [f"c1_{x}" for x in f1[p]] + [f"c2_{x}" for x in f2[p]]
        try:
            rotations.append(average_rotations(r1[p], r2[p]))
        except DegenerateAverage:
            rotations.append(r1[p])
            fl.append("average_degenerate")
        flags.append(fl)

    rectifier = None
    if not seq.rig.is_rectified():
        h, w = _frame(seq.left, 0).shape
        rectifier = Rectifier(seq.rig, (w, h))
    tracker = LandmarkTracker(seq.rig, cfg, rectifier)
    measure_world_offset(_frame(seq.left, 0), _frame(seq.right, 0), seq.rig, tracker)

    poses = [Pose(1, rotations[0], accumulate_translation(None, None, 1), tuple(flags[0]))]
    step = np.zeros(3)
    for p in range(2, n + 1):
        try:
            off = measure_world_offset(_frame(seq.left, p - 1), _frame(seq.right, p - 1), seq.rig, tracker)
            step = translation_for_step(off.current, off.previous, rotations[p - 2], rotations[p - 1])
        except TrackLost as exc:
            log.info("position %d: %s", p, exc)
            flags[p - 1].append("track_lost")
        T = accumulate_translation(poses[-1].translation, step, p)
        poses.append(Pose(p, rotations[p - 1], T, tuple(flags[p - 1])))
    return Trajectory(poses)


def _fmt(x: float) -> str:
    return repr(float(x))


def trajectory_to_csv(traj: Trajectory) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for pose in traj:
        w.writerow([
            pose.position_index,
            *(_fmt(v) for v in pose.translation),
            *(_fmt(v) for v in pose.rotation.ravel()),
            "|".join(pose.flags),
        ])
    return buf.getvalue()


def write_trajectory_csv(traj: Trajectory, path) -> None:
    Path(path).write_text(trajectory_to_csv(traj))


def read_trajectory_csv(path) -> Trajectory:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"unexpected trajectory header {reader.fieldnames}")
        poses = []
        for row in reader:
            R = np.array([float(row[c]) for c in ROTATION_COLUMNS]).reshape(3, 3)
            T = np.array([float(row[c]) for c in ("tx_mm", "ty_mm", "tz_mm")])
            fl = tuple(x for x in row["flags"].split("|") if x)
            poses.append(Pose(int(row["p"]), R, T, fl))
    return Trajectory(poses)
