"""Stereo depth, back-projection and fixed-landmark translation measurement.

Rig extrinsics follow the usual stereo-calibration convention: a point
``x_l`` in left-camera coordinates is ``r_rel @ x_l + t_rel`` in the right
camera, so a right camera mounted to the right of the left one has a
negative ``t_rel[0]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonPositiveDisparity, TrackLost
from .geom import relative_translation


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, X) -> np.ndarray:
        """Pinhole projection of camera-frame points ``(N, 3)`` to pixels."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.column_stack([
            self.fx * X[:, 0] / X[:, 2] + self.cx,
            self.fy * X[:, 1] / X[:, 2] + self.cy,
        ])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


@dataclass(frozen=True)
class StereoRig:
    left: CameraIntrinsics
    right: CameraIntrinsics
    r_rel: np.ndarray = field(default_factory=lambda: np.eye(3))
    t_rel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "r_rel", np.asarray(self.r_rel, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t_rel", np.asarray(self.t_rel, dtype=float).reshape(3))
        if self.baseline <= 0:
            raise ValueError("baseline must be positive")

    @property
    def baseline(self) -> float:
        return abs(float(self.t_rel[0]))

    def is_rectified(self, tol: float = 1e-9) -> bool:
        return (
            np.allclose(self.r_rel, np.eye(3), atol=tol)
            and abs(self.t_rel[1]) < tol
            and abs(self.t_rel[2]) < tol
            and self.t_rel[0] < 0
            and self.left == self.right
        )

    def to_dict(self) -> dict:
        return {
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
            "R": self.r_rel.ravel().tolist(),
            "T": self.t_rel.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StereoRig":
        return cls(
            CameraIntrinsics(**{k: float(d["left"][k]) for k in ("fx", "fy", "cx", "cy")}),
            CameraIntrinsics(**{k: float(d["right"][k]) for k in ("fx", "fy", "cx", "cy")}),
            np.asarray(d.get("R", np.eye(3).ravel()), dtype=float).reshape(3, 3),
            np.asarray(d["T"], dtype=float).reshape(3),
        )


def load_calibration(path) -> StereoRig:
    with open(path) as fh:
        return StereoRig.from_dict(json.load(fh))


def save_calibration(rig: StereoRig, path) -> None:
    Path(path).write_text(json.dumps(rig.to_dict(), indent=2) + "\n")


def disparity(x_left, x_right):
    return np.asarray(x_left, dtype=float) - np.asarray(x_right, dtype=float) \
        if np.ndim(x_left) or np.ndim(x_right) else float(x_left) - float(x_right)


def depth_from_disparity(d, rig: StereoRig, d_min: float = 0.5):
    """Depth ``Z = fx * B / d`` in millimetres."""
    d_arr = np.asarray(d, dtype=float)
    if np.any(~np.isfinite(d_arr)) or np.any(d_arr <= d_min):
        raise NonPositiveDisparity(f"disparity must exceed {d_min} px")
    z = rig.left.fx * rig.baseline / d_arr
    return float(z) if z.ndim == 0 else z


def backproject(x_left, y_left, z, cam: CameraIntrinsics) -> np.ndarray:
    """Pixel plus depth to camera-frame coordinates ``(X, Y, Z)``."""
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise ValueError("depth must be positive")
    X = (np.asarray(x_left, dtype=float) - cam.cx) * z / cam.fx
    Y = (np.asarray(y_left, dtype=float) - cam.cy) * z / cam.fy
    return np.stack(np.broadcast_arrays(X, Y, z), axis=-1)


def stereo_points(left_pts, right_pts, rig: StereoRig, d_min: float = 0.5) -> np.ndarray:
    """Triangulate rectified left/right pixel pairs into left-camera coordinates."""
    left_pts = np.atleast_2d(np.asarray(left_pts, dtype=float))
    right_pts = np.atleast_2d(np.asarray(right_pts, dtype=float))
    z = depth_from_disparity(disparity(left_pts[:, 0], right_pts[:, 0]), rig, d_min)
    return backproject(left_pts[:, 0], left_pts[:, 1], z, rig.left)


class Rectifier:
    """Rectifying maps for a calibrated, non-rectified rig.

    Offsets measured on the rectified pair live in the rectified left frame;
    :meth:`to_left` rotates them back into the original left-camera frame.
    """

    def __init__(self, rig: StereoRig, size: tuple[int, int]):
        import cv2

        w, h = size
        dist = np.zeros(5)
        R1, R2, P1, P2, _, _, _ = cv2.stereoRectify(
            rig.left.K, dist, rig.right.K, dist, (w, h), rig.r_rel, rig.t_rel.reshape(3, 1),
            flags=cv2.CALIB_ZERO_DISPARITY, alpha=0,
        )
        self.R1 = R1
        self._maps = [
            cv2.initUndistortRectifyMap(rig.left.K, dist, R1, P1, (w, h), cv2.CV_32FC1),
            cv2.initUndistortRectifyMap(rig.right.K, dist, R2, P2, (w, h), cv2.CV_32FC1),
        ]
        cam = CameraIntrinsics(P1[0, 0], P1[1, 1], P1[0, 2], P1[1, 2])
        baseline = -P2[0, 3] / P2[0, 0]
        self.rig = StereoRig(cam, cam, np.eye(3), [-abs(baseline), 0.0, 0.0])

    def rectify(self, left, right):
        import cv2

        out = []
        for img, (mx, my) in zip((left, right), self._maps):
            out.append(cv2.remap(np.asarray(img, dtype=np.float32), mx, my, cv2.INTER_LINEAR))
        return out[0].astype(float), out[1].astype(float)

    def to_left(self, offsets) -> np.ndarray:
        return np.asarray(offsets, dtype=float) @ self.R1


@dataclass
class StereoObservation:
    keypoints: np.ndarray      # (K, 2) left pixels
    descriptors: np.ndarray    # (K, 128)
    points: np.ndarray         # (K, 3) left-camera coordinates, mm


def _pairwise_sq(a, b) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def match_stereo(left_feats, right_feats, rig: StereoRig, max_row_diff: float = 1.5,
                 d_min: float = 0.5, ratio: float = 0.75) -> StereoObservation:
    """Match rectified left/right features along image rows and triangulate.

    Candidates must share a row within ``max_row_diff`` and have disparity
    above ``d_min``; the best candidate must pass the ratio test among them
    and be the mutual best.
    """
    if len(left_feats) == 0 or len(right_feats) == 0:
        return StereoObservation(np.zeros((0, 2)), np.zeros((0, 128)), np.zeros((0, 3)))
    pl, dl = left_feats.points, left_feats.descriptors
    pr, dr = right_feats.points, right_feats.descriptors
    dist = _pairwise_sq(dl, dr)
    ok = (np.abs(pl[:, None, 1] - pr[None, :, 1]) <= max_row_diff) & \
         ((pl[:, None, 0] - pr[None, :, 0]) > d_min)
    dist = np.where(ok, dist, np.inf)
    best = np.argmin(dist, axis=1)
    rows = np.arange(len(pl))
    d1 = dist[rows, best]
    dist2 = dist.copy()
    dist2[rows, best] = np.inf
    d2 = dist2.min(axis=1)
    keep = np.isfinite(d1) & (np.sqrt(d1) < ratio * np.sqrt(d2))
    keep &= np.argmin(dist, axis=0)[best] == rows
    idx = np.flatnonzero(keep)
    pts = stereo_points(pl[idx], pr[best[idx]], rig, d_min)
    return StereoObservation(pl[idx], dl[idx], pts)


@dataclass
class WorldOffset:
    """Per-landmark camera-frame offsets at the previous and current positions."""
    previous: np.ndarray   # (K, 3)
    current: np.ndarray    # (K, 3)

    @property
    def t_wp_prev(self) -> np.ndarray:
        return np.median(self.previous, axis=0)

    @property
    def t_wp(self) -> np.ndarray:
        return np.median(self.current, axis=0)

    def __len__(self):
        return len(self.current)


class LandmarkTracker:
    """Keeps the stereo landmarks of the last observed position."""

    def __init__(self, rig: StereoRig, cfg=None, rectifier: Rectifier | None = None):
        from .config import PipelineConfig

        self.cfg = cfg or PipelineConfig()
        self.rectifier = rectifier
        self.rig = rectifier.rig if rectifier else rig
        self.previous: StereoObservation | None = None

    def observe(self, left, right) -> StereoObservation:
        from .features import detect_sift

        if self.rectifier is not None:
            left, right = self.rectifier.rectify(left, right)
        obs = match_stereo(
            detect_sift(left, self.cfg.sift), detect_sift(right, self.cfg.sift), self.rig,
            self.cfg.max_row_diff, self.cfg.min_disparity, self.cfg.ratio,
        )
        if self.rectifier is not None:
            obs.points = self.rectifier.to_left(obs.points)
        return obs


def persistent_landmarks(prev: StereoObservation, curr: StereoObservation,
                         ratio: float = 0.75) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs of landmarks re-identified between two stereo observations."""
    if len(prev.points) == 0 or len(curr.points) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    dist = _pairwise_sq(prev.descriptors, curr.descriptors)
    best = np.argmin(dist, axis=1)
    rows = np.arange(len(best))
    d1 = dist[rows, best]
    if dist.shape[1] > 1:
        d2 = np.partition(dist, 1, axis=1)[:, 1]
    else:
        d2 = np.full(len(best), np.inf)
    keep = (np.sqrt(d1) < ratio * np.sqrt(d2)) & (np.argmin(dist, axis=0)[best] == rows)
    idx = np.flatnonzero(keep)
    return idx, best[idx]


def measure_world_offset(left, right, rig: StereoRig, tracker: LandmarkTracker) -> WorldOffset | None:
    """Stereo landmark offsets at this position, paired with the previous one.

    The first call only primes ``tracker`` and returns ``None``. Later calls
    return the camera-frame offsets of every landmark seen at both positions.
    Raises :class:`TrackLost` (after updating the tracker) when fewer than
    ``cfg.min_persistent`` landmarks persist.
    """
    obs = tracker.observe(left, right)
    prev, tracker.previous = tracker.previous, obs
    if prev is None:
        return None
    i, j = persistent_landmarks(prev, obs, tracker.cfg.ratio)
    if len(i) < tracker.cfg.min_persistent:
        raise TrackLost(f"{len(i)} persistent landmarks")
    return WorldOffset(prev.points[i], obs.points[j])


def translation_for_step(t_wp, t_wp_prev, r_fp_prev=None, r_fp=None) -> np.ndarray:
    """World-frame camera displacement between two positions.

    ``t_wp`` and ``t_wp_prev`` are the camera-frame offsets of the same fixed
    landmark(s), ``(3,)`` or ``(K, 3)``; ``r_fp``/``r_fp_prev`` are the
    camera-to-world rotations at the two positions. Each landmark fixes the
    camera centre at ``-R @ offset`` relative to itself, so the displacement
    is ``R_prev @ t_wp_prev - R @ t_wp``; with several landmarks the
    component-wise median over landmarks is returned.
    """
    r_fp_prev = np.eye(3) if r_fp_prev is None else np.asarray(r_fp_prev, dtype=float)
    r_fp = np.eye(3) if r_fp is None else np.asarray(r_fp, dtype=float)
    t_wp = np.asarray(t_wp, dtype=float)
    t_wp_prev = np.asarray(t_wp_prev, dtype=float)
    # camera position relative to the landmark, in world axes
    cam_now = -(np.atleast_2d(t_wp) @ r_fp.T)
    cam_prev = -(np.atleast_2d(t_wp_prev) @ r_fp_prev.T)
    return np.median(relative_translation(cam_now, cam_prev), axis=0)
