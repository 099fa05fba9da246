"""Synthetic stereo scenes rendered along analytic trajectories.

World points are drawn as isotropic Gaussian sprites whose pixel radius
follows ``fx * radius / Z``, which gives SIFT well-localized extrema at the
exact projections. Every quantity the pipeline estimates (poses, stereo
depths, correspondences) is available here in closed form.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NoVisiblePoints
from .geom import Pose, Trajectory, rot_y
from .stereo import CameraIntrinsics, StereoRig

TRAJECTORIES = ("static", "line", "arc", "square", "yaw")


def default_rig() -> StereoRig:
    # rectified rig with the calibrated baseline of the reference setup
    cam = CameraIntrinsics(600.0, 600.0, 320.0, 240.0)
    return StereoRig(cam, cam, np.eye(3), [-47.917, 0.0, 0.0])


@dataclass
class TrajectorySpec:
    kind: str = "static"
    steps: int = 10            # number of positions
    step_mm: float = 25.0      # line: distance per step
    direction: tuple = (1.0, 0.0, 0.0)
    side_mm: float = 250.0     # square: side length
    plane: str = "xz"          # square: plane of motion
    step_deg: float = 5.0      # arc / yaw: heading change per step
    radius_mm: float = 1200.0  # arc: distance to the orbit pivot

    def __post_init__(self):
        if self.kind not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory type {self.kind!r}")

    def pose(self, u: float):
        """Camera-to-world rotation and centre at (real-valued) position ``u``."""
        s = u - 1.0
        if self.kind == "static":
            return np.eye(3), np.zeros(3)
        if self.kind == "line":
            d = np.asarray(self.direction, dtype=float)
            return np.eye(3), s * self.step_mm * d / np.linalg.norm(d)
        if self.kind == "yaw":
            return rot_y(math.radians(s * self.step_deg)), np.zeros(3)
        if self.kind == "arc":
            R = rot_y(math.radians(s * self.step_deg))
            pivot = np.array([0.0, 0.0, self.radius_mm])
            return R, pivot - R @ np.array([0.0, 0.0, self.radius_mm])
        # square loop traversed at constant speed, back at the start on the last position
        n = max(self.steps - 1, 1)
        a = (s / n) * 4.0 % 4.0 if s < n else 0.0
        side, frac = int(a), a - int(a)
        corners = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]], dtype=float) * self.side_mm
        uv = corners[side] + frac * (corners[side + 1] - corners[side])
        C = np.zeros(3)
        i, j = {"xz": (0, 2), "xy": (0, 1)}[self.plane]
        C[i], C[j] = uv
        return np.eye(3), C

    def path_length(self) -> float:
        pts = np.array([self.pose(u)[1] for u in np.linspace(1, self.steps, 100 * self.steps)])
        return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


@dataclass
class SyntheticScene:
    """Textured world points along an analytic trajectory.

    Each point carries a sprite: a small cluster of Gaussian blobs laid out
    on a fronto-parallel patch around it (``sprite_offsets`` in mm, relative
    to the point). Every blob centre is itself an exact 3D point, so any
    feature detected on a blob is geometrically consistent across views.
    """
    points: np.ndarray                 # (N, 3) world, mm
    sprite_offsets: np.ndarray         # (N, K, 2) blob offsets in world X/Y, mm
    sprite_amplitudes: np.ndarray      # (N, K) signed blob contrast
    sprite_radii: np.ndarray           # (N, K) blob radius, mm
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    rig: StereoRig = field(default_factory=default_rig)
    width: int = 640
    height: int = 480
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.points) == 0 or not np.any(self.points[:, 2] > 0):
            raise NoVisiblePoints("no world point lies in front of the first pose")

    def pose(self, position: int) -> Pose:
        R, C = self.trajectory.pose(position)
        return Pose(position, R, C)

    def ground_truth(self, n: int | None = None) -> Trajectory:
        n = n or self.trajectory.steps
        return Trajectory([self.pose(p) for p in range(1, n + 1)])

    def blob_points(self) -> np.ndarray:
        """World positions of every sprite blob, ``(N * K, 3)``."""
        off = np.concatenate([self.sprite_offsets, np.zeros(self.sprite_offsets.shape[:2] + (1,))], axis=2)
        return (self.points[:, None, :] + off).reshape(-1, 3)

    def _to_camera(self, X, position: int, camera: str) -> np.ndarray:
        Xc = self.pose(position).world_to_camera(X)
        if camera == "right":
            Xc = Xc @ self.rig.r_rel.T + self.rig.t_rel
        return Xc

    def camera_points(self, position: int, camera: str = "left") -> np.ndarray:
        return self._to_camera(self.points, position, camera)

    def _cam(self, camera: str) -> CameraIntrinsics:
        return self.rig.left if camera == "left" else self.rig.right

    def _pixels(self, Xc, camera, rng=None):
        z = Xc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = self._cam(camera).project(np.where(z[:, None] > 0, Xc, np.nan))
        if rng is not None:
            if self.noise_sigma > 0:
                px = px + rng.normal(scale=self.noise_sigma, size=px.shape)
            if self.outlier_fraction > 0:
                out = rng.random(len(px)) < self.outlier_fraction
                px[out] = rng.uniform([0, 0], [self.width, self.height], size=(int(out.sum()), 2))
        return px, z

    def project(self, position: int, camera: str = "left", rng=None):
        """Pixels ``(N, 2)``, depths ``(N,)`` and in-image visibility mask.

        With ``rng`` given, Gaussian pixel noise and uniform outliers are
        applied per the scene's noise settings.
        """
        px, z = self._pixels(self.camera_points(position, camera), camera, rng)
        vis = (z > 0) & (px[:, 0] >= 0) & (px[:, 0] < self.width) & (px[:, 1] >= 0) & (px[:, 1] < self.height)
        return px, z, vis

    def frame_rng(self, position: int, camera: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, position, 0 if camera == "left" else 1])

    def render(self, position: int, camera: str = "left") -> np.ndarray:
        """Draw every sprite blob into a mid-grey frame.

        Noise, when enabled, jitters whole sprites (per world point), and
        outliers move whole sprites to random pixels.
        """
        rng = self.frame_rng(position, camera) if (self.noise_sigma or self.outlier_fraction) else None
        k = self.sprite_offsets.shape[1]
        Xc = self._to_camera(self.blob_points(), position, camera)
        px, z = self._pixels(Xc, camera)
        if rng is not None:
            anchor, _ = self._pixels(self.camera_points(position, camera), camera)
            moved, _ = self._pixels(self.camera_points(position, camera), camera, rng)
            px = px + np.repeat(moved - anchor, k, axis=0)
        fx = self._cam(camera).fx
        img = np.full((self.height, self.width), 0.5)
        amps = self.sprite_amplitudes.ravel()
        radii = self.sprite_radii.ravel()
        for (u, v), zi, a, r in zip(px, z, amps, radii):
            if not (zi > 0 and np.isfinite(u) and np.isfinite(v)):
                continue
            s = fx * r / zi
            h = int(math.ceil(4 * s))
            x0, x1 = max(int(u) - h, 0), min(int(u) + h + 2, self.width)
            y0, y1 = max(int(v) - h, 0), min(int(v) + h + 2, self.height)
            if x0 >= x1 or y0 >= y1:
                continue
            gx = np.exp(-((np.arange(x0, x1) - u) ** 2) / (2 * s * s))
            gy = np.exp(-((np.arange(y0, y1) - v) ** 2) / (2 * s * s))
            img[y0:y1, x0:x1] += a * np.outer(gy, gx)
        return np.clip(img, 0.0, 1.0)


def make_scene(n_points: int = 500, trajectory: TrajectorySpec | None = None,
               rig: StereoRig | None = None, width: int = 640, height: int = 480,
               depth_range: tuple[float, float] = (900.0, 1600.0), margin: float = 0.2,
               noise_sigma: float = 0.0, outlier_fraction: float = 0.0,
               seed: int = 0, blobs_per_sprite: int = 5) -> SyntheticScene:
    """Random textured points filling the first view (plus a margin) at random depths."""
    rig = rig or default_rig()
    rng = np.random.default_rng(seed)
    cam = rig.left
    n, k = n_points, blobs_per_sprite
    u = rng.uniform(-margin * width, (1 + margin) * width, n)
    v = rng.uniform(-margin * height, (1 + margin) * height, n)
    z = rng.uniform(*depth_range, n)
    pts = np.column_stack([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z])
    # sprite layout in pixels at the sampled depth, then scaled to mm
    mm_per_px = (z / cam.fx)[:, None]
    rho = 7.0 * np.sqrt(rng.uniform(0, 1, (n, k)))
    ang = rng.uniform(0, 2 * math.pi, (n, k))
    rho[:, 0] = 0.0
    offsets = np.stack([rho * np.cos(ang), rho * np.sin(ang)], axis=2) * mm_per_px[..., None]
    amps = rng.choice([-1.0, 1.0], (n, k)) * rng.uniform(0.15, 0.4, (n, k))
    radii = rng.uniform(1.2, 2.5, (n, k)) * mm_per_px
    return SyntheticScene(pts, offsets, amps, radii, trajectory or TrajectorySpec(), rig,
                          width, height, noise_sigma, outlier_fraction, seed)


def scene_from_spec(spec: dict) -> SyntheticScene:
    """Build a scene from its JSON description (see README for the schema)."""
    from .stereo import StereoRig

    traj = dict(spec.get("trajectory", {}))
    if "type" in traj:
        traj["kind"] = traj.pop("type")
    if traj.get("kind") == "square-loop":
        traj["kind"] = "square"
    if "direction" in traj:
        traj["direction"] = tuple(traj["direction"])
    tspec = TrajectorySpec(**traj)
    noise = spec.get("noise", {})
    rig = StereoRig.from_dict(spec["rig"]) if "rig" in spec else None
    image = spec.get("image", {})
    seed = int(spec.get("seed", 0))
    if "points" in spec and isinstance(spec["points"], list):
        pts = np.asarray(spec["points"], dtype=float)
        base = make_scene(len(pts), tspec, rig, seed=seed)
        scale = (pts[:, 2] / base.points[:, 2])[:, None]
        return SyntheticScene(pts, base.sprite_offsets * scale[..., None], base.sprite_amplitudes,
                              base.sprite_radii * scale, tspec, base.rig,
                              image.get("width", 640), image.get("height", 480),
                              float(noise.get("sigma_px", 0.0)), float(noise.get("outlier_fraction", 0.0)), seed)
    return make_scene(int(spec.get("points", spec.get("n_points", 500))), tspec, rig,
                      image.get("width", 640), image.get("height", 480),
                      noise_sigma=float(noise.get("sigma_px", 0.0)),
                      outlier_fraction=float(noise.get("outlier_fraction", 0.0)), seed=seed)


def load_scene_spec(path) -> SyntheticScene:
    with open(path) as fh:
        return scene_from_spec(json.load(fh))


@dataclass
class RenderedSequence:
    left: list
    right: list
    ground_truth: Trajectory
    frame_times: np.ndarray     # seconds per position
    gt_samples: np.ndarray      # (M, 4) rows t, x, y, z at 100 Hz


def render_sequence(scene: SyntheticScene, n: int | None = None, frame_dt: float = 1.0,
                    rate_hz: float = 100.0) -> RenderedSequence:
    """Render ``n`` stereo frames plus exact poses and a 100 Hz position log."""
    n = n or scene.trajectory.steps
    if n < 1:
        raise ValueError("n must be positive")
    _, _, vis = scene.project(1, "left")
    if not vis.any():
        raise NoVisiblePoints("no point projects into the first frame")
    left = [scene.render(p, "left") for p in range(1, n + 1)]
    right = [scene.render(p, "right") for p in range(1, n + 1)]
    times = np.arange(n) * frame_dt
    m = int(round((n - 1) * frame_dt * rate_hz)) + 1
    ts = np.arange(m) / rate_hz
    pos = np.array([scene.trajectory.pose(1.0 + t / frame_dt)[1] for t in ts])
    return RenderedSequence(left, right, scene.ground_truth(n), times, np.column_stack([ts, pos]))


def exact_correspondences(scene: SyntheticScene, p1: int, p2: int, camera: str = "left",
                          noisy: bool = False, camera2: str | None = None):
    """Projections of the points visible in both views, bypassing detection.

    Returns ``(pts1, pts2, ids)``. ``camera2`` selects the second view's
    camera (defaults to ``camera``), which gives left/right stereo pairs.
    """
    camera2 = camera2 or camera
    r1 = scene.frame_rng(p1, camera) if noisy else None
    r2 = scene.frame_rng(p2, camera2) if noisy else None
    x1, _, v1 = scene.project(p1, camera, r1)
    x2, _, v2 = scene.project(p2, camera2, r2)
    ids = np.flatnonzero(v1 & v2)
    return x1[ids], x2[ids], ids


def contaminate(pts1, pts2, F, n_outliers: int, size: tuple[int, int], rng,
                min_residual: float = 3.0):
    """Append uniform outlier pairs whose true epipolar distance is at least ``min_residual`` px.

    Returns the contaminated arrays and a boolean mask marking outliers.
    """
    from .epipolar import sampson_distance

    w, h = size
    o1, o2 = [], []
    while len(o1) < n_outliers:
        a = rng.uniform([0, 0], [w, h], size=(1, 2))
        b = rng.uniform([0, 0], [w, h], size=(1, 2))
        if sampson_distance(F, a, b)[0] >= min_residual:
            o1.append(a[0])
            o2.append(b[0])
    o1 = np.array(o1).reshape(-1, 2)
    o2 = np.array(o2).reshape(-1, 2)
    mask = np.r_[np.zeros(len(pts1), bool), np.ones(n_outliers, bool)]
    return np.vstack([pts1, o1]), np.vstack([pts2, o2]), mask
