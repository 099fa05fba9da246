"""Rotation/translation arithmetic for camera path estimation.

Conventions used throughout the package:

* rotations are plain ``(3, 3)`` float arrays;
* a pose rotation is the camera-to-world orientation, so a point ``X_c`` in
  camera coordinates sits at ``R @ X_c + C`` in the world;
* the world frame is the frame of camera 1 at position 1;
* translations are camera centres in millimetres;
* Euler angles compose as ``Rx(rx) @ Ry(ry) @ Rz(rz)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateAverage, GimbalLockWarning

_GIMBAL_EPS = 1e-6


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def is_rotation(m, tol: float = 1e-9) -> bool:
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        return False
    ortho = np.linalg.norm(m.T @ m - np.eye(3))
    return ortho < tol and abs(np.linalg.det(m) - 1.0) < tol


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(w) -> np.ndarray:
    """Rodrigues map from an axis-angle vector to a rotation matrix."""
    w = np.asarray(w, dtype=float).reshape(3)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-12:
        return np.eye(3) + K
    return np.eye(3) + math.sin(theta) / theta * K + (1 - math.cos(theta)) / theta**2 * (K @ K)


def rotation_angle(r1, r2=None) -> float:
    """Geodesic angle (radians) between two rotations, or of one rotation."""
    r = np.asarray(r1) if r2 is None else np.asarray(r1).T @ np.asarray(r2)
    c = (np.trace(r) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


def project_to_so3(m) -> np.ndarray:
    """Nearest rotation in Frobenius norm (polar factor with det +1)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


def _wrap(a: float) -> float:
    # (-pi, pi]
    return math.pi if a <= -math.pi else a


class EulerAngles(NamedTuple):
    rx: float
    ry: float
    rz: float
    gimbal_lock: bool = False


@dataclass(frozen=True)
class Pose:
    position_index: int
    rotation: np.ndarray
    translation: np.ndarray
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.position_index < 1:
            raise ValueError("position_index must be >= 1")
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        if not np.all(np.isfinite(self.translation)):
            raise ValueError("translation must be finite")

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def world_to_camera(self, points) -> np.ndarray:
        """Map world points ``(N, 3)`` into this camera's frame."""
        return (np.asarray(points, dtype=float) - self.translation) @ self.rotation


@dataclass
class Trajectory:
    poses: list[Pose] = field(default_factory=list)

    def __post_init__(self):
        for i, p in enumerate(self.poses, start=1):
            if p.position_index != i:
                raise ValueError(f"pose {i} has position_index {p.position_index}")

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    @property
    def rotations(self) -> np.ndarray:
        return np.stack([p.rotation for p in self.poses])

    @property
    def translations(self) -> np.ndarray:
        return np.stack([p.translation for p in self.poses])


def compose_rotation(rx: float, ry: float, rz: float) -> np.ndarray:
    """Rotation from X, Y, Z axis angles, multiplied in that order."""
    return rot_x(rx) @ rot_y(ry) @ rot_z(rz)


def euler_from_rotation(R) -> EulerAngles:
    """Inverse of :func:`compose_rotation`.

    At gimbal lock (``cos(ry) ~ 0``) ``rz`` is pinned to zero, the result is
    flagged and a :class:`GimbalLockWarning` is emitted.
    """
    R = np.asarray(R, dtype=float)
    sy = max(-1.0, min(1.0, R[0, 2]))
    ry = math.asin(sy)
    if math.sqrt(R[0, 0] ** 2 + R[0, 1] ** 2) < _GIMBAL_EPS:
        warnings.warn("gimbal lock: rz set to 0", GimbalLockWarning, stacklevel=2)
        rx = math.atan2(R[2, 1], R[1, 1])
        return EulerAngles(_wrap(rx), ry, 0.0, True)
    rx = math.atan2(-R[1, 2], R[2, 2])
    rz = math.atan2(-R[0, 1], R[0, 0])
    return EulerAngles(_wrap(rx), ry, _wrap(rz))


def chain_rotation(final_prev, relative, position: int) -> np.ndarray:
    """Final rotation at ``position``: identity at 1, else ``final_prev @ relative``."""
    if position < 1:
        raise ValueError("position must be >= 1")
    if position == 1:
        return np.eye(3)
    return np.asarray(final_prev, dtype=float) @ np.asarray(relative, dtype=float)


def average_rotations(r1, r2) -> np.ndarray:
    """Element-wise mean of two rotations projected back onto SO(3).

    Raises :class:`DegenerateAverage` when the mean is rank deficient, which
    happens when the inputs differ by a half turn.
    """
    m = (np.asarray(r1, dtype=float) + np.asarray(r2, dtype=float)) / 2.0
    s = np.linalg.svd(m, compute_uv=False)
    if s[-1] < 1e-8:
        raise DegenerateAverage("rotations differ by a half turn")
    return project_to_so3(m)


def relative_translation(t_wp, t_wp_prev) -> np.ndarray:
    return np.asarray(t_wp, dtype=float) - np.asarray(t_wp_prev, dtype=float)


def accumulate_translation(final_prev, relative, position: int) -> np.ndarray:
    """Final translation at ``position``: zero at 1, else ``final_prev + relative``."""
    if position < 1:
        raise ValueError("position must be >= 1")
    if position == 1:
        return np.zeros(3)
    return np.asarray(final_prev, dtype=float) + np.asarray(relative, dtype=float)


def fold_trajectory(relative_rotations: Sequence, relative_translations: Sequence,
                    flags: Sequence[tuple[str, ...]] | None = None) -> Trajectory:
    """Chain per-step relatives (entries for positions 2..n) into a trajectory."""
    n = len(relative_rotations) + 1
    flags = list(flags) if flags is not None else [()] * n
    R = np.eye(3)
    T = np.zeros(3)
    poses = [Pose(1, R, T, tuple(flags[0]))]
    for p in range(2, n + 1):
        R = chain_rotation(R, relative_rotations[p - 2], p)
        T = accumulate_translation(T, relative_translations[p - 2], p)
        poses.append(Pose(p, R, T, tuple(flags[p - 1])))
    return Trajectory(poses)
