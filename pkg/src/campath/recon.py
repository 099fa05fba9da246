"""Point cloud reconstruction from a known trajectory plus bundle adjustment."""
from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from .config import PipelineConfig
from .epipolar import fundamental_from_pose, sampson_distance
from .errors import (
    BehindCamera,
    DegenerateBaseline,
    EmptyModel,
    NoMatches,
    SingularNormalEquations,
)
from .features import affine_features, load_image, match_asymmetric, match_arrays
from .geom import Pose, exp_so3, rotation_angle, skew

log = logging.getLogger(__name__)


def _K(cam) -> np.ndarray:
    return np.asarray(getattr(cam, "K", cam), dtype=float)


def projection_matrix(pose: Pose, cam) -> np.ndarray:
    """``K [R^T | -R^T C]`` for a camera-to-world pose."""
    Rt = pose.rotation.T
    return _K(cam) @ np.hstack([Rt, -(Rt @ pose.translation)[:, None]])


def project(pose: Pose, cam, X) -> np.ndarray:
    Xc = pose.world_to_camera(np.atleast_2d(X))
    uvw = Xc @ _K(cam).T
    return uvw[:, :2] / uvw[:, 2:]


def _check_baseline(pose1: Pose, pose2: Pose):
    gap = np.linalg.norm(pose1.translation - pose2.translation)
    turn = math.degrees(rotation_angle(pose1.rotation, pose2.rotation))
    if gap <= 1.0 and turn <= 0.1:
        raise DegenerateBaseline(f"poses {gap:.3g} mm and {turn:.3g} deg apart")


def _triangulate_normalized(rays, rotations, centers) -> np.ndarray:
    """Multi-view linear triangulation for one point.

    ``rays`` are normalized image coordinates ``(m, 2)``; ``rotations`` and
    ``centers`` the matching camera-to-world poses.
    """
    rows = []
    for (x, y), R, C in zip(rays, rotations, centers):
        P = np.hstack([R.T, -(R.T @ C)[:, None]])
        rows.append(x * P[2] - P[0])
        rows.append(y * P[2] - P[1])
    A = np.array(rows)
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    X = np.linalg.svd(A)[2][-1]
    return X[:3] / X[3]


def _normalize(pts, cam) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    h = np.c_[pts, np.ones(len(pts))] @ np.linalg.inv(_K(cam)).T
    return h[:, :2] / h[:, 2:]


def triangulate_pair(obs1, obs2, pose1: Pose, pose2: Pose, cam, cam2=None) -> np.ndarray:
    """World point(s) seen at pixel(s) ``obs1`` from ``pose1`` and ``obs2`` from ``pose2``.

    Accepts single pixels or ``(N, 2)`` arrays and returns ``(3,)`` or
    ``(N, 3)`` to match.
    """
    _check_baseline(pose1, pose2)
    cam2 = cam if cam2 is None else cam2
    single = np.ndim(obs1) == 1
    n1 = _normalize(obs1, cam)
    n2 = _normalize(obs2, cam2)
    Rs = (pose1.rotation, pose2.rotation)
    Cs = (pose1.translation, pose2.translation)
    X = np.array([_triangulate_normalized((a, b), Rs, Cs) for a, b in zip(n1, n2)])
    z1 = pose1.world_to_camera(X)[:, 2]
    z2 = pose2.world_to_camera(X)[:, 2]
    if np.any(z1 <= 0) or np.any(z2 <= 0):
        raise BehindCamera("triangulated point lies behind a camera")
    return X[0] if single else X


def view_pairs(n: int) -> list[tuple[int, int]]:
    """All ``(U, V)`` position pairs with ``1 <= U < V <= n``."""
    return list(itertools.combinations(range(1, n + 1), 2))


@dataclass(frozen=True)
class Observation:
    point_id: int
    frame_index: int
    pixel: tuple[float, float]


@dataclass
class PointCloud:
    ids: np.ndarray                     # (N,) int
    xyz: np.ndarray                     # (N, 3) mm
    colors: np.ndarray | None = None    # (N, 3) uint8

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=int).reshape(-1)
        self.xyz = np.asarray(self.xyz, dtype=float).reshape(-1, 3)
        if len(self.ids) != len(self.xyz):
            raise ValueError("ids and coordinates differ in length")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("point ids must be unique")
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("point coordinates must be finite")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)

    def __len__(self):
        return len(self.ids)

    def index(self) -> dict[int, int]:
        return {int(i): k for k, i in enumerate(self.ids)}


@dataclass
class BundleProblem:
    poses: list[Pose]
    points: PointCloud
    observations: list[Observation]
    intrinsics: object
    image_size: tuple[int, int] | None = None   # (width, height)
    log: list[tuple[int, float, float]] = field(default_factory=list)

    def __post_init__(self):
        frames = {p.position_index for p in self.poses}
        ids = set(int(i) for i in self.points.ids)
        for ob in self.observations:
            if ob.frame_index not in frames:
                raise ValueError(f"observation references unknown frame {ob.frame_index}")
            if ob.point_id not in ids:
                raise ValueError(f"observation references unknown point {ob.point_id}")
            if self.image_size is not None:
                w, h = self.image_size
                x, y = ob.pixel
                if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
                    raise ValueError(f"observation {ob} lies outside the frame")

    def _arrays(self):
        pidx = self.points.index()
        fidx = {p.position_index: k for k, p in enumerate(self.poses)}
        pi = np.array([pidx[o.point_id] for o in self.observations], dtype=int)
        fi = np.array([fidx[o.frame_index] for o in self.observations], dtype=int)
        uv = np.array([o.pixel for o in self.observations], dtype=float).reshape(-1, 2)
        return pi, fi, uv


def _residuals(K, rotations, centers, xyz, pi, fi, uv):
    Xc = np.einsum("nji,nj->ni", rotations[fi], xyz[pi] - centers[fi])
    proj = Xc[:, :2] / Xc[:, 2:] * np.array([K[0, 0], K[1, 1]]) + K[:2, 2]
    proj[:, 0] += K[0, 1] * Xc[:, 1] / Xc[:, 2]
    return proj - uv, Xc


def reprojection_error(problem: BundleProblem):
    """Total squared pixel error and the ``(M, 2)`` per-observation residuals."""
    if not problem.observations:
        return 0.0, np.zeros((0, 2))
    pi, fi, uv = problem._arrays()
    rot = np.array([p.rotation for p in problem.poses])
    cen = np.array([p.translation for p in problem.poses])
    r, _ = _residuals(_K(problem.intrinsics), rot, cen, problem.points.xyz, pi, fi, uv)
    return float(np.sum(r ** 2)), r


def _projection_jacobian(K, Xc):
    """d(pixel)/d(Xc), shape ``(M, 2, 3)``."""
    x, y, z = Xc.T
    fx, s, fy = K[0, 0], K[0, 1], K[1, 1]
    J = np.zeros((len(Xc), 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 1] = s / z
    J[:, 0, 2] = -(fx * x + s * y) / z ** 2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / z ** 2
    return J


class _Layout:
    """Parameter vector layout: free poses first (6 each), then points (3 each)."""

    def __init__(self, n_poses: int, n_points: int, refine_poses: bool):
        # the first pose anchors the frame when poses move
        self.free_poses = list(range(1, n_poses)) if refine_poses else []
        self.pose_col = {k: 6 * j for j, k in enumerate(self.free_poses)}
        self.point_base = 6 * len(self.free_poses)
        self.size = self.point_base + 3 * n_points


def jacobian(problem: BundleProblem, refine_poses: bool = False):
    """Sparse ``(2M, P)`` Jacobian of the stacked residuals.

    Point columns come last. Pose columns, when refined, are a rotation
    increment ``w`` applied on the right (``R exp([w]x)``) followed by the
    camera centre.
    """
    pi, fi, uv = problem._arrays()
    K = _K(problem.intrinsics)
    rot = np.array([p.rotation for p in problem.poses])
    cen = np.array([p.translation for p in problem.poses])
    _, Xc = _residuals(K, rot, cen, problem.points.xyz, pi, fi, uv)
    lay = _Layout(len(problem.poses), len(problem.points), refine_poses)
    return _jacobian(K, rot, Xc, pi, fi, lay)


def _jacobian(K, rot, Xc, pi, fi, lay: _Layout):
    m = len(pi)
    Jp = _projection_jacobian(K, Xc)
    Rt = np.transpose(rot[fi], (0, 2, 1))
    dX = Jp @ Rt                               # (M, 2, 3) wrt world point
    rows = np.repeat(np.arange(2 * m).reshape(m, 2), 3, axis=1).reshape(m, 2, 3)
    cols = lay.point_base + 3 * pi[:, None, None] + np.arange(3)[None, None, :]
    r_all, c_all, v_all = [rows.ravel()], [np.broadcast_to(cols, (m, 2, 3)).ravel()], [dX.ravel()]
    if lay.free_poses:
        free = np.array([k in lay.pose_col for k in fi])
        if np.any(free):
            idx = np.flatnonzero(free)
            dW = Jp[idx] @ np.array([skew(v) for v in Xc[idx]])
            dC = -dX[idx]
            base = np.array([lay.pose_col[k] for k in fi[idx]])
            for block, off in ((dW, 0), (dC, 3)):
                r_all.append(rows[idx].ravel())
                c = base[:, None, None] + off + np.arange(3)[None, None, :]
                c_all.append(np.broadcast_to(c, (len(idx), 2, 3)).ravel())
                v_all.append(block.ravel())
    return sp.csr_matrix(
        (np.concatenate(v_all), (np.concatenate(r_all), np.concatenate(c_all))),
        shape=(2 * m, lay.size),
    )


def _apply(rot, cen, xyz, delta, lay: _Layout):
    rot, cen = rot.copy(), cen.copy()
    for k in lay.free_poses:
        c = lay.pose_col[k]
        rot[k] = rot[k] @ exp_so3(delta[c:c + 3])
        cen[k] = cen[k] + delta[c + 3:c + 6]
    xyz = xyz + delta[lay.point_base:].reshape(-1, 3)
    return rot, cen, xyz


def _check_points(problem: BundleProblem, J, lay: _Layout):
    """Raise for points whose 3x3 normal block is (near) singular."""
    JtJ = (J.T @ J).tocsr()
    bad = []
    for k, pid in enumerate(problem.points.ids):
        c = lay.point_base + 3 * k
        B = JtJ[c:c + 3, c:c + 3].toarray()
        s = np.linalg.svd(B, compute_uv=False)
        if s[0] == 0 or s[-1] < 1e-12 * s[0]:
            bad.append(int(pid))
    if bad:
        raise SingularNormalEquations(bad)


def bundle_adjust(problem: BundleProblem, iters: int = 50, tol: float = 1e-10,
                  refine_poses: bool = False, lam: float = 1e-3) -> BundleProblem:
    """Levenberg-Marquardt refinement of the points (and optionally poses).

    Returns a new problem; its ``log`` holds ``(iter, lambda, error)`` with
    row 0 the starting error and one row per iteration afterwards, carrying
    the error after that iteration's accept/reject decision.
    """
    pi, fi, uv = problem._arrays()
    K = _K(problem.intrinsics)
    rot = np.array([p.rotation for p in problem.poses])
    cen = np.array([p.translation for p in problem.poses])
    xyz = problem.points.xyz.copy()
    lay = _Layout(len(problem.poses), len(problem.points), refine_poses)

    r, Xc = _residuals(K, rot, cen, xyz, pi, fi, uv)
    err = float(np.sum(r ** 2))
    history = [(0, lam, err)]
    J = _jacobian(K, rot, Xc, pi, fi, lay)
    _check_points(problem, J, lay)

    # below this the residuals are rounding noise
    floor = 1e-18 * max(len(pi), 1)
    for it in range(1, iters + 1):
        if err <= floor:
            break
        g = J.T @ r.ravel()
        if not np.any(g):
            break
        A = (J.T @ J).tocsc()
        d = A.diagonal()
        accepted = False
        while not accepted:
            M = A + sp.diags(lam * np.maximum(d, 1e-12), format="csc")
            delta = -spsolve(M, g)
            if not np.all(np.isfinite(delta)):
                raise SingularNormalEquations([int(i) for i in problem.points.ids])
            n_rot, n_cen, n_xyz = _apply(rot, cen, xyz, delta, lay)
            n_r, n_Xc = _residuals(K, n_rot, n_cen, n_xyz, pi, fi, uv)
            n_err = float(np.sum(n_r ** 2))
            if np.all(n_Xc[:, 2] > 0) and n_err <= err:
                accepted = True
            else:
                lam *= 10.0
                if lam > 1e16:
                    break
        if not accepted:
            history.append((it, lam, err))
            break
        decrease = (err - n_err) / err
        rot, cen, xyz, r, Xc, err = n_rot, n_cen, n_xyz, n_r, n_Xc, n_err
        lam = max(lam / 10.0, 1e-15)
        history.append((it, lam, err))
        if decrease < tol:
            break
        J = _jacobian(K, rot, Xc, pi, fi, lay)

    poses = [replace(p, rotation=rot[k], translation=cen[k]) for k, p in enumerate(problem.poses)]
    return BundleProblem(
        poses, PointCloud(problem.points.ids, xyz, problem.points.colors),
        list(problem.observations), problem.intrinsics, problem.image_size, history,
    )


def write_ba_log(problem: BundleProblem, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "lambda", "error"])
        for it, lam, err in problem.log:
            w.writerow([it, repr(float(lam)), repr(float(err))])


def _num(x: float) -> str:
    s = np.format_float_positional(float(x), trim="-")
    return "0" if s == "-0" else s


def export_ply(cloud: PointCloud, path) -> None:
    """ASCII PLY with double xyz and, when present, uchar rgb per vertex."""
    if len(cloud) == 0:
        raise EmptyModel("refusing to write an empty point cloud")
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
             "property double x", "property double y", "property double z"]
    if cloud.colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    for k in range(len(cloud)):
        row = [_num(v) for v in cloud.xyz[k]]
        if cloud.colors is not None:
            row += [str(int(c)) for c in cloud.colors[k]]
        lines.append(" ".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, a):
        self.parent.setdefault(a, a)
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller key becomes root so the result is order independent
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def _load(frame):
    if isinstance(frame, (str, Path)):
        return load_image(frame)
    return np.asarray(frame, dtype=float)


def build_model(frames, trajectory, cam, cfg: PipelineConfig | None = None,
                pairs=None) -> BundleProblem:
    """Triangulate matched features over every frame pair with the poses held fixed.

    For each pair ``(U, V)`` plain SIFT keypoints of ``U`` are matched to
    the simulated views of ``V``; matches must agree with the epipolar
    geometry of the known poses. Matched keypoints are snapped to ``V``'s
    own keypoints, chained into tracks across pairs, triangulated from all
    their views and kept when every view reprojects within
    ``cfg.merge_threshold_px``. ``pairs`` overrides the processing order.
    """
    cfg = cfg or PipelineConfig()
    images = [_load(f) for f in frames]
    if len(images) != len(trajectory):
        raise ValueError(f"{len(images)} frames for a {len(trajectory)}-pose trajectory")
    K = _K(cam)
    h, w = images[0].shape
    views = [affine_features(img, cfg.sift, cfg.views) for img in images]
    plain = [v[0].features for v in views]
    trees = [cKDTree(f.points) if len(f) else None for f in plain]
    poses = list(trajectory)

    uf = _UnionFind()
    for U, V in (pairs if pairs is not None else view_pairs(len(images))):
        pu, pv = poses[U - 1], poses[V - 1]
        try:
            _check_baseline(pu, pv)
            matches = match_asymmetric(plain[U - 1], views[V - 1], cfg.ratio)
        except (DegenerateBaseline, NoMatches):
            continue
        if trees[V - 1] is None:
            continue
        x1, x2 = match_arrays(matches)
        R = pv.rotation.T @ pu.rotation
        t = pv.rotation.T @ (pu.translation - pv.translation)
        F = fundamental_from_pose(R, t, K, K)
        ok = sampson_distance(F, x1, x2) < cfg.ransac_threshold
        i1 = trees[U - 1].query(x1)[1]
        d2, i2 = trees[V - 1].query(x2)
        ok &= d2 <= cfg.merge_threshold_px
        for a, b in zip(i1[ok], i2[ok]):
            uf.union((U, int(a)), (V, int(b)))

    tracks: dict = {}
    for node in list(uf.parent):
        tracks.setdefault(uf.find(node), []).append(node)

    ids, xyz, colors, observations = [], [], [], []
    for root in sorted(tracks):
        nodes = sorted(tracks[root])
        frames_in = [f for f, _ in nodes]
        if len(nodes) < 2 or len(set(frames_in)) != len(frames_in):
            continue
        px = np.array([plain[f - 1].points[k] for f, k in nodes])
        rays = np.array([_normalize(p, K)[0] for p in px])
        Rs = [poses[f - 1].rotation for f in frames_in]
        Cs = [poses[f - 1].translation for f in frames_in]
        X = _triangulate_normalized(rays, Rs, Cs)
        depths = np.array([poses[f - 1].world_to_camera(X[None])[0, 2] for f in frames_in])
        if np.any(depths <= 0):
            continue
        reproj = np.array([project(poses[f - 1], K, X)[0] for f in frames_in])
        if np.max(np.linalg.norm(reproj - px, axis=1)) > cfg.merge_threshold_px:
            continue
        pid = len(ids)
        ids.append(pid)
        xyz.append(X)
        f0, (x0, y0) = frames_in[0], px[0]
        g = images[f0 - 1][int(round(y0)), int(round(x0))]
        colors.append([int(round(255 * g))] * 3)
        observations += [Observation(pid, f, (float(p[0]), float(p[1]))) for f, p in zip(frames_in, px)]

    if len(ids) < cfg.min_points:
        raise EmptyModel(f"only {len(ids)} points triangulated, need {cfg.min_points}")
    log.info("model: %d points, %d observations", len(ids), len(observations))
    return BundleProblem(poses, PointCloud(ids, np.array(xyz), np.array(colors)),
                         observations, cam, (w, h))
