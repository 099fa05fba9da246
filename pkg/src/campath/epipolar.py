"""Two-view epipolar geometry: 8-point F, RANSAC, essential matrix, pose.

Point sets are ``(N, 2)`` pixel arrays; row ``i`` of ``pts1`` corresponds to
row ``i`` of ``pts2``. Relative motion ``(R, t)`` maps camera-1 coordinates
to camera-2 coordinates, ``x2 = R @ x1 + t``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .errors import (
    CheiralityAmbiguous,
    DegenerateConfiguration,
    InsufficientInliers,
    NoMatches,
    SkipPair,
)
from .geom import exp_so3

_BATCH = 500


def _h(pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    return np.hstack([pts, np.ones((len(pts), 1))])


def hartley_normalization(pts) -> np.ndarray:
    """Similarity moving the centroid to 0 and the mean distance to sqrt(2)."""
    pts = np.asarray(pts, dtype=float)
    c = pts.mean(axis=0)
    d = np.linalg.norm(pts - c, axis=1).mean()
    if not np.isfinite(d) or d < 1e-12:
        raise DegenerateConfiguration("points are coincident")
    s = np.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _design(x1, x2) -> np.ndarray:
    # x1, x2: (..., N, 3) homogeneous; rows are kron(x2, x1)
    return (x2[..., :, :, None] * x1[..., :, None, :]).reshape(*x1.shape[:-1], 9)


def _rank2(F) -> np.ndarray:
    u, s, vt = np.linalg.svd(F)
    s[..., 2] = 0.0
    return (u * s[..., None, :]) @ vt


def canonical(F) -> np.ndarray:
    """Unit Frobenius norm, largest-magnitude entry positive."""
    F = np.asarray(F, dtype=float)
    F = F / np.linalg.norm(F)
    k = np.argmax(np.abs(F))
    return F if F.flat[k] >= 0 else -F


def fundamental_eight_point(pts1, pts2) -> np.ndarray:
    """Normalized 8-point estimate with rank-2 enforcement, canonically scaled."""
    pts1 = np.asarray(pts1, dtype=float)
    pts2 = np.asarray(pts2, dtype=float)
    if len(pts1) < 8 or len(pts1) != len(pts2):
        raise DegenerateConfiguration("need at least 8 correspondences")
    T1 = hartley_normalization(pts1)
    T2 = hartley_normalization(pts2)
    A = _design(_h(pts1) @ T1.T, _h(pts2) @ T2.T)
    _, s, vt = np.linalg.svd(A)
    if s[7] < 1e-10 * s[0]:
        raise DegenerateConfiguration("design matrix is rank deficient")
    F = _rank2(vt[-1].reshape(3, 3))
    return canonical(T2.T @ F @ T1)


def epipolar_residual(F, pts1, pts2) -> np.ndarray:
    """Algebraic residual ``x2^T F x1`` per correspondence."""
    return np.einsum("ni,ij,nj->n", _h(pts2), np.asarray(F, dtype=float), _h(pts1))


def sampson_distance(F, pts1, pts2) -> np.ndarray:
    """First-order geometric distance (pixels) to the epipolar manifold."""
    F = np.asarray(F, dtype=float)
    x1, x2 = _h(pts1), _h(pts2)
    Fx1 = x1 @ F.T
    Ftx2 = x2 @ F
    num = np.einsum("ni,ni->n", x2, Fx1)
    den = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    return np.abs(num) / np.sqrt(np.maximum(den, 1e-300))


def _batched_sampson_sq(F, x1t, x2t) -> np.ndarray:
    # F: (B, 3, 3); x1t, x2t: (3, N) -> squared Sampson distances (B, N)
    Fx1 = F @ x1t
    Ftx2 = F.transpose(0, 2, 1) @ x2t
    num = (Fx1 * x2t).sum(axis=1)
    den = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    return num * num / np.maximum(den, 1e-300)


@dataclass
class InlierSet:
    mask: np.ndarray
    F: np.ndarray
    trials: int
    seed: int
    cost: float = float("nan")   # truncated cost of the best sampled hypothesis, before refitting

    @property
    def support(self) -> int:
        return int(self.mask.sum())

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)


def _to_essential_manifold(F, K1, K2) -> np.ndarray:
    # F (..., 3, 3) -> nearest F whose K2^T F K1 has singular values (s, s, 0)
    E = K2.T @ F @ K1
    u, s, vt = np.linalg.svd(E)
    m = 0.5 * (s[..., 0] + s[..., 1])
    E = (u * np.stack([m, m, np.zeros_like(m)], axis=-1)[..., None, :]) @ vt
    K1i, K2i = np.linalg.inv(K1), np.linalg.inv(K2)
    return K2i.T @ E @ K1i


def ransac_inliers(pts1, pts2, trials: int = 10000, threshold: float = 1.0,
                   seed: int = 0, min_inliers: int = 8, K1=None, K2=None,
                   score_fraction: float = 0.3, quality=None) -> InlierSet:
    """Robust fundamental matrix from ``trials`` minimal 8-point samples.

    Hypotheses are ranked by the truncated squared Sampson cost
    ``sum(min(d^2, c^2))`` with ``c = score_fraction * threshold`` (lower is
    better), which favours models that fit their inliers tightly over ones
    that merely collect the most points under ``threshold``. With both
    intrinsic matrices given, each hypothesis is first projected onto the
    essential manifold, removing the three degrees of freedom a calibrated
    pair does not have. A hypothesis keeps that projection only when it
    lowers the cost.

    ``quality`` (lower is better, e.g. descriptor distance) turns on guided
    sampling: the first batch of samples is drawn from the best 16 pairs
    and the pool doubles every batch until it covers all pairs.

    Samples are drawn from a generator seeded with ``seed`` in a fixed order,
    so the first ``k`` hypotheses do not depend on ``trials``. Ties go to the
    lowest trial index. The winner is refit on the points within ``c`` until
    that set stops changing; the returned mask uses ``threshold``.
    """
    pts1 = np.asarray(pts1, dtype=float)
    pts2 = np.asarray(pts2, dtype=float)
    n = len(pts1)
    if n < 8:
        raise InsufficientInliers(f"{n} correspondences, need 8")
    calibrated = K1 is not None and K2 is not None
    if calibrated:
        K1 = np.asarray(getattr(K1, "K", K1), dtype=float)
        K2 = np.asarray(getattr(K2, "K", K2), dtype=float)
    T1 = hartley_normalization(pts1)
    T2 = hartley_normalization(pts2)
    x1, x2 = _h(pts1), _h(pts2)
    n1, n2 = x1 @ T1.T, x2 @ T2.T
    x1t, x2t = np.ascontiguousarray(x1.T), np.ascontiguousarray(x2.T)
    core = score_fraction * threshold
    c2 = core * core

    if quality is None:
        ranked = np.arange(n)
    else:
        ranked = np.argsort(np.asarray(quality, dtype=float), kind="stable")
    rng = np.random.default_rng(seed)
    best_cost, best_F = np.inf, None
    done = 0
    while done < trials:
        b = min(_BATCH, trials - done)
        pool = n if quality is None else min(n, 16 << min(done // _BATCH, 30))
        idx = ranked[np.argpartition(rng.random((b, pool)), 7, axis=1)[:, :8]]
        A = _design(n1[idx], n2[idx])
        _, _, vt = np.linalg.svd(A)
        F = T2.T @ _rank2(vt[:, -1].reshape(b, 3, 3)) @ T1
        cost = np.minimum(_batched_sampson_sq(F, x1t, x2t), c2).sum(axis=1)
        if calibrated:
            # minimal samples give poorly conditioned F, so keep whichever form scores better
            Fe = _to_essential_manifold(F, K1, K2)
            ce = np.minimum(_batched_sampson_sq(Fe, x1t, x2t), c2).sum(axis=1)
            better = ce < cost
            F = np.where(better[:, None, None], Fe, F)
            cost = np.where(better, ce, cost)
        k = int(np.argmin(cost))
        if cost[k] < best_cost:
            best_cost, best_F = float(cost[k]), F[k]
        done += b

    F, cost_now = best_F, best_cost
    members = sampson_distance(F, pts1, pts2) < core
    for _ in range(10):
        if members.sum() < 8:
            break
        try:
            F_new = fundamental_eight_point(pts1[members], pts2[members])
        except DegenerateConfiguration:
            break
        candidates = [F_new, _to_essential_manifold(F_new, K1, K2)] if calibrated else [F_new]
        scored = []
        for G in candidates:
            d = sampson_distance(G, pts1, pts2)
            scored.append((float(np.minimum(d * d, c2).sum()), d, G))
        c, d, F_new = min(scored, key=lambda x: x[0])
        if c > cost_now:
            break
        F, cost_now = F_new, c
        new = d < core
        if np.array_equal(new, members):
            break
        members = new
    mask = sampson_distance(F, pts1, pts2) < threshold
    if mask.sum() < max(8, min_inliers):
        raise InsufficientInliers(f"best support {int(mask.sum())}")
    return InlierSet(mask=mask, F=canonical(F), trials=trials, seed=seed, cost=best_cost)


def enforce_essential(E) -> np.ndarray:
    """Project singular values to ``(s, s, 0)`` with ``s`` their top-two mean."""
    u, s, vt = np.linalg.svd(np.asarray(E, dtype=float))
    m = (s[0] + s[1]) / 2.0
    return u @ np.diag([m, m, 0.0]) @ vt


def essential_from_fundamental(F, K1, K2) -> np.ndarray:
    return enforce_essential(np.asarray(K2).T @ np.asarray(F) @ np.asarray(K1))


def essential_from_pose(R, t) -> np.ndarray:
    from .geom import skew
    return skew(t) @ np.asarray(R, dtype=float)


def fundamental_from_pose(R, t, K1, K2) -> np.ndarray:
    E = essential_from_pose(R, t)
    return canonical(np.linalg.inv(K2).T @ E @ np.linalg.inv(K1))


def triangulate_dlt(P1, P2, pts1, pts2) -> np.ndarray:
    """Linear triangulation of ``(N, 2)`` pixel pairs under ``3x4`` projections."""
    pts1 = np.atleast_2d(np.asarray(pts1, dtype=float))
    pts2 = np.atleast_2d(np.asarray(pts2, dtype=float))
    P1 = np.asarray(P1, dtype=float)
    P2 = np.asarray(P2, dtype=float)
    A = np.stack([
        pts1[:, :1] * P1[2] - P1[0],
        pts1[:, 1:] * P1[2] - P1[1],
        pts2[:, :1] * P2[2] - P2[0],
        pts2[:, 1:] * P2[2] - P2[1],
    ], axis=1)
    # row-normalize for conditioning
    A = A / np.linalg.norm(A, axis=2, keepdims=True)
    _, _, vt = np.linalg.svd(A)
    X = vt[:, -1]
    return X[:, :3] / X[:, 3:]


def pose_candidates(E):
    u, _, vt = np.linalg.svd(np.asarray(E, dtype=float))
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    Ra = u @ W @ vt
    Rb = u @ W.T @ vt
    t = u[:, 2]
    return [(Ra, t), (Ra, -t), (Rb, t), (Rb, -t)]


def decompose_essential(E, pts1, pts2, K1, K2):
    """Pick the ``(R, t)`` candidate that puts most points in front of both cameras.

    Returns ``(R, t)`` with ``t`` unit norm. Raises :class:`CheiralityAmbiguous`
    if the best candidate does not hold a strict majority of the points.
    """
    E = np.asarray(E, dtype=float)
    pts1 = np.asarray(pts1, dtype=float)
    if np.linalg.norm(E) < 1e-12 or len(pts1) == 0:
        raise CheiralityAmbiguous("essential matrix is zero")
    K1 = np.asarray(K1, dtype=float)
    K2 = np.asarray(K2, dtype=float)
    P1 = K1 @ np.hstack([np.eye(3), np.zeros((3, 1))])
    votes = []
    for R, t in pose_candidates(E):
        P2 = K2 @ np.hstack([R, t[:, None]])
        X = triangulate_dlt(P1, P2, pts1, pts2)
        z1 = X[:, 2]
        z2 = X @ R[2] + t[2]
        ok = np.isfinite(z1) & (z1 > 0) & (z2 > 0)
        votes.append(int(ok.sum()))
    order = np.argsort(votes)[::-1]
    best = int(order[0])
    if votes[best] * 2 <= len(pts1) or votes[best] == votes[order[1]]:
        raise CheiralityAmbiguous(f"cheirality votes {votes}")
    R, t = pose_candidates(E)[best]
    return R, t / np.linalg.norm(t)


def cheirality_mask(R, t, pts1, pts2, K1, K2) -> np.ndarray:
    """Points that triangulate in front of both cameras for motion ``(R, t)``."""
    P1 = np.asarray(K1, dtype=float) @ np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.asarray(K2, dtype=float) @ np.hstack([R, np.reshape(t, (3, 1))])
    X = triangulate_dlt(P1, P2, pts1, pts2)
    return np.isfinite(X[:, 2]) & (X[:, 2] > 0) & (X @ R[2] + t[2] > 0)


def pose_from_inliers(pts1, pts2, F, K1, K2, rounds: int = 3):
    """Decompose ``F`` and refit it on the inliers that pass cheirality.

    Correspondences that slide along their epipolar line pass any epipolar
    test but may triangulate behind the cameras; as high-leverage points they
    bias the linear fit, so they are dropped and ``F`` re-estimated.
    Returns ``(R, t, F, mask)``.
    """
    mask = np.ones(len(pts1), bool)
    for _ in range(rounds):
        E = essential_from_fundamental(F, K1, K2)
        R, t = decompose_essential(E, pts1[mask], pts2[mask], K1, K2)
        front = cheirality_mask(R, t, pts1, pts2, K1, K2) & mask
        if front.sum() == mask.sum() or front.sum() < 8:
            break
        mask = front
        F = fundamental_eight_point(pts1[mask], pts2[mask])
    return R, t, F, mask


def _tangent_basis(t) -> np.ndarray:
    # two unit vectors orthogonal to t, as columns
    _, _, vt = np.linalg.svd(np.reshape(t, (1, 3)))
    return vt[1:].T


def refine_pose(pts1, pts2, R, t, K1, K2, scale: float = 0.5):
    """Robust nonlinear refinement of ``(R, t)`` on Sampson distances.

    The linear estimate carries the two spare degrees of freedom of ``F``;
    when the parallax is small those absorb localization noise and the
    projection onto an essential matrix lands far from the true motion.
    Minimizing a Cauchy loss (``scale`` in pixels) over the five pose
    parameters removes that bias. Returns ``(R, t)`` with unit ``t``.
    """
    K1i = np.linalg.inv(np.asarray(K1, dtype=float))
    K2i = np.linalg.inv(np.asarray(K2, dtype=float))
    t = np.asarray(t, dtype=float) / np.linalg.norm(t)
    B = _tangent_basis(t)

    def pose(p):
        tt = t + B @ p[3:]
        return R @ exp_so3(p[:3]), tt / np.linalg.norm(tt)

    def residual(p):
        Rp, tp = pose(p)
        return sampson_distance(K2i.T @ essential_from_pose(Rp, tp) @ K1i, pts1, pts2)

    sol = least_squares(residual, np.zeros(5), loss="cauchy", f_scale=scale, x_scale=1e-3)
    return pose(sol.x)


@dataclass
class PairEstimate:
    rotation: np.ndarray          # orientation of camera 2 expressed in camera 1
    motion_R: np.ndarray          # x2 = motion_R @ x1 + t
    t: np.ndarray
    n_matches: int
    n_inliers: int
    static: bool = False


def pose_from_features(feats1, views2, K1, K2, cfg=None) -> PairEstimate:
    """Relative pose from plain features of frame 1 and simulated views of frame 2."""
    from .config import PipelineConfig
    from .features import match_arrays, match_asymmetric

    cfg = cfg or PipelineConfig()
    K1 = np.asarray(getattr(K1, "K", K1), dtype=float)
    K2 = np.asarray(getattr(K2, "K", K2), dtype=float)
    if len(feats1) == 0:
        raise SkipPair("no features in first image")
    try:
        matches = match_asymmetric(feats1, views2, ratio=cfg.ratio)
    except NoMatches as exc:
        raise SkipPair(str(exc)) from exc
    p1, p2 = match_arrays(matches)
    if len(p1) >= cfg.min_inliers and np.median(np.linalg.norm(p2 - p1, axis=1)) < cfg.min_parallax_px:
        return PairEstimate(np.eye(3), np.eye(3), np.zeros(3), len(p1), len(p1), static=True)
    try:
        inl = ransac_inliers(p1, p2, cfg.ransac_trials, cfg.ransac_threshold,
                             seed=cfg.seed, min_inliers=cfg.min_inliers, K1=K1, K2=K2,
                             score_fraction=cfg.ransac_score_fraction,
                             quality=[m.distance for m in matches])
        q1, q2 = p1[inl.mask], p2[inl.mask]
        R, t, _, front = pose_from_inliers(q1, q2, inl.F, K1, K2)
        R, t = refine_pose(q1[front], q2[front], R, t, K1, K2, cfg.refine_scale_px)
    except (InsufficientInliers, CheiralityAmbiguous, DegenerateConfiguration) as exc:
        raise SkipPair(str(exc)) from exc
    return PairEstimate(R.T, R, t, len(p1), int(front.sum()))


def relative_pose_for_pair(i1, i2, k1, k2, cfg=None) -> PairEstimate:
    """SIFT on ``i1``, affine-simulated SIFT on ``i2``, RANSAC, E, pose.

    ``k1``/``k2`` are 3x3 intrinsic matrices or :class:`CameraIntrinsics`.
    Failures surface as :class:`SkipPair`.
    """
    from .config import PipelineConfig
    from .features import affine_features, detect_sift

    cfg = cfg or PipelineConfig()
    return pose_from_features(detect_sift(i1, cfg.sift), affine_features(i2, cfg.sift, cfg.views), k1, k2, cfg)


def relative_rotation_for_pair(i1, i2, k1, k2, cfg=None) -> np.ndarray:
    """Relative rotation between two frames of one camera.

    The result is the orientation of the second camera in the frame of the
    first, which is the factor :func:`campath.geom.chain_rotation` expects.
    """
    return relative_pose_for_pair(i1, i2, k1, k2, cfg).rotation
