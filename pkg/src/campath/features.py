"""SIFT features and the asymmetric affine-simulated matcher.

Only the second image of a pair is affine-simulated: its views are sampled
on a (tilt, in-plane rotation) grid, SIFT runs on every view, and features
of the first image (plain SIFT) are matched against each view separately.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import cv2
import numpy as np

from .config import SiftParams, ViewGrid
from .errors import ImageTooSmall, NoMatches

LUMA = (0.299, 0.587, 0.114)
_UPSAMPLE_SHIFT = 0.25


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float
    orientation: float  # radians

    @property
    def pt(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class AffineView:
    tilt_deg: float
    rot_deg: float
    map: np.ndarray  # 2x3, simulated-image pixels -> original pixels

    def __post_init__(self):
        m = np.asarray(self.map, dtype=float).reshape(2, 3)
        if abs(np.linalg.det(m[:, :2])) < 1e-12:
            raise ValueError("affine view map is not invertible")
        object.__setattr__(self, "map", m)

    def to_original(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        return pts @ self.map[:, :2].T + self.map[:, 2]


@dataclass(frozen=True)
class MatchPair:
    p1: tuple[float, float]
    p2: tuple[float, float]
    distance: float
    view: int = 0


class FeatureSet(Sequence):
    """Keypoints with L2-normalized 128-bin descriptors, stored as arrays.

    Iterating yields ``(Keypoint, descriptor)`` tuples.
    """

    def __init__(self, points, scales, orientations, descriptors):
        self.points = np.asarray(points, dtype=float).reshape(-1, 2)
        self.scales = np.asarray(scales, dtype=float).reshape(-1)
        self.orientations = np.asarray(orientations, dtype=float).reshape(-1)
        self.descriptors = np.asarray(descriptors, dtype=float).reshape(-1, 128)

    @classmethod
    def empty(cls) -> "FeatureSet":
        return cls(np.zeros((0, 2)), [], [], np.zeros((0, 128)))

    def __len__(self) -> int:
        return len(self.points)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return FeatureSet(self.points[i], self.scales[i], self.orientations[i], self.descriptors[i])
        x, y = self.points[i]
        return Keypoint(float(x), float(y), float(self.scales[i]), float(self.orientations[i])), self.descriptors[i]

    def __iter__(self) -> Iterator:
        for i in range(len(self)):
            yield self[i]

    def subset(self, mask) -> "FeatureSet":
        return FeatureSet(self.points[mask], self.scales[mask], self.orientations[mask], self.descriptors[mask])


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim == 3:
        img = img[..., :3] @ np.array(LUMA)
    return img


def as_image(img) -> np.ndarray:
    """Validate a single-channel intensity raster with values in [0, 1]."""
    img = to_gray(img)
    if img.ndim != 2:
        raise ValueError("expected a 2-D intensity image")
    if not np.all(np.isfinite(img)) or img.min(initial=0.0) < 0.0 or img.max(initial=0.0) > 1.0:
        raise ValueError("intensities must be finite and within [0, 1]")
    return img


def load_image(path) -> np.ndarray:
    """Read a PNG/PGM file as a grayscale float image in [0, 1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"cannot read image {path}")
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    img = raw.astype(float) / scale
    if img.ndim == 3:
        # OpenCV channel order is BGR(A)
        img = img[..., 2::-1] if img.shape[2] >= 3 else img[..., 0]
    return to_gray(img)


def save_image(img, path) -> None:
    data = np.round(np.clip(as_image(img), 0.0, 1.0) * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(path), data):
        raise OSError(f"cannot write image {path}")


def _sift(params: SiftParams):
    return cv2.SIFT_create(
        nfeatures=params.max_features,
        nOctaveLayers=params.scales_per_octave,
        contrastThreshold=params.contrast_threshold,
        edgeThreshold=params.edge_threshold,
        sigma=params.sigma,
    )


def detect_sift(img, params: SiftParams | None = None, mask=None) -> FeatureSet:
    """Detect SIFT keypoints and L2-normalized descriptors.

    Output order is sorted by (y, x, scale, orientation), so results are
    reproducible for a fixed image and parameter set.
    """
    params = params or SiftParams()
    img = as_image(img)
    h, w = img.shape
    if h < 32 or w < 32:
        raise ImageTooSmall(f"{w}x{h} image, need at least 32x32")
    data = np.round(img * 255.0).astype(np.uint8)
    if mask is not None:
        mask = np.asarray(mask, dtype=np.uint8)
    kps, desc = _sift(params).detectAndCompute(data, mask)
    if not kps:
        return FeatureSet.empty()
    # cv2 numbers the upsampled base octave -1 (stored as 255 in the low byte)
    octave = np.array([k.octave & 255 for k in kps], dtype=np.uint8).view(np.int8)
    keep = octave <= params.n_octaves - 2
    # cv2 reports coordinates of the 2x upsampled base halved, which shifts
    # every keypoint by +0.25 px relative to pixel-centre coordinates
    pts = np.array([k.pt for k in kps], dtype=float)[keep] - _UPSAMPLE_SHIFT
    scales = np.array([k.size for k in kps], dtype=float)[keep] / 2.0
    ori = np.deg2rad(np.array([k.angle for k in kps], dtype=float))[keep]
    desc = desc.astype(float)[keep]
    norms = np.linalg.norm(desc, axis=1)
    good = norms > 0
    pts, scales, ori, desc = pts[good], scales[good], ori[good], desc[good] / norms[good, None]
    ori = np.where(ori > math.pi, ori - 2 * math.pi, ori)
    order = np.lexsort((ori, scales, pts[:, 0], pts[:, 1]))
    return FeatureSet(pts[order], scales[order], ori[order], desc[order])


def view_parameters(tilt_step: float = 15.0, rot_step: float = 30.0,
                    max_tilt: float = 45.0) -> list[tuple[float, float]]:
    """(tilt, rotation) pairs in degrees, identity view first."""
    if max_tilt < 0 or max_tilt >= 90:
        raise ValueError("max_tilt must lie in [0, 90)")
    if max_tilt == 0:
        return [(0.0, 0.0)]
    n_tilt = max_tilt / tilt_step
    n_rot = 180.0 / rot_step
    if abs(n_tilt - round(n_tilt)) > 1e-9 or abs(n_rot - round(n_rot)) > 1e-9:
        raise ValueError("steps must divide their ranges evenly")
    out = [(0.0, 0.0)]
    for i in range(1, int(round(n_tilt)) + 1):
        for j in range(int(round(n_rot))):
            out.append((i * tilt_step, j * rot_step))
    return out


def affine_skew(img, tilt_deg: float, rot_deg: float):
    """Simulate one camera tilt/rotation of ``img``.

    The image is rotated in-plane by ``rot_deg`` onto a canvas holding the
    whole rotated frame, low-pass filtered along x and subsampled along x by
    the tilt factor ``t = 1 / cos(tilt)``. Returns the simulated image, the
    mask of pixels that came from the original frame (``None`` for the
    identity view) and the :class:`AffineView` mapping simulated pixels back
    to the original.
    """
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape
    mask = np.full((h, w), 255, np.uint8)
    A = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    if rot_deg != 0.0:
        phi = math.radians(rot_deg)
        c, s = math.cos(phi), math.sin(phi)
        R = np.array([[c, -s], [s, c]])
        corners = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=float) @ R.T
        x0, y0 = np.floor(corners.min(axis=0))
        x1, y1 = np.ceil(corners.max(axis=0))
        A = np.hstack([R, [[-x0], [-y0]]])
        w, h = int(x1 - x0), int(y1 - y0)
        img = cv2.warpAffine(img, A, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
        mask = cv2.warpAffine(mask, A, (w, h), flags=cv2.INTER_NEAREST)
    if tilt_deg != 0.0:
        t = 1.0 / math.cos(math.radians(tilt_deg))
        sigma = 0.8 * math.sqrt(t * t - 1.0)
        img = cv2.GaussianBlur(img, (0, 0), sigmaX=sigma, sigmaY=0.01)
        new_w = max(1, int(round(w / t)))
        sx = new_w / w
        img = cv2.resize(img, (new_w, h), interpolation=cv2.INTER_LINEAR)
        mask = cv2.resize(mask, (new_w, h), interpolation=cv2.INTER_NEAREST)
        # pixel-centre convention of cv2.resize: x' = sx * (x + 0.5) - 0.5
        S = np.array([[sx, 0.0, 0.5 * sx - 0.5], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        A = (S @ np.vstack([A, [0.0, 0.0, 1.0]]))[:2]
    if rot_deg != 0.0 or tilt_deg != 0.0:
        # keep interior pixels only, border replication creates false structure
        mask = cv2.erode(mask, np.ones((3, 3), np.uint8))
    else:
        mask = None
    view = AffineView(tilt_deg, rot_deg, cv2.invertAffineTransform(A))
    return np.clip(img, 0.0, 1.0).astype(float), mask, view


def simulate_affine_views(img, tilt_step: float = 15.0, rot_step: float = 30.0,
                          max_tilt: float = 60.0):
    """Identity view plus one simulated view per (tilt, rotation) grid cell."""
    img = as_image(img)
    return [affine_skew(img, t, r)[::2] for t, r in view_parameters(tilt_step, rot_step, max_tilt)]


@dataclass
class ViewFeatures:
    features: FeatureSet  # coordinates already mapped to the original image
    view: AffineView


def affine_features(img, params: SiftParams | None = None,
                    grid: ViewGrid | None = None) -> list[ViewFeatures]:
    """SIFT on every simulated view of ``img``, keypoints mapped back to ``img``."""
    params = params or SiftParams()
    grid = grid or ViewGrid()
    img = as_image(img)
    h, w = img.shape
    out = []
    for tilt, rot in view_parameters(grid.tilt_step, grid.rot_step, grid.max_tilt):
        sim, mask, view = affine_skew(img, tilt, rot)
        try:
            feats = detect_sift(sim, params, mask)
        except ImageTooSmall:
            feats = FeatureSet.empty()
        pts = view.to_original(feats.points)
        inside = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
        feats = feats.subset(inside)
        feats.points = pts[inside]
        out.append(ViewFeatures(feats, view))
    return out


def _ratio_matches(d1: np.ndarray, d2: np.ndarray, ratio: float):
    # descriptors are unit vectors: |a - b|^2 = 2 - 2 a.b
    sim = d1 @ d2.T
    if d2.shape[0] == 1:
        j = np.zeros(len(d1), dtype=int)
        dist = np.sqrt(np.maximum(2.0 - 2.0 * sim[:, 0], 0.0))
        return np.arange(len(d1)), j, dist
    top2 = np.argpartition(-sim, 1, axis=1)[:, :2]
    rows = np.arange(len(d1))
    s = sim[rows[:, None], top2]
    swap = s[:, 1] > s[:, 0]
    best = np.where(swap, top2[:, 1], top2[:, 0])
    s1 = np.maximum(s[:, 0], s[:, 1])
    s2 = np.minimum(s[:, 0], s[:, 1])
    dist1 = np.sqrt(np.maximum(2.0 - 2.0 * s1, 0.0))
    dist2 = np.sqrt(np.maximum(2.0 - 2.0 * s2, 0.0))
    keep = dist1 < ratio * dist2
    return rows[keep], best[keep], dist1[keep]


def match_asymmetric(feats1: FeatureSet, views2, ratio: float = 0.75) -> list[MatchPair]:
    """Match plain SIFT features of image 1 against every simulated view of image 2.

    Each view is matched on its own with the nearest-neighbour ratio test;
    when a keypoint of image 1 matches in several views, the smallest
    descriptor distance wins (earlier view on ties). Raises
    :class:`NoMatches` if nothing survives.
    """
    if isinstance(views2, FeatureSet):
        views2 = [ViewFeatures(views2, AffineView(0.0, 0.0, np.eye(2, 3)))]
    best_dist = np.full(len(feats1), np.inf)
    best_p2 = np.zeros((len(feats1), 2))
    best_view = np.full(len(feats1), -1)
    if len(feats1):
        for vi, vf in enumerate(views2):
            if len(vf.features) == 0:
                continue
            i, j, d = _ratio_matches(feats1.descriptors, vf.features.descriptors, ratio)
            better = d < best_dist[i]
            i, j, d = i[better], j[better], d[better]
            best_dist[i] = d
            best_p2[i] = vf.features.points[j]
            best_view[i] = vi
    idx = np.flatnonzero(best_view >= 0)
    if len(idx) == 0:
        raise NoMatches("no correspondences passed the ratio test")
    return [
        MatchPair(tuple(feats1.points[k]), tuple(best_p2[k]), float(best_dist[k]), int(best_view[k]))
        for k in idx
    ]


def match_arrays(matches: Sequence[MatchPair]) -> tuple[np.ndarray, np.ndarray]:
    """``(N, 2)`` point arrays for both sides of a match list."""
    if not matches:
        return np.zeros((0, 2)), np.zeros((0, 2))
    return np.array([m.p1 for m in matches]), np.array([m.p2 for m in matches])
