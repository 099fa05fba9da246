"""Compare an estimated trajectory with a timestamped ground-truth path."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NonMonotonicTimestamps, OutOfRange, ParseError

GT_HEADER = ["t", "x", "y", "z"]


@dataclass(frozen=True)
class GroundTruthTrajectory:
    times: np.ndarray       # (M,) seconds
    positions: np.ndarray   # (M, 3) mm

    def __post_init__(self):
        if len(self.times) != len(self.positions):
            raise ValueError("times and positions differ in length")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise NonMonotonicTimestamps("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.times)

    def at(self, t) -> np.ndarray:
        """Linearly interpolated position(s) at time(s) ``t``."""
        t = np.asarray(t, dtype=float)
        if np.any(t < self.times[0]) or np.any(t > self.times[-1]):
            raise OutOfRange(
                f"times outside ground truth range [{self.times[0]}, {self.times[-1]}]"
            )
        return np.stack([np.interp(t, self.times, self.positions[:, k]) for k in range(3)], axis=-1)


@dataclass(frozen=True)
class MetricsReport:
    total_error_mm: float
    rmse_mm: float
    accuracy_percent: float
    path_length_mm: float
    per_position_error: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "total_error_mm": self.total_error_mm,
            "rmse_mm": self.rmse_mm,
            "accuracy_percent": self.accuracy_percent,
            "path_length_mm": self.path_length_mm,
            "per_position_error": list(self.per_position_error),
        }


def load_ground_truth(path) -> GroundTruthTrajectory:
    """Read a ``t,x,y,z`` CSV (header required, at least two rows)."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != GT_HEADER:
            raise ParseError(1, f"expected header {','.join(GT_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ParseError(lineno, f"expected 4 columns, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError(lineno, "non-finite value")
            rows.append(vals)
    if len(rows) < 2:
        raise ParseError(len(rows) + 1, "need at least 2 samples")
    a = np.array(rows)
    return GroundTruthTrajectory(a[:, 0], a[:, 1:])


def save_ground_truth(gt: GroundTruthTrajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GT_HEADER)
        for t, p in zip(gt.times, gt.positions):
            w.writerow([repr(float(t)), *(repr(float(v)) for v in p)])


def align_and_resample(gt: GroundTruthTrajectory, est, frame_times):
    """Ground truth sampled at ``frame_times``, paired with the estimate.

    ``est`` is a Trajectory or an ``(n, 3)`` array of positions. Both paths
    are shifted so their first position sits at the origin. Returns
    ``(gt_positions, est_positions)``, each ``(n, 3)``.
    """
    est_pos = est.translations if hasattr(est, "translations") else np.asarray(est, dtype=float)
    frame_times = np.asarray(frame_times, dtype=float)
    if len(frame_times) != len(est_pos):
        raise ValueError(f"{len(frame_times)} frame times for {len(est_pos)} positions")
    g = gt.at(frame_times)
    return g - g[0], est_pos - est_pos[0]


def compute_metrics(gt_positions, est_positions) -> MetricsReport:
    g = np.asarray(gt_positions, dtype=float)
    e = np.asarray(est_positions, dtype=float)
    if g.shape != e.shape or len(g) < 2:
        raise ValueError("need two equally long lists of at least 2 positions")
    err = np.linalg.norm(g - e, axis=1)
    total = float(err[-1])
    path = float(np.linalg.norm(np.diff(g, axis=0), axis=1).sum())
    return MetricsReport(
        total_error_mm=total,
        rmse_mm=float(np.sqrt(np.mean(err ** 2))),
        accuracy_percent=accuracy(total, path),
        path_length_mm=path,
        per_position_error=tuple(float(x) for x in err),
    )


def accuracy(total_error: float, path_length: float) -> float:
    if path_length <= 0:
        return 100.0 if total_error == 0 else -math.inf
    return 100.0 * (1.0 - total_error / path_length)


def write_metrics_json(report: MetricsReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def write_error_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["p", "error_mm"])
        for p, e in enumerate(report.per_position_error, start=1):
            w.writerow([p, repr(e)])
