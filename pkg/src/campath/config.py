"""Run configuration shared by the pipeline stages."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields


@dataclass
class SiftParams:
    n_octaves: int = 4
    scales_per_octave: int = 3
    contrast_threshold: float = 0.03
    edge_threshold: float = 10.0
    sigma: float = 1.6
    max_features: int = 0


@dataclass
class ViewGrid:
    tilt_step: float = 15.0
    rot_step: float = 30.0
    max_tilt: float = 45.0


@dataclass
class PipelineConfig:
    seed: int = 0
    sift: SiftParams = field(default_factory=SiftParams)
    views: ViewGrid = field(default_factory=ViewGrid)
    ratio: float = 0.75
    ransac_trials: int = 10000
    ransac_threshold: float = 1.0
    # hypotheses are scored by squared Sampson distance truncated at this fraction of the threshold
    ransac_score_fraction: float = 0.3
    min_inliers: int = 8
    # median match displacement below which a pair counts as "no motion"
    min_parallax_px: float = 0.5
    # Cauchy loss scale of the nonlinear pose refinement
    refine_scale_px: float = 0.5
    # stereo
    max_row_diff: float = 1.5
    min_disparity: float = 0.5
    min_landmarks: int = 15
    min_persistent: int = 3
    # reconstruction
    merge_threshold_px: float = 2.0
    min_points: int = 8
    ba_iters: int = 50
    ba_tol: float = 1e-10
    refine_poses: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "sift" in d:
            d["sift"] = SiftParams(**d["sift"])
        if "views" in d:
            d["views"] = ViewGrid(**d["views"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()
