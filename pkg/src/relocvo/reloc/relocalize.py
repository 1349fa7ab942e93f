"""Query-to-map relocalization: retrieval, matching, PnP, global-pose assembly."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import RelocalizationFailed
from ..geometry import SE3
from .matching import RATIO, match_features
from .pnp import MAX_ITERATIONS, MIN_INLIERS, THRESHOLD_PX, pnp_ransac
from .retrieval import retrieve_candidates, spatial_bow


@dataclass
class RelocResult:
    frame_id: int
    pose: SE3  # map-to-camera
    reference_ids: list  # successful candidates, most inliers first
    reference_inliers: list
    n_inliers: int
    mean_error: float

    def top_references(self, n=2):
        return list(zip(self.reference_ids, self.reference_inliers))[:n]


@dataclass
class RelocConfig:
    ratio: float = RATIO
    window: int = 30
    top_k: int = 3
    max_failures: int = 5
    ransac_iterations: int = MAX_ITERATIONS
    threshold: float = THRESHOLD_PX
    min_inliers: int = MIN_INLIERS
    seed: int = 0


def relocalize(frame_id, features, db, previous=None, config=None):
    """Global pose of a query frame, or ``None`` when every candidate fails."""
    cfg = config or RelocConfig()
    cam = db.camera
    query = spatial_bow(features, db.vocabulary, cam.width, cam.height, db.levels)
    candidates = retrieve_candidates(query, db, previous, cfg.window, cfg.top_k)
    found = []
    for rank, (kf_id, _score) in enumerate(candidates):
        ref_feats, ref_points = db.keyframes[kf_id].matchable()
        pairs = match_features(features, ref_feats, cfg.ratio)
        if len(pairs) < 4:
            continue
        # seed per (frame, candidate) so results do not depend on evaluation order
        rng = np.random.default_rng([cfg.seed, int(frame_id), int(kf_id)])
        try:
            res = pnp_ransac(ref_points[pairs[:, 1]], features.keypoints[pairs[:, 0]], cam,
                             cfg.ransac_iterations, cfg.threshold, cfg.min_inliers, rng=rng)
        except RelocalizationFailed:
            continue
        found.append((res.n_inliers, -rank, kf_id, res))
    if not found:
        return None
    found.sort(key=lambda f: (f[0], f[1]), reverse=True)
    n_inl, _, best_id, best = found[0]
    pose = best.pose @ db.pose(best_id)
    return RelocResult(frame_id, pose, [f[2] for f in found], [f[0] for f in found], n_inl, best.mean_error)


@dataclass
class Relocalizer:
    """Sequential relocalization with a retrieval window around the last match."""

    db: object
    config: RelocConfig = field(default_factory=RelocConfig)
    previous: int = None
    failures: int = 0

    def __call__(self, frame_id, features):
        res = relocalize(frame_id, features, self.db, self.previous, self.config)
        if res is None:
            self.failures += 1
            if self.failures >= self.config.max_failures:
                self.previous, self.failures = None, 0
        else:
            self.previous, self.failures = res.reference_ids[0], 0
        return res
